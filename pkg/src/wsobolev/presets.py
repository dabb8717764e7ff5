"""Built-in measure configurations used by the default suite and the tests."""
from __future__ import annotations

import math

from .measure import MeasureSpec, parse_measure_spec, product_spec


def _fmt(v) -> str:
    return repr(float(v))


def lebesgue(ndim: int = 2) -> MeasureSpec:
    lo = ", ".join(["0.0"] * ndim)
    hi = ", ".join(["1.0"] * ndim)
    return parse_measure_spec(f"""
[domain]
ambient_dim = {ndim}
bbox = [[{lo}], [{hi}]]
[[stratum]]
kind = "ac_density"
dim = {ndim}
density = "1"
""", name=f"lebesgue{ndim}")


def segment(theta_deg: float = 0.0) -> MeasureSpec:
    t = math.radians(theta_deg)
    x1, y1 = math.cos(t), math.sin(t)
    if abs(x1) < 1e-15:
        x1 = 0.0
    if abs(y1) < 1e-15:
        y1 = 0.0
    return parse_measure_spec(f"""
[domain]
ambient_dim = 2
bbox = [[-0.25, -0.25], [1.25, 1.25]]
[[stratum]]
kind = "simplex"
dim = 1
vertices = [[0.0, 0.0], [{_fmt(x1)}, {_fmt(y1)}]]
""", name=f"segment{theta_deg:g}")


def cross() -> MeasureSpec:
    return parse_measure_spec("""
[domain]
ambient_dim = 2
bbox = [[0.0, 0.0], [1.0, 1.0]]
[[stratum]]
kind = "simplex"
dim = 1
vertices = [[0.1, 0.5], [0.9, 0.5]]
[[stratum]]
kind = "simplex"
dim = 1
vertices = [[0.5, 0.1], [0.5, 0.9]]
""", name="cross")


def cantor(variant: str = "ternary", generations: int = 30) -> MeasureSpec:
    return parse_measure_spec(f"""
[domain]
ambient_dim = 1
bbox = [[0.0], [1.0]]
[[stratum]]
kind = "cantor"
variant = "{variant}"
generations = {generations}
axis = 1
interval = [0.0, 1.0]
""", name=f"{variant}{generations}")


def lebesgue_times_cantor(generations: int = 30) -> MeasureSpec:
    return product_spec(lebesgue(1), cantor("ternary", generations), name="lebesgue_x_ternary")


PRESETS = {
    "lebesgue_square": lambda: lebesgue(2),
    "lebesgue_interval": lambda: lebesgue(1),
    "segment": lambda: segment(30.0),
    "segment0": lambda: segment(0.0),
    "segment30": lambda: segment(30.0),
    "segment90": lambda: segment(90.0),
    "cross": cross,
    "ternary": lambda: cantor("ternary", 30),
    "fat_cantor": lambda: cantor("svc", 24),
    "lebesgue_x_ternary": lebesgue_times_cantor,
}
