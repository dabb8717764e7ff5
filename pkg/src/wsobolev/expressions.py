"""Closed-form scalar functions on R^n with symbolic gradients.

Accepted grammar: numbers, ``x1``..``x3``, ``+ - * / **``, parentheses,
``cos``, ``sin``, ``exp``, ``sqrt``, ``abs``, ``pi`` and ``cone(p1, .., pn)``
which stands for the Euclidean distance ``|x - p|``.
"""
from __future__ import annotations

import re
from functools import cached_property

import numpy as np
import sympy as sp

from .errors import EvalError, ValidationError

SYMBOLS = sp.symbols("x1 x2 x3", real=True)
_TOKEN = re.compile(r"\s*(?:(\d+\.?\d*(?:[eE][+-]?\d+)?|\.\d+(?:[eE][+-]?\d+)?)|([A-Za-z_]\w*)|(\*\*|[-+*/(),]))")
_NAMES = {"cos", "sin", "exp", "sqrt", "abs", "pi", "cone", "x1", "x2", "x3"}


def _cone(*point):
    return sp.sqrt(sum((SYMBOLS[i] - sp.sympify(p)) ** 2 for i, p in enumerate(point)))


_LOCALS = {
    "cos": sp.cos, "sin": sp.sin, "exp": sp.exp, "sqrt": sp.sqrt,
    "abs": sp.Abs, "pi": sp.pi, "cone": _cone,
    "x1": SYMBOLS[0], "x2": SYMBOLS[1], "x3": SYMBOLS[2],
}


def _tokenize(text: str) -> None:
    pos = 0
    text = text.rstrip()
    while pos < len(text):
        m = _TOKEN.match(text, pos)
        if not m or m.end() == pos:
            raise ValidationError(f"unexpected character in expression {text!r} at {pos}")
        name = m.group(2)
        if name is not None and name not in _NAMES:
            raise ValidationError(f"unknown name {name!r} in expression {text!r}")
        pos = m.end()


class ClosedForm:
    """A scalar expression in x1..xn, evaluated on arrays of shape (..., n)."""

    def __init__(self, text: str, ndim: int):
        text = str(text).strip()
        if not text:
            raise ValidationError("empty expression")
        _tokenize(text)
        try:
            expr = sp.sympify(text, locals=_LOCALS)
        except (sp.SympifyError, TypeError, SyntaxError) as exc:
            raise ValidationError(f"cannot parse expression {text!r}: {exc}") from None
        used = {str(s) for s in expr.free_symbols}
        allowed = {f"x{i + 1}" for i in range(ndim)}
        if not used <= allowed:
            raise ValidationError(f"expression {text!r} uses {sorted(used - allowed)} in dimension {ndim}")
        self.text = text
        self.ndim = ndim
        self.expr = expr
        syms = SYMBOLS[:ndim]
        self._f = sp.lambdify(syms, expr, "numpy")
        self._grad = [sp.lambdify(syms, sp.diff(expr, s), "numpy") for s in syms]

    def __repr__(self) -> str:
        return f"ClosedForm({self.text!r}, ndim={self.ndim})"

    def _args(self, x):
        x = np.asarray(x, dtype=float)
        return x, [x[..., i] for i in range(self.ndim)]

    def __call__(self, x) -> np.ndarray:
        x, args = self._args(x)
        with np.errstate(all="ignore"):
            val = np.broadcast_to(np.asarray(self._f(*args), dtype=float), x.shape[:-1]).copy()
        if not np.all(np.isfinite(val)):
            raise EvalError(f"{self.text!r} is not finite at some evaluation points")
        return val

    def gradient(self, x) -> np.ndarray:
        """Gradient at the points; set to zero where it is undefined (cone apices)."""
        x, args = self._args(x)
        out = np.empty(x.shape[:-1] + (self.ndim,))
        with np.errstate(all="ignore"):
            for i, g in enumerate(self._grad):
                out[..., i] = np.broadcast_to(np.asarray(g(*args), dtype=float), x.shape[:-1])
        out[~np.isfinite(out)] = 0.0
        return out

    def polynomial_degree(self) -> int | None:
        """Total degree if the expression is a polynomial, else None."""
        syms = SYMBOLS[: self.ndim]
        if not self.expr.is_polynomial(*syms):
            return None
        if not syms:
            return 0
        return int(sp.Poly(self.expr, *syms).total_degree())

    @cached_property
    def is_constant(self) -> bool:
        return not self.expr.free_symbols

    def constant_value(self) -> float:
        return float(self.expr)
