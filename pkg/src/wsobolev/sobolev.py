"""Weighted Sobolev operators: minimal relaxed gradient, energy, divergence, heat flow."""
from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .discretization import (GridSpace, assemble_field_rhs, assemble_load, assemble_mass,
                             assemble_stiffness, node_gradients, node_values)
from .errors import RankDeficiencyWarning, SolverError
from .fibers import DistributionField, compute_W_field

MASS_FLOOR = 1e-13
REG = 1e-12


@dataclass(eq=False)
class SobolevSolution:
    route: str
    cell_grad: np.ndarray
    mwug: np.ndarray
    energy: float
    node_grad: np.ndarray | None = None
    lip: np.ndarray | None = None
    am_norm: np.ndarray | None = None
    coeffs: np.ndarray | None = None


def _node_projectors(F: DistributionField) -> np.ndarray:
    return F.projectors()[F.space.node_cell]


def minimal_relaxed_gradient(space: GridSpace, coeffs, W: DistributionField | None = None,
                             eps: float | None = None) -> SobolevSolution:
    """Relaxation route: remove the null-gradient part of the discrete gradient."""
    W = compute_W_field(space, eps) if W is None else W
    g = node_gradients(space, coeffs)
    g = g - np.einsum("qij,qj->qi", _node_projectors(W), g)
    cell = space.cell_average(g)
    energy = 0.5 * float(np.sum(space.node_w * np.einsum("qi,qi->q", g, g)))
    return SobolevSolution("relaxation", cell, np.linalg.norm(cell, axis=1), energy, g,
                           coeffs=np.asarray(coeffs, float))


def cheeger_energy(space: GridSpace, coeffs, W: DistributionField | None = None,
                   eps: float | None = None) -> float:
    return minimal_relaxed_gradient(space, coeffs, W, eps).energy


def mwug_via_projection(T: DistributionField, V: DistributionField, f) -> SobolevSolution:
    """Projection route for a closed form f: project grad f onto V, then onto T."""
    space = T.space
    grad = f.gradient(space.node_user)
    am = np.einsum("qij,qj->qi", _node_projectors(V), grad)
    g = np.einsum("qij,qj->qi", _node_projectors(T), am)
    cell = space.cell_average(g)
    lip = space.cell_average(np.linalg.norm(grad, axis=1))
    am_norm = np.linalg.norm(space.cell_average(am), axis=1)
    energy = 0.5 * float(np.sum(space.node_w * np.einsum("qi,qi->q", g, g)))
    return SobolevSolution("projection", cell, np.linalg.norm(cell, axis=1), energy, g, lip, am_norm)


def _regularized_solve(A: sp.spmatrix, rhs: np.ndarray, reg: float = REG) -> np.ndarray:
    """Solve A x = rhs for symmetric semidefinite A; inconsistent parts blow up the residual."""
    A = A.tocsc()
    d = A.diagonal()
    D = sp.diags(np.where(d > 0, d, d.max() if d.size else 1.0))
    try:
        lu = spla.splu((A + reg * D).tocsc())
    except RuntimeError as exc:
        raise SolverError(str(exc)) from None
    x = lu.solve(rhs)
    if not np.all(np.isfinite(x)):
        raise SolverError("non-finite solution")
    return x


def _active_mass(space: GridSpace, M: sp.spmatrix) -> np.ndarray:
    diag = M.diagonal()
    active = diag >= MASS_FLOOR * diag.max()
    if not active.all():
        warnings.warn(f"pruned {int((~active).sum())} dofs with negligible mass", RankDeficiencyWarning,
                      stacklevel=3)
    return active


@dataclass(eq=False)
class DivergenceResult:
    accepted: bool
    divergence: np.ndarray
    residual: float
    resolution: float
    reason: str = ""


def _as_node_field(space: GridSpace, w) -> np.ndarray:
    w = np.asarray(w, float)
    if w.shape == (space.n_cells, space.ndim):
        return w[space.node_cell]
    if w.shape == (len(space.node_w), space.ndim):
        return w
    raise ValueError(f"vector field must have shape (cells, n) or (nodes, n), got {w.shape}")


def check_divergence(space: GridSpace, w, tol: float = 1e-6, resolution_bound: float = 1.0,
                     M: sp.spmatrix | None = None) -> DivergenceResult:
    """Weak divergence d with integral(phi d) = -integral(grad phi . w) for interior test functions.

    Accepted when the least-squares residual on interior dofs is within ``tol``
    (relative to the full load vector) and h |d| <= resolution_bound |w| in L^2(mu), i.e. the divergence
    is resolved at the grid scale.
    """
    wq = _as_node_field(space, w)
    M = assemble_mass(space) if M is None else M
    b = assemble_field_rhs(space, wq)
    active = _active_mass(space, M)
    d = np.zeros(space.n_dofs)
    Ma = M[active][:, active]
    d[active] = _regularized_solve(Ma, -b[active])
    interior = space.interior_dofs() & active
    r = (M @ d + b)[interior]
    bn = np.linalg.norm(b[active])
    residual = float(np.linalg.norm(r) / bn) if bn > 0 else 0.0
    di = np.where(interior, d, 0.0)
    dnorm = float(np.sqrt(max(di @ (M @ di), 0.0)))
    wnorm = float(np.sqrt(np.sum(space.node_w * np.einsum("qi,qi->q", wq, wq))))
    resolution = space.h * dnorm / wnorm if wnorm > 0 else 0.0
    if residual > tol:
        return DivergenceResult(False, d, residual, resolution, "residual")
    if resolution > resolution_bound:
        return DivergenceResult(False, d, residual, resolution, "unresolved")
    return DivergenceResult(True, d, residual, resolution)


def leibniz_margin(tol: float) -> int:
    """Cells needed for the boundary tail of the consistent mass inverse to fall below tol.

    Inverting the mass matrix spreads a boundary flux into the interior with
    ratio 2 - sqrt(3) per cell along each axis.
    """
    return max(1, int(np.ceil(np.log(tol) / np.log(2 - np.sqrt(3)))))


def leibniz_defect(space: GridSpace, w, g, tol: float = 1e-6,
                   M: sp.spmatrix | None = None) -> tuple[float, int]:
    """Weak-form defect of div(g w) = g div(w) + grad g . w against interior test functions.

    ``w`` is a node field with an accepted divergence, ``g`` a closed form. The
    defect is relative to the load of g w and is measured on dofs at least
    ``leibniz_margin(tol)`` cells from the box boundary. Returns the defect and
    the number of test functions used.
    """
    wq = _as_node_field(space, w)
    M = assemble_mass(space) if M is None else M
    res_w = check_divergence(space, wq, tol, M=M)
    X = space.node_user
    gv = g(X)
    gw = gv[:, None] * wq
    b = assemble_field_rhs(space, gw)
    cand = gv * node_values(space, res_w.divergence) + np.einsum("qi,qi->q", g.gradient(X), wq)
    load = assemble_load(space, cand)
    test = space.interior_dofs(leibniz_margin(tol))
    bn = np.linalg.norm(b)
    if not test.any() or bn == 0:
        return 0.0, int(test.sum())
    return float(np.linalg.norm((load + b)[test]) / bn), int(test.sum())


def laplacian(space: GridSpace, T: DistributionField, coeffs) -> np.ndarray:
    """h with M h = -G_T f, least squares over dofs with mass."""
    M = assemble_mass(space)
    GT = assemble_stiffness(space, T.projectors())
    active = _active_mass(space, M)
    rhs = -(GT @ np.asarray(coeffs, float))
    out = np.zeros(space.n_dofs)
    out[active] = _regularized_solve(M[active][:, active], rhs[active])
    return out


@dataclass(eq=False)
class HeatResult:
    coeffs: np.ndarray
    history: list = field(default_factory=list)


def heat_flow(space: GridSpace, T: DistributionField, f0, t_final: float, steps: int) -> HeatResult:
    """Implicit Euler for the weighted heat equation: (M + dt G_T) f_{k+1} = M f_k."""
    if steps < 1 or t_final <= 0:
        raise ValueError("heat flow needs steps >= 1 and t_final > 0")
    M = assemble_mass(space).tocsc()
    GT = assemble_stiffness(space, T.projectors()).tocsc()
    dt = t_final / steps
    A = (M + dt * GT).tocsc()
    d = A.diagonal()
    lu = spla.splu((A + REG * sp.diags(np.where(d > 0, d, 1.0))).tocsc())
    f = np.asarray(f0, float).copy()

    def row(k, f):
        Mf, Gf = M @ f, GT @ f
        return {"step": k, "time": k * dt, "mass": float(Mf.sum()), "energy": 0.5 * float(f @ Gf),
                "w12_norm_sq": float(f @ Mf + f @ Gf)}

    history = [row(0, f)]
    for k in range(1, steps + 1):
        rhs = M @ f
        f = lu.solve(rhs)
        res = np.linalg.norm(A @ f - rhs) / max(np.linalg.norm(rhs), 1e-300)
        if not np.isfinite(res) or res > 1e-8:
            raise SolverError(f"heat step {k} residual {res:.2e}")
        history.append(row(k, f))
    return HeatResult(f, history)


def l2_norm(space: GridSpace, node_vals) -> float:
    v = np.asarray(node_vals, float)
    return float(np.sqrt(np.sum(space.node_w * v * v)))


def l2_error(space: GridSpace, coeffs, exact) -> tuple[float, float]:
    """Absolute and relative L^2(mu) error of a discrete function against a closed form."""
    ex = exact(space.node_user)
    err = l2_norm(space, node_values(space, coeffs) - ex)
    ref = l2_norm(space, ex)
    return err, err / ref if ref > 0 else err
