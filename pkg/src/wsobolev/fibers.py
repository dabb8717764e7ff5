"""Cellwise subspace fields: null-gradient fibers, tangent fibers, registry values.

The null-gradient fiber W(c) is estimated by a penalised projection. For
each coordinate field e_j we solve

    (M / eps + G) u_j = B e_j,

which is the minimiser of |u|^2 / eps + |grad u - e_j|^2 in L^2(mu). The
cell average of grad u_j is column j of a near-projector P(c) onto W(c):
modes of the generalized problem M v = sigma G v enter with weight
1 / (1 + sigma / eps). Directions with singular value at least ``capture``
(default 1/2, i.e. sigma <= eps) form W(c); the tangent fiber is its
orthogonal complement. Dimensions are only trusted where they agree over
the last ``stability_window`` scales of a sweep.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .discretization import (GridSpace, assemble_coordinate_rhs, assemble_mass, assemble_stiffness,
                             build_space, default_eps)
from .errors import SolverError, UnstableFibersWarning
from .measure import MeasureSpec

UNSTABLE_MASS_WARN = 0.05
CAPTURE = 0.5


@dataclass(eq=False)
class DistributionField:
    """An orthonormal frame per cell; the first ``dims[c]`` columns span the subspace."""

    space: GridSpace
    frames: np.ndarray
    dims: np.ndarray
    singular_values: np.ndarray | None = None
    stable: np.ndarray | None = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.stable is None:
            self.stable = np.ones(len(self.dims), bool)

    @property
    def ndim(self) -> int:
        return self.frames.shape[1]

    def basis(self, c: int) -> np.ndarray:
        return self.frames[c][:, : self.dims[c]]

    def mask(self) -> np.ndarray:
        return np.arange(self.ndim)[None, :] < self.dims[:, None]

    def projectors(self) -> np.ndarray:
        F = self.frames * self.mask()[:, None, :]
        return np.einsum("cik,cjk->cij", F, F)

    def project(self, vectors, cells=None) -> np.ndarray:
        """Project per-cell vectors (C, n), or per-row vectors with a cell index."""
        P = self.projectors()
        P = P if cells is None else P[cells]
        return np.einsum("cij,cj->ci", P, np.asarray(vectors, float))

    def complement(self) -> "DistributionField":
        n = self.ndim
        order = (np.arange(n)[None, :] + self.dims[:, None]) % n
        frames = np.take_along_axis(self.frames, order[:, None, :], axis=2)
        return DistributionField(self.space, frames, n - self.dims, None, self.stable.copy(), dict(self.meta))

    def mass_fraction(self, mask, stable_only: bool = True) -> float:
        m = self.space.cell_mass
        base = self.stable if stable_only else np.ones_like(mask, bool)
        denom = m[base].sum()
        return float(m[base & mask].sum() / denom) if denom > 0 else 0.0

    @property
    def unstable_fraction(self) -> float:
        m = self.space.cell_mass
        return float(m[~self.stable].sum() / m.sum())


def projection_residual(F: DistributionField, vectors) -> np.ndarray:
    v = np.asarray(vectors, float)
    return np.linalg.norm(v - F.project(v), axis=1)


def project_vector_field(F: DistributionField, w) -> np.ndarray:
    return F.project(w)


def complement(F: DistributionField) -> DistributionField:
    return F.complement()


def grassmann_distance(A: np.ndarray, B: np.ndarray) -> float:
    """Hausdorff distance between the closed unit balls of span(A) and span(B).

    Equal dimensions give the sine of the largest principal angle; different
    dimensions give 1. Columns are assumed orthonormal.
    """
    A = np.asarray(A, float)
    B = np.asarray(B, float)
    ka, kb = A.shape[1], B.shape[1]
    if ka != kb:
        return 1.0
    if ka == 0:
        return 0.0
    return float(min(1.0, np.linalg.norm(B - A @ (A.T @ B), 2)))


def null_gradient_spectrum(space: GridSpace, k: int | None = None, tol: float = 1e-9):
    """Finite eigenpairs of M v = sigma G v, ascending, with v^T G v = 1.

    Modes in the kernel of G (infinite sigma) are excluded.
    """
    M = assemble_mass(space)
    G = assemble_stiffness(space)
    diam = float(np.max(space.spec.bbox_hi - space.spec.bbox_lo))
    tau = 1.0 / diam**2
    B = G + tau * M
    D = space.n_dofs
    if k is None or D <= 3000:
        theta, V = sla.eigh(M.toarray(), B.toarray() + 1e-14 * np.eye(D) * B.diagonal().max())
        if k is not None:
            theta, V = theta[: k + D], V[:, : k + D]
    else:
        theta, V = spla.eigsh(M.tocsc(), k=min(k + space.ndim + 2, D - 2), M=B.tocsc(),
                              sigma=-1e-6 * float(M.diagonal().max()), which="LM")
        order = np.argsort(theta)
        theta, V = theta[order], V[:, order]
    # kernel modes of G carry (numerically) no stiffness energy
    gv = np.einsum("ij,ij->j", V, G @ V)
    mv = np.einsum("ij,ij->j", V, M @ V)
    finite = gv > 1e-9 * (gv + tau * mv)
    V, gv, mv = V[:, finite], gv[finite], mv[finite]
    sigma = np.clip(mv / gv, 0, None)
    order = np.argsort(sigma)
    sigma, V = sigma[order], V[:, order] / np.sqrt(gv[order])
    if k is not None:
        sigma, V = sigma[:k], V[:, :k]
    if len(sigma):
        res = np.linalg.norm(M @ V - (G @ V) * sigma, axis=0)
        scale = np.linalg.norm(M @ V, axis=0) + sigma * np.linalg.norm(G @ V, axis=0) + 1e-300
        if np.any(res > tol * scale + 1e-13):
            raise SolverError(f"eigen residual {float((res / scale).max()):.2e} above {tol:g}")
    return sigma, V


def _solve_spd(A: sp.spmatrix, rhs: np.ndarray) -> np.ndarray:
    A = A.tocsc()
    reg = 1e-13 * float(A.diagonal().max())
    lu = spla.splu((A + reg * sp.identity(A.shape[0], format="csc")).tocsc())
    x = lu.solve(rhs)
    res = np.linalg.norm(A @ x - rhs) / max(np.linalg.norm(rhs), 1e-300)
    if not np.isfinite(res) or res > 1e-6:
        raise SolverError(f"linear solve residual {res:.2e}")
    return x


def capture_matrices(space: GridSpace, eps: float | None = None) -> np.ndarray:
    """Cellwise near-projectors P(c) onto the null-gradient fiber."""
    eps = default_eps(space.h) if eps is None else eps
    M = assemble_mass(space)
    G = assemble_stiffness(space)
    rhs = assemble_coordinate_rhs(space)
    U = _solve_spd(M / eps + G, rhs)
    c = U[space.elem_dofs[space.node_elem]]
    grads = np.einsum("qkj,qkl->qjl", space.dphi, c)
    return space.cell_average(grads)


def compute_W_field(space: GridSpace, eps: float | None = None, svd_tol: float = 0.05,
                    capture: float = CAPTURE) -> DistributionField:
    """Null-gradient fiber per cell from the penalised projection."""
    eps = default_eps(space.h) if eps is None else eps
    P = capture_matrices(space, eps)
    U, s, _ = np.linalg.svd(P)
    floor = max(capture, svd_tol * float(s.max(initial=0.0)))
    dims = (s >= floor).sum(axis=1)
    meta = {"eps": eps, "svd_tol": svd_tol, "capture": capture, "h": space.h}
    return DistributionField(space, U, dims, s, None, meta)


@dataclass
class SweepSchedule:
    scales: tuple
    eps_factor: float = 0.25
    svd_tol: float = 0.05
    stability_window: int = 2
    capture: float = CAPTURE

    def __post_init__(self):
        self.scales = tuple(sorted((float(h) for h in self.scales), reverse=True))
        if not self.scales:
            raise ValueError("a sweep needs at least one scale")
        self.stability_window = max(1, min(self.stability_window, len(self.scales)))

    def eps(self, h: float) -> float:
        return self.eps_factor * h * h


@dataclass(eq=False)
class SweepLevel:
    space: GridSpace
    W: DistributionField


def sweep(spec: MeasureSpec, schedule: SweepSchedule) -> list[SweepLevel]:
    levels = []
    for h in schedule.scales:
        space = build_space(spec, h)
        levels.append(SweepLevel(space, compute_W_field(space, schedule.eps(h), schedule.svd_tol,
                                                        schedule.capture)))
    return levels


def _lookup_dims(level: SweepLevel, points: np.ndarray) -> np.ndarray:
    """Fiber dimension of the level's cell containing each point, -1 if inactive."""
    space = level.space
    k = np.floor((points + space.jitter - space.grid.origin) / space.h).astype(np.int64)
    shape = tuple(int(s) + 2 for s in space.grid.kmax)
    inside = np.all((k >= -1) & (k <= space.grid.kmax), axis=1)
    flat = np.full(len(points), -1, np.int64)
    flat[inside] = np.ravel_multi_index(tuple((k[inside] + 1).T), shape)
    own = np.ravel_multi_index(tuple((space.cells + 1).T), shape)
    order = np.argsort(own)
    pos = np.clip(np.searchsorted(own[order], flat), 0, len(own) - 1)
    hit = inside & (own[order][pos] == flat)
    out = np.full(len(points), -1, np.int64)
    out[hit] = level.W.dims[order[pos[hit]]]
    return out


def tangent_from_sweep(levels: list[SweepLevel], upto: int | None = None, window: int = 2,
                       warn: bool = True) -> DistributionField:
    """Tangent field on the finest level used, with stability flags."""
    upto = len(levels) if upto is None else upto
    used = levels[:upto]
    fine = used[-1]
    pts = fine.space.cell_bary
    dims = np.stack([_lookup_dims(lv, pts) for lv in used], axis=1)
    w = max(1, min(window, len(used)))
    tail = dims[:, -w:]
    stable = np.all(tail == tail[:, -1:], axis=1) & np.all(tail >= 0, axis=1)
    T = fine.W.complement()
    T.stable = stable
    T.singular_values = fine.W.singular_values
    T.meta.update(fine.W.meta)
    T.meta["scales"] = [lv.space.h for lv in used]
    T.meta["window"] = w
    T.meta["w_dims_by_scale"] = dims
    frac = T.unstable_fraction
    T.meta["unstable_mass_fraction"] = frac
    if warn and frac > UNSTABLE_MASS_WARN:
        warnings.warn(f"{frac:.1%} of the mass sits in cells with unsettled fiber dimension",
                      UnstableFibersWarning, stacklevel=2)
    return T


def compute_tangent_field(spec: MeasureSpec, schedule: SweepSchedule) -> DistributionField:
    levels = sweep(spec, schedule)
    return tangent_from_sweep(levels, window=schedule.stability_window)


def am_distribution(space: GridSpace) -> DistributionField:
    """Registry value of the decomposability bundle, as a span union per cell."""
    n = space.ndim
    S = np.zeros((space.n_cells, n, n))
    for j, stratum in enumerate(space.spec.strata):
        V = stratum.am_basis()
        if V.shape[1] == 0:
            continue
        P = V @ V.T
        S += space.cell_stratum_mass[:, j, None, None] * P[None]
    S /= space.cell_mass[:, None, None]
    vals, vecs = np.linalg.eigh(S)
    vals, vecs = vals[:, ::-1], vecs[:, :, ::-1]
    dims = (vals > 1e-9).sum(axis=1)
    return DistributionField(space, vecs, dims, None, None, {"source": "registry"})
