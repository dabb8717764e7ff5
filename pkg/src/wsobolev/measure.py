"""Stratified Radon measures on R^n with exact cell masses and cell quadrature.

A measure is a finite sum of strata. Each stratum knows how to integrate
polynomials of low degree over the intersection of its support with an
axis-aligned box, and how to split itself into per-cell pieces on a uniform
grid. Cantor strata additionally tag each piece with the index of the
resolved cluster it belongs to, so that the discretization can give
clusters separated by wide gaps their own degrees of freedom.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from itertools import combinations
from pathlib import Path

import numpy as np
import tomli
from numpy.polynomial.legendre import leggauss
from scipy.spatial import Delaunay, QhullError
from scipy.special import roots_jacobi

from .errors import SpecSyntaxError, UnsupportedStratumError, ValidationError
from .expressions import ClosedForm

MAX_CLUSTERS = 1 << 20
_GAUSS_BOX = 3
_GAUSS_LINE = 4


# ----------------------------------------------------------------------------
# quadrature helpers

def _gauss01(m: int) -> tuple[np.ndarray, np.ndarray]:
    x, w = leggauss(m)
    return (x + 1) / 2, w / 2


def simplex_rule(k: int, m: int = 3) -> tuple[np.ndarray, np.ndarray]:
    """Collapsed-coordinate (conical product) rule on the unit k-simplex.

    Exact for total degree 2m-1. Weights are positive and sum to 1/k!.
    """
    if k == 0:
        return np.zeros((1, 0)), np.ones(1)
    axes, wts = [], []
    for i in range(k):
        alpha = k - 1 - i
        xi, wi = roots_jacobi(m, alpha, 0)
        axes.append((xi + 1) / 2)
        wts.append(wi / 2 ** (alpha + 1))
    grids = np.meshgrid(*axes, indexing="ij")
    u = np.stack([g.ravel() for g in grids], axis=1)
    w = np.ones(len(u))
    for i, wi in enumerate(np.meshgrid(*wts, indexing="ij")):
        w = w * wi.ravel()
    lam = np.empty_like(u)
    scale = np.ones(len(u))
    for i in range(k):
        lam[:, i] = u[:, i] * scale
        scale = scale * (1 - u[:, i])
    return lam, w


# ----------------------------------------------------------------------------
# grids and piece sets

@dataclass(frozen=True, eq=False)
class Grid:
    """Uniform grid: cell k covers [origin + k h, origin + (k+1) h) per axis."""

    origin: np.ndarray
    h: float
    kmin: np.ndarray
    kmax: np.ndarray
    gap_floor: float = 0.0

    @property
    def ndim(self) -> int:
        return len(self.origin)

    def sub(self, axes) -> "Grid":
        axes = np.asarray(axes, dtype=int)
        return Grid(self.origin[axes], self.h, self.kmin[axes], self.kmax[axes], self.gap_floor)

    def locate(self, x) -> np.ndarray:
        return np.floor((np.asarray(x, dtype=float) - self.origin) / self.h).astype(np.int64)

    def cell_lo(self, k) -> np.ndarray:
        return self.origin + np.asarray(k) * self.h


@dataclass(eq=False)
class PieceSet:
    """Per-cell pieces of one stratum.

    ``nodes`` has shape (P, q, n) and ``weights`` (P, q); labels are 0 for
    pieces that join the ordinary continuous sheet and positive for
    pieces of a separately resolved cluster.
    """

    cells: np.ndarray
    labels: np.ndarray
    nodes: np.ndarray
    weights: np.ndarray

    @classmethod
    def empty(cls, n: int, q: int = 1) -> "PieceSet":
        return cls(np.zeros((0, n), np.int64), np.zeros(0, np.int64), np.zeros((0, q, n)), np.zeros((0, q)))

    def __len__(self) -> int:
        return len(self.cells)

    @property
    def masses(self) -> np.ndarray:
        return self.weights.sum(axis=1)

    def pruned(self) -> "PieceSet":
        keep = self.masses > 0
        return PieceSet(self.cells[keep], self.labels[keep], self.nodes[keep], self.weights[keep])

    def reorder_axes(self, order) -> "PieceSet":
        return PieceSet(self.cells[:, order], self.labels, self.nodes[..., order], self.weights)


def tensor_pieces(a: PieceSet, b: PieceSet) -> PieceSet:
    """Pieces of a product measure from the pieces of its two factors."""
    pa, qa, na = a.nodes.shape
    pb, qb, nb = b.nodes.shape
    cells = np.concatenate([np.repeat(a.cells, pb, axis=0), np.tile(b.cells, (pa, 1))], axis=1)
    kb = int(b.labels.max()) + 1 if pb else 1
    labels = np.repeat(a.labels, pb) * kb + np.tile(b.labels, pa)
    nodes = np.empty((pa, pb, qa, qb, na + nb))
    nodes[..., :na] = a.nodes[:, None, :, None, :]
    nodes[..., na:] = b.nodes[None, :, None, :, :]
    weights = a.weights[:, None, :, None] * b.weights[None, :, None, :]
    return PieceSet(cells, labels, nodes.reshape(pa * pb, qa * qb, na + nb), weights.reshape(pa * pb, qa * qb))


def _lebesgue_axis(lo: float, hi: float, grid: Grid) -> PieceSet:
    """Gauss pieces of Lebesgue measure on [lo, hi] cut along the grid of one axis."""
    k0, k1 = int(grid.locate([lo])[0]), int(grid.locate([hi])[0])
    ks = np.arange(k0, k1 + 1)
    a = np.maximum(lo, grid.origin[0] + ks * grid.h)
    b = np.minimum(hi, grid.origin[0] + (ks + 1) * grid.h)
    x, w = _gauss01(_GAUSS_BOX)
    length = np.clip(b - a, 0, None)
    nodes = (a[:, None] + length[:, None] * x[None, :])[..., None]
    return PieceSet(ks[:, None], np.zeros(len(ks), np.int64), nodes, length[:, None] * w[None, :]).pruned()


class Density:
    """Polynomial density pulled back through an affine map of the ambient space."""

    def __init__(self, text: str, ndim: int, A=None, t=None):
        self.text = str(text)
        self.form = ClosedForm(self.text, ndim)
        self.A = np.eye(ndim) if A is None else np.asarray(A, float)
        self.t = np.zeros(ndim) if t is None else np.asarray(t, float)

    def __call__(self, x) -> np.ndarray:
        x = np.asarray(x, float)
        return self.form(x @ self.A.T + self.t)

    def pulled_back(self, A2, t2) -> "Density":
        return Density(self.text, self.form.ndim, self.A @ A2, self.A @ t2 + self.t)

    @property
    def is_constant(self) -> bool:
        return self.form.is_constant


def _perm_pullback(perm, shift):
    """Affine map taking new coordinates back to old ones for x_new = x_old[perm] + shift."""
    n = len(perm)
    P = np.zeros((n, n))
    P[np.arange(n), perm] = 1.0
    return P.T, -P.T @ shift


# ----------------------------------------------------------------------------
# strata

class Stratum:
    """Base class. Subclasses implement integration against boxes and grids."""

    kind = "stratum"
    dim = 0
    ambient_dim = 1

    def total_mass(self) -> float:
        lo, hi = self.support_box()
        return self.mass_in_box(lo - 1.0, hi + 1.0)

    def mass_in_box(self, lo, hi) -> float:
        raise NotImplementedError

    def pieces(self, grid: Grid) -> PieceSet:
        raise NotImplementedError

    def support_box(self) -> tuple[np.ndarray, np.ndarray]:
        raise NotImplementedError

    def hyperplanes(self) -> list[tuple[int, float]]:
        """Coordinate hyperplanes {x_j = c} that contain the whole support."""
        return []

    def transformed(self, perm, shift) -> "Stratum":
        raise NotImplementedError

    def am_basis(self) -> np.ndarray:
        raise UnsupportedStratumError(f"no decomposability bundle registered for {self.kind}")

    def lebesgue_label(self) -> tuple[str, str]:
        raise NotImplementedError

    def truncation_error(self) -> float:
        return 0.0

    def bump(self, x) -> np.ndarray:
        """Smooth nonnegative weight vanishing on the relative boundary of the support."""
        return np.ones(np.asarray(x).shape[:-1])

    def describe(self) -> str:
        return f"{self.kind}(dim={self.dim})"


class AcDensity(Stratum):
    """Polynomial density on an axis-aligned box of full dimension."""

    kind = "ac_density"

    def __init__(self, lo, hi, density: Density | str = "1"):
        self.lo = np.asarray(lo, float)
        self.hi = np.asarray(hi, float)
        self.ambient_dim = self.dim = len(self.lo)
        self.density = density if isinstance(density, Density) else Density(density, self.dim)

    def support_box(self):
        return self.lo.copy(), self.hi.copy()

    def mass_in_box(self, lo, hi) -> float:
        a = np.maximum(self.lo, lo)
        b = np.minimum(self.hi, hi)
        if np.any(b <= a):
            return 0.0
        x, w = _gauss01(_GAUSS_BOX)
        grids = np.meshgrid(*[a[j] + (b[j] - a[j]) * x for j in range(self.dim)], indexing="ij")
        pts = np.stack([g.ravel() for g in grids], axis=1)
        wt = np.ones(len(pts))
        for wj in np.meshgrid(*[w * (b[j] - a[j]) for j in range(self.dim)], indexing="ij"):
            wt = wt * wj.ravel()
        return float(np.sum(wt * self.density(pts)))

    def pieces(self, grid: Grid) -> PieceSet:
        ps = _lebesgue_axis(self.lo[0], self.hi[0], grid.sub([0]))
        for j in range(1, self.dim):
            ps = tensor_pieces(ps, _lebesgue_axis(self.lo[j], self.hi[j], grid.sub([j])))
        if not self.density.is_constant or self.density.form.constant_value() != 1.0:
            ps.weights = ps.weights * self.density(ps.nodes)
        return ps.pruned()

    def transformed(self, perm, shift):
        A, t = _perm_pullback(perm, shift)
        return AcDensity(self.lo[perm] + shift, self.hi[perm] + shift, self.density.pulled_back(A, t))

    def am_basis(self):
        return np.eye(self.ambient_dim)

    def bump(self, x):
        x = np.asarray(x, float)
        half = (self.hi - self.lo) / 2
        return np.prod(np.clip((x - self.lo) * (self.hi - x), 0, None) / half**2, axis=-1)

    def lebesgue_label(self):
        return "absolutely_continuous", "polynomial density on a full-dimensional box"

    def describe(self):
        return f"ac_density(box={self.lo.tolist()}..{self.hi.tolist()}, density={self.density.text})"


class PointMass(Stratum):
    kind = "point_mass"
    dim = 0

    def __init__(self, point, mass: float = 1.0):
        self.point = np.asarray(point, float)
        self.ambient_dim = len(self.point)
        self.mass = float(mass)

    def support_box(self):
        return self.point.copy(), self.point.copy()

    def mass_in_box(self, lo, hi) -> float:
        inside = np.all(np.asarray(lo) <= self.point) and np.all(self.point < np.asarray(hi))
        return self.mass if inside else 0.0

    def pieces(self, grid: Grid) -> PieceSet:
        k = grid.locate(self.point)[None, :]
        return PieceSet(k, np.zeros(1, np.int64), self.point[None, None, :], np.full((1, 1), self.mass))

    def hyperplanes(self):
        return [(j, float(c)) for j, c in enumerate(self.point)]

    def transformed(self, perm, shift):
        return PointMass(self.point[perm] + shift, self.mass)

    def am_basis(self):
        return np.zeros((self.ambient_dim, 0))

    def lebesgue_label(self):
        return "singular", "atom"

    def describe(self):
        return f"point_mass({self.point.tolist()}, mass={self.mass:g})"


class Simplex(Stratum):
    """k-simplex with a polynomial density against k-dimensional Hausdorff measure."""

    kind = "simplex"

    def __init__(self, vertices, density: Density | str = "1"):
        self.vertices = np.asarray(vertices, float)
        self.dim = len(self.vertices) - 1
        self.ambient_dim = self.vertices.shape[1]
        self.density = density if isinstance(density, Density) else Density(density, self.ambient_dim)
        self.edges = (self.vertices[1:] - self.vertices[0]).T
        self.jac = math.sqrt(max(np.linalg.det(self.edges.T @ self.edges), 0.0)) if self.dim else 1.0
        self.flat_axes = [j for j in range(self.ambient_dim) if np.all(self.vertices[:, j] == self.vertices[0, j])]
        self.rule = simplex_rule(self.dim)

    def support_box(self):
        return self.vertices.min(axis=0), self.vertices.max(axis=0)

    def hyperplanes(self):
        return [(j, float(self.vertices[0, j])) for j in self.flat_axes]

    def transformed(self, perm, shift):
        A, t = _perm_pullback(perm, shift)
        return Simplex(self.vertices[:, perm] + shift, self.density.pulled_back(A, t))

    def am_basis(self):
        if self.dim == 0:
            return np.zeros((self.ambient_dim, 0))
        q, _ = np.linalg.qr(self.edges)
        return q[:, : self.dim]

    def bump(self, x):
        if self.dim == 0:
            return super().bump(x)
        x = np.asarray(x, float)
        lam = np.linalg.lstsq(self.edges, (x - self.vertices[0]).reshape(-1, self.ambient_dim).T, rcond=None)[0].T
        bary = np.concatenate([1 - lam.sum(axis=1, keepdims=True), lam], axis=1)
        out = np.prod(np.clip(bary, 0, None) * (self.dim + 1), axis=1)
        return out.reshape(x.shape[:-1])

    def lebesgue_label(self):
        if self.dim == self.ambient_dim:
            return "absolutely_continuous", "full-dimensional simplex with polynomial density"
        return "singular", f"{self.dim}-dimensional simplex in R^{self.ambient_dim}"

    def describe(self):
        return f"simplex(dim={self.dim}, vertices={self.vertices.tolist()}, density={self.density.text})"

    def _flat_ok(self, lo, hi) -> bool:
        v = self.vertices[0]
        return all(lo[j] <= v[j] < hi[j] for j in self.flat_axes)

    # segments are clipped in closed form, vectorized over boxes
    def _segment_boxes(self, lo, hi):
        v0, d = self.vertices[0], self.edges[:, 0]
        t0 = np.zeros(len(lo))
        t1 = np.ones(len(lo))
        for j in range(self.ambient_dim):
            if j in self.flat_axes:
                bad = ~((lo[:, j] <= v0[j]) & (v0[j] < hi[:, j]))
                t1[bad] = -1.0
                continue
            a = (lo[:, j] - v0[j]) / d[j]
            b = (hi[:, j] - v0[j]) / d[j]
            t0 = np.maximum(t0, np.minimum(a, b))
            t1 = np.minimum(t1, np.maximum(a, b))
        span = np.clip(t1 - t0, 0, None)
        x, w = _gauss01(_GAUSS_LINE)
        t = t0[:, None] + span[:, None] * x[None, :]
        nodes = v0 + t[..., None] * d
        weights = span[:, None] * w[None, :] * self.jac
        return nodes, weights * self.density(nodes)

    def _clip_polytope(self, lo, hi):
        """Quadrature on the simplex intersected with one box (dimension >= 2)."""
        k = self.dim
        if not self._flat_ok(lo, hi):
            return np.zeros((0, self.ambient_dim)), np.zeros(0)
        v0, E = self.vertices[0], self.edges
        rows = [-np.eye(k), np.ones((1, k))]
        rhs = [np.zeros(k), np.ones(1)]
        for j in range(self.ambient_dim):
            if j in self.flat_axes:
                continue
            rows += [E[j][None, :], -E[j][None, :]]
            rhs += [np.array([hi[j] - v0[j]]), np.array([v0[j] - lo[j]])]
        C, d = np.vstack(rows), np.concatenate(rhs)
        scale = 1e-11 * (1 + np.abs(d).max())
        verts = []
        for combo in combinations(range(len(C)), k):
            sub = C[list(combo)]
            if abs(np.linalg.det(sub)) < 1e-14:
                continue
            lam = np.linalg.solve(sub, d[list(combo)])
            if np.all(C @ lam <= d + scale):
                verts.append(lam)
        if len(verts) < k + 1:
            return np.zeros((0, self.ambient_dim)), np.zeros(0)
        verts = np.unique(np.round(np.array(verts), 13), axis=0)
        if len(verts) < k + 1:
            return np.zeros((0, self.ambient_dim)), np.zeros(0)
        try:
            tri = Delaunay(verts)
        except QhullError:
            return np.zeros((0, self.ambient_dim)), np.zeros(0)
        ref_x, ref_w = self.rule
        nodes, weights = [], []
        for simp in tri.simplices:
            L = verts[simp]
            J = L[1:] - L[0]
            vol = abs(np.linalg.det(J))
            lam = L[0] + ref_x @ J
            nodes.append(v0 + lam @ E.T)
            weights.append(ref_w * vol * self.jac)
        nodes = np.vstack(nodes)
        weights = np.concatenate(weights)
        return nodes, weights * self.density(nodes)

    def mass_in_box(self, lo, hi) -> float:
        lo, hi = np.asarray(lo, float), np.asarray(hi, float)
        if self.dim == 0:
            return float(self.density(self.vertices[:1])[0]) if self._flat_ok(lo, hi) else 0.0
        if self.dim == 1:
            _, w = self._segment_boxes(lo[None], hi[None])
            return float(w.sum())
        _, w = self._clip_polytope(lo, hi)
        return float(w.sum())

    def pieces(self, grid: Grid) -> PieceSet:
        n = self.ambient_dim
        if self.dim == 0:
            p = self.vertices[0]
            return PieceSet(grid.locate(p)[None], np.zeros(1, np.int64), p[None, None], self.density(p[None])[None])
        slo, shi = self.support_box()
        k0, k1 = grid.locate(slo), grid.locate(shi)
        rng = [np.arange(a, b + 1) for a, b in zip(k0, k1)]
        cells = np.stack([g.ravel() for g in np.meshgrid(*rng, indexing="ij")], axis=1)
        lo = grid.origin + cells * grid.h
        hi = lo + grid.h
        if self.dim == 1:
            nodes, weights = self._segment_boxes(lo, hi)
            return PieceSet(cells, np.zeros(len(cells), np.int64), nodes, weights).pruned()
        if self.dim == n:
            # cells whose corners all lie inside the simplex use the tensor rule
            Einv = np.linalg.inv(self.edges)
            corners = np.array(np.meshgrid(*[[0, 1]] * n, indexing="ij")).reshape(n, -1).T
            lam = ((lo[:, None, :] + corners[None] * grid.h) - self.vertices[0]) @ Einv.T
            full = np.all((lam >= -1e-14) & (lam.sum(-1, keepdims=True) <= 1 + 1e-14), axis=(1, 2))
        else:
            full = np.zeros(len(cells), bool)
        out = []
        if full.any():
            x, w = _gauss01(_GAUSS_BOX)
            ref = np.stack([g.ravel() for g in np.meshgrid(*[x] * n, indexing="ij")], axis=1)
            rw = np.ones(len(ref))
            for wj in np.meshgrid(*[w] * n, indexing="ij"):
                rw = rw * wj.ravel()
            nodes = lo[full][:, None, :] + grid.h * ref[None]
            weights = rw[None] * grid.h**n * self.density(nodes)
            out.append(PieceSet(cells[full], np.zeros(int(full.sum()), np.int64), nodes, weights))
        partial_nodes, partial_w, partial_cells = [], [], []
        for i in np.flatnonzero(~full):
            nd, wt = self._clip_polytope(lo[i], hi[i])
            if len(wt):
                partial_nodes.append(nd)
                partial_w.append(wt)
                partial_cells.append(cells[i])
        if partial_cells:
            q = max(len(w) for w in partial_w)
            nodes = np.zeros((len(partial_cells), q, n))
            weights = np.zeros((len(partial_cells), q))
            for i, (nd, wt) in enumerate(zip(partial_nodes, partial_w)):
                nodes[i, : len(wt)] = nd
                nodes[i, len(wt):] = nd[0]
                weights[i, : len(wt)] = wt
            out.append(PieceSet(np.array(partial_cells), np.zeros(len(partial_cells), np.int64), nodes, weights))
        if not out:
            return PieceSet.empty(n)
        if len(out) == 1:
            return out[0].pruned()
        # pad to a common node count
        q = max(p.nodes.shape[1] for p in out)
        padded = []
        for p in out:
            extra = q - p.nodes.shape[1]
            nodes = np.concatenate([p.nodes, np.repeat(p.nodes[:, :1], extra, axis=1)], axis=1)
            weights = np.concatenate([p.weights, np.zeros((len(p), extra))], axis=1)
            padded.append(PieceSet(p.cells, p.labels, nodes, weights))
        return PieceSet(
            np.vstack([p.cells for p in padded]), np.concatenate([p.labels for p in padded]),
            np.vstack([p.nodes for p in padded]), np.vstack([p.weights for p in padded]),
        ).pruned()


class Cantor(Stratum):
    """Symmetric Cantor-type measure on an interval of one coordinate axis.

    ``ternary``: middle-thirds construction, normalised to the given weight.
    ``svc``: Smith-Volterra-Cantor set, Lebesgue measure (times weight) on the
    generation-G set where a middle gap of length |I| 4^-g is removed at step g.
    ``ratio``: self-similar construction keeping two copies scaled by ``ratio``.
    """

    kind = "cantor"

    def __init__(self, variant: str, interval, axis: int = 0, generations: int = 30,
                 ambient_dim: int = 1, base=None, weight: float = 1.0, ratio: float | None = None):
        self.variant = variant
        self.a, self.b = map(float, interval)
        self.axis = int(axis)
        self.G = int(generations)
        self.ambient_dim = int(ambient_dim)
        self.base = np.zeros(self.ambient_dim) if base is None else np.asarray(base, float).copy()
        self.base[self.axis] = self.a
        self.weight = float(weight)
        self.ratio = ratio
        self.dim = 1 if variant == "svc" else 0
        L = self.b - self.a
        ell = [L]
        for g in range(1, self.G + 1):
            if variant == "ternary":
                ell.append(L * 3.0**-g)
            elif variant == "svc":
                ell.append((ell[-1] - L * 4.0**-g) / 2)
            elif variant == "ratio":
                ell.append(L * float(ratio) ** g)
            else:
                raise ValidationError(f"unknown cantor variant {variant!r}")
        self.lengths = np.array(ell)
        self.gaps = np.r_[np.inf, self.lengths[:-1] - 2 * self.lengths[1:]]
        total = self.weight * (2**self.G * self.lengths[-1] if variant == "svc" else 1.0)
        self.total = total
        self.mass_g = total / 2.0 ** np.arange(self.G + 1)
        self.dens_G = total / (2**self.G * self.lengths[-1])
        var = np.empty(self.G + 1)
        var[-1] = self.lengths[-1] ** 2 / 12
        for g in range(self.G - 1, -1, -1):
            var[g] = var[g + 1] + ((self.lengths[g] - self.lengths[g + 1]) / 2) ** 2
        self.var_g = var

    def total_mass(self) -> float:
        return self.total

    def support_box(self):
        lo = self.base.copy()
        hi = self.base.copy()
        hi[self.axis] = self.b
        return lo, hi

    def hyperplanes(self):
        return [(j, float(self.base[j])) for j in range(self.ambient_dim) if j != self.axis]

    def transformed(self, perm, shift):
        inv = np.argsort(perm)
        new_axis = int(inv[self.axis])
        base = self.base[perm] + shift
        s = shift[new_axis]
        return Cantor(self.variant, (self.a + s, self.b + s), new_axis, self.G, self.ambient_dim,
                      base, self.weight, self.ratio)

    def am_basis(self):
        n = self.ambient_dim
        if self.variant == "svc":
            e = np.zeros((n, 1))
            e[self.axis, 0] = 1.0
            return e
        if self.variant == "ternary":
            return np.zeros((n, 0))
        raise UnsupportedStratumError(f"no decomposability bundle registered for cantor variant {self.variant!r}")

    def bump(self, x):
        t = np.asarray(x, float)[..., self.axis]
        half = (self.b - self.a) / 2
        return np.clip((t - self.a) * (self.b - t), 0, None) / half**2

    def lebesgue_label(self):
        if self.variant == "svc" and self.ambient_dim == 1:
            return "absolutely_continuous", "restriction of Lebesgue measure to a set of positive length"
        if self.variant == "svc":
            return "singular", "positive-length set on a line in higher dimension"
        return "singular", "supported on a Lebesgue-null Cantor set"

    def truncation_error(self) -> float:
        if self.variant == "svc":
            return self.weight * (self.b - self.a) * 2.0 ** (-self.G - 1)
        return 2 * self.mass_g[-1]

    def describe(self):
        return f"cantor({self.variant}, [{self.a:g}, {self.b:g}], axis={self.axis + 1}, G={self.G})"

    def lefts(self, g: int) -> np.ndarray:
        x = np.array([self.a])
        for j in range(1, g + 1):
            x = (x[:, None] + np.array([0.0, self.lengths[j - 1] - self.lengths[j]])).ravel()
        return x

    def partial_moments(self, p: float, q: float, ref: float, g0: int = 0, x0: float | None = None):
        """Mass and raw first/second moments about ``ref`` of the restriction to [p, q)."""
        stack = [(g0, self.a if x0 is None else x0)]
        m = s1 = s2 = 0.0
        while stack:
            g, x = stack.pop()
            ell = self.lengths[g]
            lo, hi = max(x, p), min(x + ell, q)
            if hi <= lo:
                continue
            if p <= x and x + ell <= q:
                c = x + ell / 2 - ref
                mg = self.mass_g[g]
                m += mg
                s1 += mg * c
                s2 += mg * (self.var_g[g] + c * c)
            elif g == self.G:
                d = self.dens_G * (hi - lo)
                c = (lo + hi) / 2 - ref
                m += d
                s1 += d * c
                s2 += d * ((hi - lo) ** 2 / 12 + c * c)
            else:
                stack.append((g + 1, x))
                stack.append((g + 1, x + ell - self.lengths[g + 1]))
        return m, s1, s2

    def mass_in_box(self, lo, hi) -> float:
        lo, hi = np.asarray(lo, float), np.asarray(hi, float)
        for j in range(self.ambient_dim):
            if j != self.axis and not (lo[j] <= self.base[j] < hi[j]):
                return 0.0
        return self.partial_moments(lo[self.axis], hi[self.axis], 0.0)[0]

    def resolved_generation(self, gap_floor: float) -> int:
        g = 0
        while g < self.G and self.gaps[g + 1] >= gap_floor and 2 ** (g + 1) <= MAX_CLUSTERS:
            g += 1
        return g

    def pieces(self, grid: Grid) -> PieceSet:
        g1 = grid.sub([self.axis])
        o, h = g1.origin[0], g1.h
        g = self.resolved_generation(grid.gap_floor)
        X = self.lefts(g)
        ell = self.lengths[g]
        k0 = np.floor((X - o) / h).astype(np.int64)
        k1 = np.ceil((X + ell - o) / h).astype(np.int64) - 1
        k1 = np.maximum(k0, k1)
        inside = k0 == k1
        cells = [k0[inside]]
        labels = [np.flatnonzero(inside) + 1]
        mass = [np.full(int(inside.sum()), self.mass_g[g])]
        mean = [X[inside] + ell / 2]
        var = [np.full(int(inside.sum()), self.var_g[g])]
        sc, sl, sm, smu, sv = [], [], [], [], []
        for i in np.flatnonzero(~inside):
            for k in range(k0[i], k1[i] + 1):
                lo = o + k * h
                m, s1, s2 = self.partial_moments(max(X[i], lo), min(X[i] + ell, lo + h), lo, g, X[i])
                if m <= 0:
                    continue
                mu = s1 / m
                sc.append(k)
                sl.append(i + 1)
                sm.append(m)
                smu.append(lo + mu)
                sv.append(max(s2 / m - mu * mu, 0.0))
        cells.append(np.array(sc, np.int64))
        labels.append(np.array(sl, np.int64))
        mass.append(np.array(sm))
        mean.append(np.array(smu))
        var.append(np.array(sv))
        cells, labels = np.concatenate(cells), np.concatenate(labels)
        mass, mean, sd = np.concatenate(mass), np.concatenate(mean), np.sqrt(np.concatenate(var))
        n = self.ambient_dim
        nodes = np.repeat(self.base[None, None, :], len(cells), axis=0).repeat(2, axis=1)
        nodes[:, 0, self.axis] = mean - sd
        nodes[:, 1, self.axis] = mean + sd
        full_cells = np.repeat(grid.locate(self.base)[None], len(cells), axis=0)
        full_cells[:, self.axis] = cells
        weights = np.repeat(mass[:, None] / 2, 2, axis=1)
        if n == 1:
            full_cells = cells[:, None]
        return PieceSet(full_cells, labels, nodes, weights).pruned()


class Product(Stratum):
    """Product of two strata living on complementary coordinate blocks."""

    kind = "product"

    def __init__(self, left: Stratum, right: Stratum, axes_left=None, axes_right=None):
        self.left, self.right = left, right
        na, nb = left.ambient_dim, right.ambient_dim
        self.ambient_dim = na + nb
        self.dim = left.dim + right.dim
        self.axes_left = np.arange(na) if axes_left is None else np.asarray(axes_left, int)
        self.axes_right = np.arange(na, na + nb) if axes_right is None else np.asarray(axes_right, int)
        self._order = np.argsort(np.concatenate([self.axes_left, self.axes_right]))

    def _split(self, x):
        x = np.asarray(x, float)
        return x[..., self.axes_left], x[..., self.axes_right]

    def _join(self, a, b):
        return np.concatenate([a, b], axis=-1)[..., self._order]

    def total_mass(self) -> float:
        return self.left.total_mass() * self.right.total_mass()

    def support_box(self):
        la, ha = self.left.support_box()
        lb, hb = self.right.support_box()
        return self._join(la, lb), self._join(ha, hb)

    def hyperplanes(self):
        return [(int(self.axes_left[j]), c) for j, c in self.left.hyperplanes()] + \
               [(int(self.axes_right[j]), c) for j, c in self.right.hyperplanes()]

    def mass_in_box(self, lo, hi) -> float:
        la, lb = self._split(lo)
        ha, hb = self._split(hi)
        return self.left.mass_in_box(la, ha) * self.right.mass_in_box(lb, hb)

    def pieces(self, grid: Grid) -> PieceSet:
        pa = self.left.pieces(grid.sub(self.axes_left))
        pb = self.right.pieces(grid.sub(self.axes_right))
        return tensor_pieces(pa, pb).reorder_axes(self._order).pruned()

    def transformed(self, perm, shift):
        inv = np.argsort(perm)
        al, ar = inv[self.axes_left], inv[self.axes_right]
        left = self.left.transformed(np.arange(len(al)), shift[al])
        right = self.right.transformed(np.arange(len(ar)), shift[ar])
        return Product(left, right, al, ar)

    def am_basis(self):
        A, B = self.left.am_basis(), self.right.am_basis()
        out = np.zeros((self.ambient_dim, A.shape[1] + B.shape[1]))
        out[self.axes_left, : A.shape[1]] = A
        out[self.axes_right, A.shape[1]:] = B
        return out

    def bump(self, x):
        xa, xb = self._split(x)
        return self.left.bump(xa) * self.right.bump(xb)

    def lebesgue_label(self):
        la, _ = self.left.lebesgue_label()
        lb, _ = self.right.lebesgue_label()
        if la == lb == "absolutely_continuous":
            return "absolutely_continuous", "product of absolutely continuous factors"
        return "singular", "product with a singular factor"

    def truncation_error(self) -> float:
        return self.left.truncation_error() * self.right.total_mass() + \
               self.right.truncation_error() * self.left.total_mass()

    def describe(self):
        return f"{self.left.describe()} x {self.right.describe()}"


# ----------------------------------------------------------------------------
# measure specifications

@dataclass(frozen=True, eq=False)
class MeasureSpec:
    ambient_dim: int
    strata: tuple
    bbox_lo: np.ndarray
    bbox_hi: np.ndarray
    name: str = "measure"

    def total_mass(self) -> float:
        return float(sum(s.total_mass() for s in self.strata))

    def hyperplanes(self) -> list[tuple[int, float]]:
        return [hp for s in self.strata for hp in s.hyperplanes()]

    def transformed(self, perm=None, shift=None) -> "MeasureSpec":
        """Image under x -> x[perm] + shift."""
        n = self.ambient_dim
        perm = np.arange(n) if perm is None else np.asarray(perm, int)
        shift = np.zeros(n) if shift is None else np.asarray(shift, float)
        return MeasureSpec(n, tuple(s.transformed(perm, shift) for s in self.strata),
                           self.bbox_lo[perm] + shift, self.bbox_hi[perm] + shift, self.name)

    def describe(self) -> str:
        return "; ".join(s.describe() for s in self.strata)


def cell_mass(spec: MeasureSpec, lo, hi) -> float:
    """Exact mass of the half-open box [lo, hi)."""
    return float(sum(s.mass_in_box(np.asarray(lo, float), np.asarray(hi, float)) for s in spec.strata))


def lebesgue_labels(spec: MeasureSpec) -> list[tuple[str, str]]:
    out = []
    for s in spec.strata:
        label, why = s.lebesgue_label()
        if s.ambient_dim != spec.ambient_dim:
            label, why = "singular", why
        out.append((label, why))
    return out


def product_spec(a: MeasureSpec, b: MeasureSpec, name: str | None = None) -> MeasureSpec:
    strata = tuple(Product(sa, sb) for sa in a.strata for sb in b.strata)
    return MeasureSpec(a.ambient_dim + b.ambient_dim, strata,
                       np.concatenate([a.bbox_lo, b.bbox_lo]), np.concatenate([a.bbox_hi, b.bbox_hi]),
                       name or f"{a.name}x{b.name}")


# ----------------------------------------------------------------------------
# parsing and validation

def _as_float_array(value, what: str, shape=None) -> np.ndarray:
    try:
        arr = np.asarray(value, dtype=float)
    except (TypeError, ValueError):
        raise ValidationError(f"{what} must be numeric, got {value!r}") from None
    if shape is not None and arr.shape != shape:
        raise ValidationError(f"{what} must have shape {shape}, got {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValidationError(f"{what} must be finite")
    return arr


def _check_polynomial_density(density: Density, lo, hi) -> None:
    deg = density.form.polynomial_degree()
    if deg is None or deg > 2:
        raise ValidationError(f"density {density.text!r} must be a polynomial of degree at most 2")
    n = len(lo)
    ts = np.linspace(0, 1, 9)
    pts = np.stack([g.ravel() for g in np.meshgrid(*[lo[j] + (hi[j] - lo[j]) * ts for j in range(n)],
                                                    indexing="ij")], axis=1)
    if np.any(density(pts) < -1e-12):
        raise ValidationError(f"density {density.text!r} is negative on its support")


def _build_stratum(entry: dict, n: int, bbox) -> Stratum:
    kind = entry.get("kind")
    density_text = str(entry.get("density", "1"))
    if kind == "ac_density":
        if int(entry.get("dim", n)) != n:
            raise ValidationError("ac_density strata must have dim equal to ambient_dim")
        box = entry.get("box")
        lo, hi = (bbox if box is None else (_as_float_array(box[0], "box lo", (n,)), _as_float_array(box[1], "box hi", (n,))))
        if np.any(hi <= lo):
            raise ValidationError("ac_density box must have positive extent on every axis")
        s = AcDensity(lo, hi, Density(density_text, n))
        _check_polynomial_density(s.density, lo, hi)
        return s
    if kind == "simplex":
        verts = _as_float_array(entry.get("vertices"), "vertices")
        if verts.ndim != 2 or verts.shape[1] != n:
            raise ValidationError(f"simplex vertices must be a list of {n}-vectors")
        k = int(entry.get("dim", len(verts) - 1))
        if len(verts) != k + 1:
            raise ValidationError(f"a {k}-simplex needs {k + 1} vertices, got {len(verts)}")
        if k > n:
            raise ValidationError("simplex dimension exceeds ambient dimension")
        if k and np.linalg.matrix_rank(verts[1:] - verts[0], tol=1e-12) < k:
            raise ValidationError("simplex vertices are affinely dependent")
        s = Simplex(verts, Density(density_text, n))
        deg = s.density.form.polynomial_degree()
        if deg is None or deg > 2:
            raise ValidationError(f"density {density_text!r} must be a polynomial of degree at most 2")
        lam, _ = simplex_rule(k, 4)
        pts = np.vstack([verts, verts[0] + lam @ s.edges.T]) if k else verts
        if np.any(s.density(pts) < -1e-12):
            raise ValidationError(f"density {density_text!r} is negative on the simplex")
        return s
    if kind == "cantor":
        variant = entry.get("variant", "ternary")
        if variant not in ("ternary", "svc", "ratio"):
            raise ValidationError(f"cantor variant must be ternary, svc or ratio, got {variant!r}")
        axis = int(entry.get("axis", 1))
        if not 1 <= axis <= n:
            raise ValidationError(f"cantor axis must be in 1..{n}")
        interval = _as_float_array(entry.get("interval", [0.0, 1.0]), "interval", (2,))
        if interval[1] <= interval[0]:
            raise ValidationError("cantor interval must have positive length")
        gens = int(entry.get("generations", 30))
        if not 1 <= gens <= 60:
            raise ValidationError("generations must lie in 1..60")
        dens = Density(density_text, n)
        if not dens.is_constant or dens.form.constant_value() <= 0:
            raise ValidationError("cantor strata take a positive constant density")
        ratio = entry.get("ratio")
        if variant == "ratio" and (ratio is None or not 0 < float(ratio) < 0.5):
            raise ValidationError("ratio cantor needs 0 < ratio < 1/2")
        base = entry.get("base")
        base = None if base is None else _as_float_array(base, "base", (n,))
        return Cantor(variant, interval, axis - 1, gens, n, base, dens.form.constant_value(),
                      None if ratio is None else float(ratio))
    if kind == "point_mass":
        point = entry.get("point")
        if point is None and entry.get("vertices") is not None:
            point = entry["vertices"][0]
        point = _as_float_array(point, "point", (n,))
        mass = ClosedForm(str(entry.get("mass", density_text)), n)
        if not mass.is_constant or mass.constant_value() <= 0:
            raise ValidationError("point_mass needs a positive constant mass")
        return PointMass(point, mass.constant_value())
    raise ValidationError(f"unknown stratum kind {kind!r}")


def parse_measure_spec(text: str, name: str = "measure") -> MeasureSpec:
    """Parse the ``[domain]`` / ``[[stratum]]`` configuration format."""
    try:
        doc = tomli.loads(text)
    except tomli.TOMLDecodeError as exc:
        raise SpecSyntaxError(str(exc)) from None
    domain = doc.get("domain")
    if not isinstance(domain, dict):
        raise SpecSyntaxError("missing [domain] section")
    try:
        n = int(domain.get("ambient_dim"))
    except (TypeError, ValueError):
        raise ValidationError("domain.ambient_dim must be an integer") from None
    if n not in (1, 2, 3):
        raise ValidationError("ambient_dim must be 1, 2 or 3")
    entries = doc.get("stratum", [])
    if not isinstance(entries, list) or not entries:
        raise ValidationError("at least one [[stratum]] is required")
    bbox = domain.get("bbox")
    if bbox is not None:
        lo = _as_float_array(bbox[0], "bbox lo", (n,))
        hi = _as_float_array(bbox[1], "bbox hi", (n,))
        if np.any(hi <= lo):
            raise ValidationError("bbox must have positive extent on every axis")
        box = (lo, hi)
    else:
        box = (np.zeros(n), np.ones(n))
    strata = tuple(_build_stratum(e, n, box) for e in entries)
    if bbox is None:
        lo = np.min([s.support_box()[0] for s in strata], axis=0)
        hi = np.max([s.support_box()[1] for s in strata], axis=0)
        hi = np.where(hi > lo, hi, lo + 1.0)
        box = (lo, hi)
    for s in strata:
        slo, shi = s.support_box()
        if np.any(slo < box[0] - 1e-12) or np.any(shi > box[1] + 1e-12):
            raise ValidationError(f"stratum {s.describe()} leaves the bounding box")
    spec = MeasureSpec(n, strata, box[0], box[1], str(domain.get("name", name)))
    if spec.total_mass() <= 0:
        raise ValidationError("measure has zero total mass")
    return spec


def load_measure_spec(path) -> MeasureSpec:
    path = Path(path)
    return parse_measure_spec(path.read_text(encoding="utf-8"), name=path.stem)
