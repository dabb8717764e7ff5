"""Multilinear (Q1) finite elements on a uniform grid, weighted by a measure.

Degrees of freedom live at grid vertices, one per *sheet*. Ordinary strata
share sheet 0, which gives the usual continuous Q1 space. Each Cantor
cluster that is separated from its neighbours by a gap of at least
``gap_floor`` gets its own sheet, so a discrete function may jump across
a wide measure-null gap the way a smooth function can.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from .errors import ResourceError
from .expressions import ClosedForm
from .measure import Grid, MeasureSpec, PieceSet

MAX_CELLS_PER_AXIS = 4096
ACTIVE_MASS_FLOOR = 1e-14


def default_eps(h: float) -> float:
    """Penalty scale for null-gradient capture (see the decisions ledger)."""
    return h * h / 4


def default_gap_floor(h: float, diameter: float) -> float:
    return h * h / diameter


@dataclass(eq=False)
class GridSpace:
    spec: MeasureSpec
    user_spec: MeasureSpec
    grid: Grid
    jitter: np.ndarray
    cells: np.ndarray
    cell_mass: np.ndarray
    cell_bary: np.ndarray
    cell_stratum_mass: np.ndarray
    elem_cell: np.ndarray
    elem_label: np.ndarray
    elem_dofs: np.ndarray
    elem_ptr: np.ndarray
    node_x: np.ndarray
    node_w: np.ndarray
    node_elem: np.ndarray
    phi: np.ndarray
    dphi: np.ndarray
    dof_x: np.ndarray
    dof_label: np.ndarray
    node_stratum: np.ndarray
    info: dict = field(default_factory=dict)

    @property
    def h(self) -> float:
        return self.grid.h

    @property
    def ndim(self) -> int:
        return self.spec.ambient_dim

    @property
    def n_cells(self) -> int:
        return len(self.cells)

    @property
    def n_dofs(self) -> int:
        return len(self.dof_x)

    @property
    def node_cell(self) -> np.ndarray:
        return self.elem_cell[self.node_elem]

    @property
    def cell_centers(self) -> np.ndarray:
        """Geometric cell centres in user coordinates."""
        return self.grid.origin + (self.cells + 0.5) * self.h - self.jitter

    def user_coords(self, x) -> np.ndarray:
        return np.asarray(x) - self.jitter

    @property
    def node_user(self) -> np.ndarray:
        return self.node_x - self.jitter

    def cell_average(self, values) -> np.ndarray:
        """Mass-weighted average over each cell of per-node values (Q,) or (Q, k)."""
        values = np.asarray(values, float)
        w = self.node_w.reshape((-1,) + (1,) * (values.ndim - 1))
        out = np.zeros((self.n_cells,) + values.shape[1:])
        np.add.at(out, self.node_cell, w * values)
        return out / self.cell_mass.reshape((-1,) + (1,) * (values.ndim - 1))

    def interior_dofs(self, margin: int = 1) -> np.ndarray:
        """Dofs whose basis support stays ``margin`` - 1 cells off the bounding-box boundary."""
        lo = self.spec.bbox_lo + self.h * (margin - 1e-9)
        hi = self.spec.bbox_hi - self.h * (margin - 1e-9)
        return np.all((self.dof_x > lo) & (self.dof_x < hi), axis=1)


def _vertex_offsets(n: int) -> np.ndarray:
    return np.array(np.meshgrid(*[[0, 1]] * n, indexing="ij")).reshape(n, -1).T


def _basis(t: np.ndarray, h: float) -> tuple[np.ndarray, np.ndarray]:
    """Q1 shape functions and gradients at local coordinates t in [0,1]^n."""
    q, n = t.shape
    bits = _vertex_offsets(n)
    f = np.where(bits[None, :, :] == 1, t[:, None, :], 1 - t[:, None, :])
    phi = f.prod(axis=2)
    dphi = np.empty((q, len(bits), n))
    sign = np.where(bits == 1, 1.0, -1.0) / h
    for j in range(n):
        others = np.delete(f, j, axis=2).prod(axis=2) if n > 1 else np.ones((q, len(bits)))
        dphi[:, :, j] = sign[None, :, j] * others
    return phi, dphi


def _concat_pieces(sets: list[PieceSet], n: int) -> tuple[PieceSet, np.ndarray]:
    q = max(p.nodes.shape[1] for p in sets)
    cells, labels, nodes, weights, owner = [], [], [], [], []
    for i, p in enumerate(sets):
        extra = q - p.nodes.shape[1]
        cells.append(p.cells)
        labels.append(p.labels)
        nodes.append(np.concatenate([p.nodes, np.repeat(p.nodes[:, :1], extra, axis=1)], axis=1))
        weights.append(np.concatenate([p.weights, np.zeros((len(p), extra))], axis=1))
        owner.append(np.full(len(p), i))
    return PieceSet(np.vstack(cells), np.concatenate(labels), np.vstack(nodes), np.vstack(weights)), \
        np.concatenate(owner)


def needs_jitter(spec: MeasureSpec, origin, h: float) -> bool:
    """True when a lower-dimensional stratum sits on a grid hyperplane."""
    for axis, value in spec.hyperplanes():
        r = (value - origin[axis]) / h
        if abs(r - round(r)) < 1e-9:
            return True
    return False


def build_space(spec: MeasureSpec, h: float, gap_floor: float | None = None,
                jitter: bool | None = None) -> GridSpace:
    """Discretize ``spec`` on a uniform grid of spacing ``h``."""
    n = spec.ambient_dim
    extent = spec.bbox_hi - spec.bbox_lo
    per_axis = np.ceil(extent / h - 1e-9).astype(np.int64)
    if np.any(per_axis > MAX_CELLS_PER_AXIS):
        raise ResourceError(f"h={h:g} needs {int(per_axis.max())} cells per axis (limit {MAX_CELLS_PER_AXIS})")
    origin = spec.bbox_lo.astype(float)
    if jitter is None:
        jitter = needs_jitter(spec, origin, h)
    shift = np.full(n, h / math.pi) if jitter else np.zeros(n)
    work = spec.transformed(shift=shift) if jitter else spec
    diameter = float(extent.max())
    floor = default_gap_floor(h, diameter) if gap_floor is None else gap_floor
    grid = Grid(origin, float(h), np.full(n, -1, np.int64), per_axis, floor)

    sets = [s.pieces(grid) for s in work.strata]
    keep = [i for i, p in enumerate(sets) if len(p)]
    pieces, owner = _concat_pieces([sets[i] for i in keep], n)
    owner = np.asarray(keep)[owner]
    shape = tuple(int(s) for s in per_axis + 2)
    if np.any(pieces.cells < -1) or np.any(pieces.cells > per_axis):
        raise ResourceError("measure support leaves the padded grid")
    cell_flat = np.ravel_multi_index(tuple((pieces.cells + 1).T), shape)
    masses = pieces.masses
    total = masses.sum()
    uniq, inv = np.unique(cell_flat, return_inverse=True)
    cmass = np.bincount(inv, weights=masses)
    active = cmass > ACTIVE_MASS_FLOOR * total
    keep_piece = active[inv]
    pieces = PieceSet(pieces.cells[keep_piece], pieces.labels[keep_piece],
                      pieces.nodes[keep_piece], pieces.weights[keep_piece])
    owner, cell_flat = owner[keep_piece], cell_flat[keep_piece]

    # cells that carry an ordinary (label 0) piece merge all their pieces into sheet 0
    plain = np.zeros(len(uniq), bool)
    plain[inv[keep_piece][pieces.labels == 0]] = True
    cell_ids, cell_of_piece = np.unique(cell_flat, return_inverse=True)
    plain_cell = plain[np.searchsorted(uniq, cell_ids)]
    label_pair = np.where((pieces.labels > 0) & ~plain_cell[cell_of_piece],
                          owner.astype(np.int64) + 1, 0)
    label_key = np.stack([label_pair, np.where(label_pair > 0, pieces.labels, 0)], axis=1)
    _, label_id = np.unique(label_key, axis=0, return_inverse=True)
    label_id = label_id.ravel()
    n_labels = int(label_id.max()) + 1

    elem_key = cell_of_piece.astype(np.int64) * n_labels + label_id
    elem_ids, piece_elem = np.unique(elem_key, return_inverse=True)
    elem_cell = elem_ids // n_labels
    elem_label = elem_ids % n_labels
    C = len(cell_ids)
    cells = np.stack(np.unravel_index(cell_ids, shape), axis=1) - 1

    # per-cell and per-stratum masses
    pm = pieces.masses
    cell_mass = np.bincount(cell_of_piece, weights=pm, minlength=C)
    csm = np.zeros((C, len(spec.strata)))
    np.add.at(csm, (cell_of_piece, owner), pm)

    # quadrature nodes sorted by element
    q = pieces.nodes.shape[1]
    node_x = pieces.nodes.reshape(-1, n)
    node_w = pieces.weights.ravel()
    node_elem = np.repeat(piece_elem, q)
    node_owner = np.repeat(owner, q)
    good = node_w > 0
    node_x, node_w, node_elem, node_owner = node_x[good], node_w[good], node_elem[good], node_owner[good]
    order = np.argsort(node_elem, kind="stable")
    node_x, node_w, node_elem, node_owner = node_x[order], node_w[order], node_elem[order], node_owner[order]
    elem_ptr = np.searchsorted(node_elem, np.arange(len(elem_ids)))

    cell_lo = grid.origin + cells * h
    bary = np.zeros((C, n))
    np.add.at(bary, elem_cell[node_elem], node_w[:, None] * node_x)
    bary = bary / cell_mass[:, None] - shift

    t = np.clip((node_x - cell_lo[elem_cell[node_elem]]) / h, 0.0, 1.0)
    phi, dphi = _basis(t, h)

    # dofs: (vertex, sheet) pairs
    offs = _vertex_offsets(n)
    vshape = tuple(s + 1 for s in shape)
    verts = cells[elem_cell][:, None, :] + offs[None, :, :] + 1
    vflat = np.ravel_multi_index(tuple(verts.reshape(-1, n).T), vshape).reshape(len(elem_ids), -1)
    dkey = vflat.astype(np.int64) * n_labels + elem_label[:, None]
    dof_ids, elem_dofs = np.unique(dkey.ravel(), return_inverse=True)
    elem_dofs = elem_dofs.reshape(dkey.shape)
    dof_v = np.stack(np.unravel_index(dof_ids // n_labels, vshape), axis=1) - 1
    dof_x = grid.origin + dof_v * h

    info = {"h": float(h), "eps": default_eps(h), "gap_floor": floor, "jitter": shift.tolist(),
            "cells": C, "elements": len(elem_ids), "dofs": len(dof_ids), "sheets": n_labels,
            "truncation_error": float(sum(s.truncation_error() for s in spec.strata))}
    return GridSpace(work, spec, grid, shift, cells, cell_mass, bary, csm, elem_cell, elem_label,
                     elem_dofs, elem_ptr, node_x, node_w, node_elem, phi, dphi, dof_x,
                     dof_ids % n_labels, node_owner, info)


def _assemble(space: GridSpace, left: np.ndarray, right: np.ndarray) -> sp.csr_matrix:
    """Sum over nodes of w * left_i . right_j, scattered into the global matrix."""
    if left.ndim == 2:
        prod = space.node_w[:, None, None] * left[:, :, None] * right[:, None, :]
    else:
        prod = space.node_w[:, None, None] * np.einsum("qik,qjk->qij", left, right)
    local = np.add.reduceat(prod, space.elem_ptr, axis=0)
    dofs = space.elem_dofs
    k = dofs.shape[1]
    rows = np.repeat(dofs, k, axis=1).ravel()
    cols = np.tile(dofs, (1, k)).ravel()
    D = space.n_dofs
    return sp.csr_matrix((local.ravel(), (rows, cols)), shape=(D, D))


def assemble_mass(space: GridSpace) -> sp.csr_matrix:
    return _assemble(space, space.phi, space.phi)


def projected_basis_gradients(space: GridSpace, projectors=None) -> np.ndarray:
    if projectors is None:
        return space.dphi
    P = projectors[space.node_cell]
    return np.einsum("qkj,qij->qki", space.dphi, P)


def assemble_stiffness(space: GridSpace, projectors=None) -> sp.csr_matrix:
    """Stiffness matrix; with ``projectors`` (C, n, n) the gradients are projected cellwise."""
    g = projected_basis_gradients(space, projectors)
    return _assemble(space, g, g)


def assemble_coordinate_rhs(space: GridSpace) -> np.ndarray:
    """Columns b_j with (b_j)_i = integral of d phi_i / d x_j."""
    local = np.add.reduceat(space.node_w[:, None, None] * space.dphi, space.elem_ptr, axis=0)
    out = np.zeros((space.n_dofs, space.ndim))
    np.add.at(out, space.elem_dofs.ravel(), local.reshape(-1, space.ndim))
    return out


def assemble_field_rhs(space: GridSpace, node_field: np.ndarray) -> np.ndarray:
    """(B w)_i = integral of grad phi_i . w for a field given at quadrature nodes."""
    contrib = space.node_w[:, None] * np.einsum("qkj,qj->qk", space.dphi, node_field)
    local = np.add.reduceat(contrib, space.elem_ptr, axis=0)
    return np.bincount(space.elem_dofs.ravel(), weights=local.ravel(), minlength=space.n_dofs)


def assemble_load(space: GridSpace, node_values: np.ndarray) -> np.ndarray:
    """(l)_i = integral of phi_i v for v given at quadrature nodes."""
    local = np.add.reduceat(space.node_w[:, None] * space.phi * node_values[:, None], space.elem_ptr, axis=0)
    return np.bincount(space.elem_dofs.ravel(), weights=local.ravel(), minlength=space.n_dofs)


def node_values(space: GridSpace, coeffs) -> np.ndarray:
    c = np.asarray(coeffs, float)[space.elem_dofs[space.node_elem]]
    return np.einsum("qk,qk->q", space.phi, c)


def node_gradients(space: GridSpace, coeffs) -> np.ndarray:
    c = np.asarray(coeffs, float)[space.elem_dofs[space.node_elem]]
    return np.einsum("qkj,qk->qj", space.dphi, c)


def sample_gradient(space: GridSpace, coeffs, cell: int | None = None) -> np.ndarray:
    """Mass-weighted average of the discrete gradient over each cell (or one cell)."""
    g = space.cell_average(node_gradients(space, coeffs))
    return g if cell is None else g[cell]


def project_function(space: GridSpace, f) -> np.ndarray:
    """Vertex interpolant of a closed form (or callable on user coordinates)."""
    x = space.user_coords(space.dof_x)
    return np.asarray(f(x), float)


def closed_form(text: str, space_or_dim) -> ClosedForm:
    n = space_or_dim if isinstance(space_or_dim, int) else space_or_dim.ndim
    return ClosedForm(text, n)
