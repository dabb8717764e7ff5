import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from wsobolev.discretization import assemble_stiffness, build_space, node_values, project_function
from wsobolev.errors import SolverError
from wsobolev.expressions import ClosedForm
from wsobolev.fibers import SweepSchedule, am_distribution, compute_tangent_field, compute_W_field
from wsobolev.sobolev import (check_divergence, cheeger_energy, heat_flow, l2_error, laplacian, leibniz_defect, leibniz_margin,
                              minimal_relaxed_gradient, mwug_via_projection)
from wsobolev.presets import cantor, lebesgue, segment


@pytest.fixture(scope="module")
def interval():
    space = build_space(lebesgue(1), 2.0**-8)
    return space, compute_tangent_field(lebesgue(1), SweepSchedule((2.0**-8,)))


@pytest.fixture(scope="module")
def seg():
    spec = segment(30.0)
    T = compute_tangent_field(spec, SweepSchedule((1 / 32, 1 / 64)))
    return T.space, T, compute_W_field(T.space)


def test_heat_oracle(interval):
    space, T = interval
    f0 = project_function(space, ClosedForm("cos(pi*x1)", 1))
    res = heat_flow(space, T, f0, 0.1, 64)
    _, rel = l2_error(space, res.coeffs, ClosedForm("exp(-pi**2*0.1)*cos(pi*x1)", 1))
    assert rel <= 3e-2
    energy = np.array([r["energy"] for r in res.history])
    assert np.all(np.diff(energy) < 0)
    w12 = np.array([r["w12_norm_sq"] for r in res.history])
    assert np.all(np.diff(w12) <= 0)


def test_heat_constant_is_fixed(interval):
    space, T = interval
    res = heat_flow(space, T, np.full(space.n_dofs, 2.0), 0.1, 8)
    assert np.allclose(res.coeffs, 2.0, atol=1e-12)
    with pytest.raises(ValueError):
        heat_flow(space, T, np.ones(space.n_dofs), 0.1, 0)


def test_heat_on_fat_cantor_is_frozen():
    spec = cantor("svc", 24)
    T = compute_tangent_field(spec, SweepSchedule(tuple(2.0**-k for k in (9, 10, 11))))
    f0 = project_function(T.space, ClosedForm("cos(pi*x1)", 1))
    res = heat_flow(T.space, T, f0, 0.1, 16)
    stiff = np.array([r["energy"] for r in res.history])
    assert np.max(np.abs(stiff)) <= 1e-3 * np.max(np.abs(f0)) ** 2


def test_laplacian_oracle(interval):
    space, T = interval
    f = project_function(space, ClosedForm("cos(pi*x1)", 1))
    lap = laplacian(space, T, f)
    _, rel = l2_error(space, lap, ClosedForm("-pi**2*cos(pi*x1)", 1))
    assert rel <= 2e-2
    M1 = np.sum(space.node_w * node_values(space, lap))
    assert abs(M1) <= 1e-8 * np.sqrt(np.sum(space.node_w * node_values(space, lap) ** 2))
    assert np.allclose(laplacian(space, T, np.ones(space.n_dofs)), 0, atol=1e-9)


def test_energy_examples():
    space = build_space(lebesgue(2), 1 / 32)
    W = compute_W_field(space)
    assert cheeger_energy(space, project_function(space, ClosedForm("x1", 2)), W) == pytest.approx(0.5, abs=1e-3)
    assert cheeger_energy(space, np.ones(space.n_dofs), W) == pytest.approx(0, abs=1e-20)
    svc = build_space(cantor("svc", 24), 2.0**-11)
    e = cheeger_energy(svc, project_function(svc, ClosedForm("x1", 1)))
    assert e <= 5e-3


@settings(max_examples=25, deadline=None)
@given(a=arrays(np.float64, 5, elements=st.floats(-3, 3)), b=arrays(np.float64, 5, elements=st.floats(-3, 3)))
def test_parallelogram_and_dirichlet_bound(seg, a, b):
    space, T, W = seg
    x = space.user_coords(space.dof_x)
    basis = np.stack([np.ones(len(x)), x[:, 0], x[:, 1], x[:, 0] ** 2, np.sin(3 * x[:, 1])], axis=1)
    f, g = basis @ a, basis @ b
    E = lambda c: minimal_relaxed_gradient(space, c, W).energy
    lhs, rhs = E(f + g) + E(f - g), 2 * E(f) + 2 * E(g)
    assert abs(lhs - rhs) <= 1e-10 * max(rhs, 1e-300) + 1e-14
    G = assemble_stiffness(space)
    assert E(f) <= 0.5 * f @ (G @ f) * (1 + 1e-12) + 1e-14


def test_mwug_cone_bounded_by_one(seg):
    space, T, _ = seg
    sol = mwug_via_projection(T, am_distribution(space), ClosedForm("cone(0.2, 0.9)", 2))
    assert np.all(sol.mwug <= 1 + 1e-12)
    assert np.all(sol.mwug <= sol.am_norm + 1e-12) and np.all(sol.am_norm <= sol.lip + 1e-12)


def test_mwug_segment_tangential_derivative(seg):
    space, T, W = seg
    f = ClosedForm("x1 + x2", 2)
    expected = abs(np.cos(np.pi / 6) + np.sin(np.pi / 6))
    relax = minimal_relaxed_gradient(space, project_function(space, f), W)
    good = T.stable & (T.dims == 1)
    assert T.mass_fraction(np.abs(relax.mwug - expected) <= 5e-2) >= 0.95
    assert good.any()


def test_divergence_examples():
    space = build_space(lebesgue(2), 1 / 64)
    e1 = np.tile([1.0, 0.0], (space.n_cells, 1))
    res = check_divergence(space, e1)
    assert res.accepted
    # the boundary flux decays into the interior by 2 - sqrt(3) per cell
    deep = space.interior_dofs(leibniz_margin(1e-8))
    assert deep.any()
    assert np.max(np.abs(res.divergence[deep])) <= 1e-8 * np.max(np.abs(res.divergence))
    seg0 = build_space(segment(0.0), 1 / 32)
    assert check_divergence(seg0, np.tile([1.0, 0.0], (seg0.n_cells, 1))).accepted
    transverse = check_divergence(seg0, np.tile([0.0, 1.0], (seg0.n_cells, 1)))
    assert not transverse.accepted and transverse.reason == "residual"


def test_leibniz_on_lebesgue():
    space = build_space(lebesgue(2), 1 / 32)
    x = space.node_user
    w = np.stack([np.sin(x[:, 1]), x[:, 0] ** 2], axis=1)
    defect, n_test = leibniz_defect(space, w, ClosedForm("1 + 0.3*x1 - 0.2*x2", 2))
    assert n_test > 0 and defect <= 1e-5


def test_divergence_matches_laplacian(interval):
    space, T = interval
    f = project_function(space, ClosedForm("cos(pi*x1)", 1))
    from wsobolev.discretization import node_gradients
    res = check_divergence(space, node_gradients(space, f))
    assert res.accepted
    lap = laplacian(space, T, f)
    gap = np.sqrt(np.sum(space.node_w * node_values(space, lap - res.divergence) ** 2))
    assert gap <= 1e-5 * np.sqrt(np.sum(space.node_w * node_values(space, lap) ** 2))


def test_bad_field_shape():
    space = build_space(lebesgue(1), 1 / 8)
    with pytest.raises(ValueError):
        check_divergence(space, np.ones((3, 1)))


def test_solver_error_type():
    assert issubclass(SolverError, RuntimeError)
