import numpy as np
import pytest

from wsobolev.discretization import (assemble_mass, assemble_stiffness, build_space, node_gradients,
                                     node_values, project_function)
from wsobolev.errors import ResourceError
from wsobolev.expressions import ClosedForm
from wsobolev.fibers import null_gradient_spectrum
from wsobolev.presets import cantor, cross, lebesgue, segment


def test_lebesgue_1d_stencils():
    h = 1 / 16
    space = build_space(lebesgue(1), h)
    order = np.argsort(space.dof_x[:, 0])
    M = assemble_mass(space).toarray()[np.ix_(order, order)]
    G = assemble_stiffness(space).toarray()[np.ix_(order, order)]
    assert space.n_dofs == 17
    i = 8
    assert np.allclose(M[i, i - 1: i + 2], h * np.array([1 / 6, 2 / 3, 1 / 6]))
    assert np.allclose(G[i, i - 1: i + 2], np.array([-1, 2, -1]) / h)
    assert M.sum() == pytest.approx(1.0)
    assert np.allclose(G.sum(axis=1), 0)


def test_neumann_spectrum_oracle():
    """M v = sigma G v on [0,1]: sigma = 1/lambda, lambda_1 = pi^2, lambda_max = 12/h^2."""
    h = 1 / 64
    sigma, _ = null_gradient_spectrum(build_space(lebesgue(1), h))
    assert sigma.max() == pytest.approx(1 / np.pi**2, rel=1e-3)
    assert sigma.min() == pytest.approx(h**2 / 12, rel=1e-2)
    assert len(sigma) == 64  # the constant mode has infinite sigma and is excluded


def test_mass_and_linear_reproduction():
    for spec in (lebesgue(2), segment(30.0), cross(), cantor("svc", 24)):
        space = build_space(spec, 1 / 32)
        assert space.cell_mass.sum() == pytest.approx(spec.total_mass(), rel=1e-10)
        M = assemble_mass(space)
        assert M.sum() == pytest.approx(spec.total_mass(), rel=1e-10)
        f = ClosedForm("2*x1 - 1" if spec.ambient_dim == 1 else "2*x1 - x2 + 1", spec.ambient_dim)
        c = project_function(space, f)
        assert np.allclose(node_values(space, c), f(space.node_user), atol=1e-12)
        assert np.allclose(node_gradients(space, c), f.gradient(space.node_user), atol=1e-10)
        assert np.allclose(assemble_stiffness(space) @ np.ones(space.n_dofs), 0, atol=1e-9)


def test_grids_nest_across_scales():
    coarse = build_space(lebesgue(2), 1 / 8)
    fine = build_space(lebesgue(2), 1 / 16)
    k = np.floor((fine.cell_bary - coarse.grid.origin) / coarse.h).astype(int)
    assert set(map(tuple, k)) == set(map(tuple, coarse.cells))


def test_jitter_only_for_grid_aligned_strata():
    assert np.all(build_space(segment(30.0), 1 / 16).jitter == 0)
    jit = build_space(segment(0.0), 1 / 16).jitter
    assert np.all(jit != 0) and np.all(np.abs(jit) < 1 / 16)


def test_resource_limit():
    with pytest.raises(ResourceError):
        build_space(lebesgue(1), 1 / 10000)


def test_ternary_spectrum_is_all_small():
    h = 3.0**-5
    sigma, _ = null_gradient_spectrum(build_space(cantor("ternary", 10), h))
    assert len(sigma) > 100
    assert np.all(sigma <= h * h)


def test_point_mass_spectrum_is_zero():
    from wsobolev.measure import parse_measure_spec
    spec = parse_measure_spec("[domain]\nambient_dim=2\nbbox=[[0,0],[1,1]]\n[[stratum]]\nkind='point_mass'\n"
                              "point=[0.3,0.6]\nmass=1\n")
    sigma, _ = null_gradient_spectrum(build_space(spec, 1 / 4))
    # every direction at the atom is a null gradient: sigma = |f|^2 / |grad f|^2 = 0
    assert len(sigma) >= 1 and np.allclose(sigma, 0, atol=1e-12)
