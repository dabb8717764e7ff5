import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from wsobolev.errors import SpecSyntaxError, UnsupportedStratumError, ValidationError
from wsobolev.measure import Cantor, Grid, cell_mass, parse_measure_spec, product_spec, simplex_rule
from wsobolev.presets import cantor, cross, lebesgue, segment


def brute_cantor_mass(c: Cantor, lo: float, hi: float) -> float:
    """Uniform mass on the generation-G intervals, summed interval by interval."""
    lefts = c.lefts(c.G)
    L = c.lengths[c.G]
    overlap = np.clip(np.minimum(hi, lefts + L) - np.maximum(lo, lefts), 0, None)
    return float(np.sum(c.mass_g[c.G] * overlap / L))


@pytest.mark.parametrize("variant", ["ternary", "svc"])
@settings(max_examples=40, deadline=None)
@given(a=st.floats(-0.1, 1.1), b=st.floats(-0.1, 1.1))
def test_cantor_mass_matches_enumeration(variant, a, b):
    c = Cantor(variant, (0.0, 1.0), generations=8)
    lo, hi = min(a, b), max(a, b)
    assert c.mass_in_box(np.array([lo]), np.array([hi])) == pytest.approx(brute_cantor_mass(c, lo, hi), abs=1e-12)


def test_cantor_known_values():
    t = cantor("ternary", 30).strata[0]
    assert t.mass_in_box(np.array([0.0]), np.array([1 / 3])) == pytest.approx(0.5, abs=1e-12)
    assert t.mass_in_box(np.array([1 / 3 + 1e-9]), np.array([2 / 3 - 1e-9])) == pytest.approx(0.0, abs=1e-12)
    s = cantor("svc", 24).strata[0]
    # the SVC set keeps length 1/2 in the limit; truncation adds 2^-(G+1)
    assert s.total_mass() == pytest.approx(0.5 + 2.0**-25, abs=1e-15)
    assert s.truncation_error() == pytest.approx(2.0**-25)


def test_cantor_pieces_sum_to_total():
    for variant in ("ternary", "svc"):
        c = Cantor(variant, (0.0, 1.0), generations=20)
        grid = Grid(np.zeros(1), 1 / 81, np.array([-1]), np.array([82]), gap_floor=1 / 81**2)
        p = c.pieces(grid)
        assert p.masses.sum() == pytest.approx(c.total_mass(), rel=1e-10)
        # two-point rule reproduces the first two moments in every piece
        for k in np.unique(p.cells[:, 0])[:5]:
            lo, hi = k / 81, (k + 1) / 81
            sel = p.cells[:, 0] == k
            assert p.weights[sel].sum() == pytest.approx(c.mass_in_box(np.array([lo]), np.array([hi])), rel=1e-10)


def test_simplex_rule_exactness():
    from math import factorial
    for k in (1, 2, 3):
        lam, w = simplex_rule(k, 3)
        # integral of x_0^2 over the unit k-simplex is 2 / (k+2)!
        assert np.sum(w * lam[:, 0] ** 2) == pytest.approx(2 / factorial(k + 2), rel=1e-12)
        assert np.sum(w) == pytest.approx(1 / factorial(k), rel=1e-12)


def test_triangle_with_polynomial_density():
    spec = parse_measure_spec("""
[domain]
ambient_dim = 2
bbox = [[0, 0], [1, 1]]
[[stratum]]
kind = "simplex"
dim = 2
vertices = [[0, 0], [1, 0], [0, 1]]
density = "1 + x1*x2"
""")
    assert spec.total_mass() == pytest.approx(0.5 + 1 / 24, rel=1e-12)


@settings(max_examples=30, deadline=None)
@given(cut=st.floats(0.05, 0.95), axis=st.integers(0, 1), which=st.sampled_from(["lebesgue", "segment", "cross"]))
def test_cell_mass_is_additive(cut, axis, which):
    spec = {"lebesgue": lambda: lebesgue(2), "segment": lambda: segment(30.0), "cross": cross}[which]()
    lo, hi = spec.bbox_lo.copy(), spec.bbox_hi.copy()
    mid = lo[axis] + cut * (hi[axis] - lo[axis])
    left_hi, right_lo = hi.copy(), lo.copy()
    left_hi[axis] = mid
    right_lo[axis] = mid
    whole = cell_mass(spec, lo, hi)
    assert cell_mass(spec, lo, left_hi) + cell_mass(spec, right_lo, hi) == pytest.approx(whole, rel=1e-10)
    assert whole == pytest.approx(spec.total_mass(), rel=1e-10)


@settings(max_examples=20, deadline=None)
@given(lo=st.lists(st.floats(0, 0.5), min_size=2, max_size=2), size=st.floats(0.05, 0.5))
def test_transform_preserves_box_mass(lo, size):
    spec = segment(30.0)
    lo = np.array(lo)
    hi = lo + size
    perm, shift = np.array([1, 0]), np.array([0.3, -0.2])
    moved = spec.transformed(perm, shift)
    assert cell_mass(moved, lo[perm] + shift, hi[perm] + shift) == pytest.approx(cell_mass(spec, lo, hi), abs=1e-12)


def test_product_mass():
    prod = product_spec(lebesgue(1), cantor("ternary", 20))
    assert prod.total_mass() == pytest.approx(1.0)
    assert cell_mass(prod, np.array([0.0, 0.0]), np.array([0.5, 1 / 3])) == pytest.approx(0.25, abs=1e-12)


BAD = {
    "no domain": ("[[stratum]]\nkind='simplex'\n", SpecSyntaxError),
    "toml": ("[domain\n", SpecSyntaxError),
    "dim": ("[domain]\nambient_dim=4\n[[stratum]]\nkind='ac_density'\n", ValidationError),
    "kind": ("[domain]\nambient_dim=1\n[[stratum]]\nkind='blob'\n", ValidationError),
    "density degree": ("[domain]\nambient_dim=1\nbbox=[[0],[1]]\n[[stratum]]\nkind='ac_density'\ndensity='x1**3'\n",
                       ValidationError),
    "negative density": ("[domain]\nambient_dim=1\nbbox=[[0],[1]]\n[[stratum]]\nkind='ac_density'\ndensity='x1-0.5'\n",
                         ValidationError),
    "dependent": ("[domain]\nambient_dim=2\n[[stratum]]\nkind='simplex'\nvertices=[[0,0],[1,1],[2,2]]\n",
                  ValidationError),
    "vertex count": ("[domain]\nambient_dim=2\n[[stratum]]\nkind='simplex'\ndim=2\nvertices=[[0,0],[1,1]]\n",
                     ValidationError),
    "generations": ("[domain]\nambient_dim=1\n[[stratum]]\nkind='cantor'\ngenerations=0\n", ValidationError),
    "cantor density": ("[domain]\nambient_dim=1\n[[stratum]]\nkind='cantor'\ndensity='x1'\n", ValidationError),
    "axis": ("[domain]\nambient_dim=1\n[[stratum]]\nkind='cantor'\naxis=2\n", ValidationError),
    "outside": ("[domain]\nambient_dim=1\nbbox=[[0],[1]]\n[[stratum]]\nkind='cantor'\ninterval=[0,2]\n",
                ValidationError),
    "bad name": ("[domain]\nambient_dim=1\n[[stratum]]\nkind='ac_density'\ndensity='__import__(1)'\n",
                 ValidationError),
}


@pytest.mark.parametrize("case", sorted(BAD))
def test_parse_rejects(case):
    text, err = BAD[case]
    with pytest.raises(err):
        parse_measure_spec(text)


def test_registry():
    assert segment(30.0).strata[0].am_basis().shape == (2, 1)
    assert cantor("ternary", 10).strata[0].am_basis().shape == (1, 0)
    assert cantor("svc", 10).strata[0].am_basis().shape == (1, 1)
    ratio = parse_measure_spec("[domain]\nambient_dim=1\n[[stratum]]\nkind='cantor'\nvariant='ratio'\nratio=0.25\n")
    with pytest.raises(UnsupportedStratumError):
        ratio.strata[0].am_basis()
