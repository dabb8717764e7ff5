import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from wsobolev.errors import EvalError, ValidationError
from wsobolev.expressions import ClosedForm

FORMS = ["1", "x1", "x1 + x2", "x1**2 - 3*x1*x2", "cos(pi*x1)", "sin(2*x1 + x2)", "cone(0.5, 0.5)", "exp(x2)"]


@pytest.mark.parametrize("text", FORMS)
@settings(max_examples=20, deadline=None)
@given(p=st.lists(st.floats(0.05, 0.45), min_size=2, max_size=2))
def test_gradient_matches_central_differences(text, p):
    f = ClosedForm(text, 2)
    x = np.array([p])
    h = 1e-6
    fd = np.array([(f(x + h * e) - f(x - h * e))[0] / (2 * h) for e in np.eye(2)])
    assert np.allclose(f.gradient(x)[0], fd, atol=1e-6)


def test_cone_is_one_lipschitz():
    f = ClosedForm("cone(0.25, 0.75)", 2)
    x = np.random.default_rng(0).uniform(0, 1, size=(200, 2))
    g = np.linalg.norm(f.gradient(x), axis=1)
    assert np.allclose(g, 1.0)
    assert np.allclose(f(x), np.linalg.norm(x - [0.25, 0.75], axis=1))
    # the apex has no gradient; it is reported as zero rather than nan
    assert np.all(np.isfinite(f.gradient(np.array([[0.25, 0.75]]))))


def test_constant_and_degree():
    assert ClosedForm("3", 1).is_constant
    assert ClosedForm("3", 1).constant_value() == 3
    assert ClosedForm("x1**2 + x1", 1).polynomial_degree() == 2
    assert ClosedForm("cos(x1)", 1).polynomial_degree() is None


@pytest.mark.parametrize("text", ["x4", "__import__('os')", "x1.real", "open(1)", "lambda: 1", "x1; x2", ""])
def test_rejects_outside_grammar(text):
    with pytest.raises(ValidationError):
        ClosedForm(text, 3 if text == "x4" else 2)


def test_non_finite_values_raise():
    with pytest.raises(EvalError):
        ClosedForm("sqrt(x1)", 1)(np.array([[-1.0]]))
