import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from qbsde.functions import DriftFunction, Expr, ScalarField, as_expr, describe


def test_expr_evaluates_vectorized_and_broadcasts():
    e = Expr("0.4 - 0.1*tanh(y)", ("y",))
    y = np.linspace(-2, 2, 7)
    np.testing.assert_allclose(e(y), 0.4 - 0.1 * np.tanh(y), atol=1e-15)
    c = Expr("0.05", ("t", "y"))
    assert c(np.zeros(3), np.ones(3)).shape == (3,)


def test_heaviside_is_one_half_at_zero():
    e = Expr("Heaviside(x)", ("x",))
    np.testing.assert_array_equal(e(np.array([-1.0, 0.0, 2.0])), [0.0, 0.5, 1.0])


def test_unknown_symbols_rejected():
    with pytest.raises(ValueError):
        Expr("a*y", ("y",))


def test_derivatives_are_symbolic():
    h = DriftFunction.from_expr("0.1*y + sin(t*y)")
    t, y = 0.3, 1.7
    assert h.h_y(t, y) == pytest.approx(0.1 + t * np.cos(t * y), abs=1e-15)
    assert h.h_yy(t, y) == pytest.approx(-t * t * np.sin(t * y), abs=1e-15)


@given(st.floats(-3, 3), st.floats(0, 1))
@settings(max_examples=40, deadline=None)
def test_scalar_field_derivatives_match_finite_differences(y, t):
    f = ScalarField("0.05*exp(0.1*t)*cosh(y)")
    d = 1e-6
    assert f.dy(t, y) == pytest.approx((f(t, y + d) - f(t, y - d)) / (2 * d), rel=1e-6, abs=1e-9)
    assert f.dt(t, y) == pytest.approx((f(t + d, y) - f(t - d, y)) / (2 * d), rel=1e-6, abs=1e-9)


def test_scalar_field_shift_keeps_derivatives():
    f = ScalarField("0.05*exp(0.1*t)") + 0.1
    assert f(0.0, 3.0) == pytest.approx(0.15)
    assert f.dt(0.0, 3.0) == pytest.approx(0.005)


def test_plain_callables_need_explicit_derivatives():
    with pytest.raises(ValueError):
        ScalarField(lambda t, y: t + y)
    fn = as_expr(np.tanh)
    assert fn is np.tanh
    with pytest.raises(TypeError):
        describe(fn)


def test_envelope_and_zero():
    h = DriftFunction.from_expr("0.1*y")
    H, B = h.envelope(np.linspace(0, 1, 5), np.linspace(-3, 3, 7))
    np.testing.assert_allclose(H, 0.1)
    assert B == 0.0
    assert DriftFunction.zero().is_zero() and not h.is_zero()
