import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.special import erf

from qbsde.errors import DomainMismatch, GridEscape, MonotoneViolation, OutOfDomain, OverflowGuard
from qbsde.functions import DriftFunction, ScalarField
from qbsde.generators import DriftQuadratic
from qbsde.pde_solver import SolverConfig
from qbsde.stochastic import TimeGrid
from qbsde.transforms import (TabulatedMap, construct_f, export_flow_csv, pde_residual_f, phi_map, psi_from_k,
                              solve_characteristics, transfer_identity_gap, transformed_generator)

U = np.linspace(-3, 3, 1201)


def test_psi_closed_forms():
    c = 0.4
    np.testing.assert_allclose(psi_from_k(c)(U), np.expm1(2 * c * U) / (2 * c), atol=1e-8)
    np.testing.assert_allclose(psi_from_k("-y")(U), np.sqrt(np.pi) / 2 * erf(U), atol=1e-8)


def test_psi_derivative_and_inverse():
    psi = psi_from_k(0.4)
    np.testing.assert_allclose(psi.deriv(U), np.exp(0.8 * U), rtol=1e-12)
    np.testing.assert_allclose(psi.inverse(psi(U)), U, atol=1e-12)
    with pytest.raises(OutOfDomain):
        psi(3.5)


def test_psi_guards():
    with pytest.raises(OverflowGuard):
        psi_from_k(20.0, (-3.0, 3.0))
    with pytest.raises(DomainMismatch):
        psi_from_k(0.4, (0.5, 3.0))
    with pytest.raises(MonotoneViolation):
        TabulatedMap([0.0, 1.0], [0.0, -1.0], [1.0, 1.0])


@pytest.fixture(scope="module")
def flow():
    return solve_characteristics(DriftFunction.from_expr("0.1*y"), TimeGrid(0.0, 1.0, 200), (-6.0, 6.0), 481)


def test_linear_flow_closed_form(flow):
    y = np.linspace(-5, 5, 41)
    for t in (0.0, 0.37, 1.0):
        np.testing.assert_allclose(flow.v(t, y), y * np.exp(0.1 * t), atol=1e-8)
        np.testing.assert_allclose(flow.v_inv(t, y * np.exp(0.1 * t)), y, atol=1e-8)
    np.testing.assert_allclose(flow.dv(0.5, y), np.exp(0.05), atol=1e-8)
    np.testing.assert_allclose(flow.ddv(0.5, y), 0.0, atol=1e-8)


def test_gronwall_envelope_and_transport(flow):
    H, _ = flow.h.envelope(flow.t_grid.nodes, flow.y)
    upper = np.exp(np.trapezoid(H, flow.t_grid.nodes))
    assert flow.M1 <= upper + 1e-6 and flow.m1 >= 1 / upper - 1e-6
    assert np.max(flow.transport_residual()) < 1e-6


def test_nonlinear_flow_against_ode_reference():
    # y' = -sin(y) solves tan(y_t / 2) = tan(y_0 / 2) e^{-t}
    flow = solve_characteristics(DriftFunction.from_expr("sin(y)"), TimeGrid(0.0, 1.0, 200), (-2.0, 2.0), 321)
    y0 = np.linspace(-1.5, 1.5, 13)
    phi_t = 2 * np.arctan(np.tan(y0 / 2) * np.exp(-1.0))
    np.testing.assert_allclose(flow.v_inv(1.0, y0), phi_t, atol=1e-9)
    np.testing.assert_allclose(flow.v(1.0, phi_t), y0, atol=1e-8)


def test_grid_escape_for_explosive_drift():
    with pytest.raises((GridEscape, MonotoneViolation, OverflowError, FloatingPointError)):
        with np.errstate(over="ignore", invalid="ignore"):
            solve_characteristics(DriftFunction.from_expr("-y**3"), TimeGrid(0.0, 1.0, 50), (-8.0, 8.0), 65)


def test_constraint_residual_and_constructed_f(constrained_f, linear_drift):
    t = np.linspace(0, 1, 11)
    y = np.linspace(-3, 3, 13)
    closed = ScalarField("0.05*exp(0.1*t)")
    assert np.max(np.abs(pde_residual_f(linear_drift, closed, t, y))) <= 1e-10
    T, Y = np.meshgrid(t, y, indexing="ij")
    np.testing.assert_allclose(constrained_f(T, Y), 0.05 * np.exp(0.1 * T), atol=1e-8)
    assert np.max(np.abs(pde_residual_f(linear_drift, constrained_f, t[1:-1], y))) < 1e-6
    perturbed = ScalarField("0.05*exp(0.1*t) + 0.1")
    assert np.max(np.abs(pde_residual_f(linear_drift, perturbed, t, y))) == pytest.approx(0.01)


@given(st.floats(-2.5, 2.5), st.floats(0.0, 1.0))
@settings(max_examples=25, deadline=None)
def test_transformed_generator_is_pure_quadratic(constrained_f, linear_drift, u, t):
    """Under the constraint the drift disappears and K = f0 (= 0.05)."""
    gt = transformed_generator(DriftQuadratic(linear_drift, constrained_f), constrained_f.flow)
    assert gt(t, u, 0.0) == pytest.approx(0.0, abs=1e-6)
    assert gt(t, u, 2.0) == pytest.approx(0.05 * 4.0, abs=1e-6)


def test_transfer_identity_gap_and_refinement(drift_quadratic, constrained_f):
    coarse = SolverConfig(steps_per_unit=100, n_x=201)
    g1 = transfer_identity_gap(drift_quadratic, constrained_f.flow, np.tanh, coarse)
    g2 = transfer_identity_gap(drift_quadratic, constrained_f.flow, np.tanh, coarse.refined(2))
    assert g2 <= 1e-3 and g1 / g2 >= 1.8


def test_phi_map_domain(constrained_f, psi_005):
    m = phi_map(constrained_f.flow, psi_005, 1.0)
    y = np.linspace(-1, 1, 5)
    np.testing.assert_allclose(m.inverse(m(y)), y, atol=1e-10)
    with pytest.raises(DomainMismatch):
        phi_map(constrained_f.flow, psi_005, 1.0, (-7.9, 7.9))


def test_flow_export(tmp_path, flow):
    export_flow_csv(flow, tmp_path / "f.csv")
    lines = open(tmp_path / "f.csv").read().splitlines()
    assert lines[0] == "t,y,v,dv,ddv" and len(lines) == 201 * 481 + 1
