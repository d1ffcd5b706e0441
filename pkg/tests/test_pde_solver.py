import numpy as np
import pytest

from qbsde.errors import AuditFailure, ConfigError, DomainTooSmall, VariantMismatch
from qbsde.functions import DriftFunction, ScalarField
from qbsde.generators import (CustomGenerator, DriftQuadratic, Entropic, PersistentDrift, PureQuadratic,
                              RandomDriftQuadratic, TimeVaryingQuadratic)
from qbsde.pde_solver import (SchemeParams, SolverConfig, SpatialGrid, apriori_bound, constant_flow, early_value,
                              export_csv, g_expectation, increment_value, load_surface, require_zero_drift,
                              save_surface, solve_markov, terminal_value, two_stage_value)
from qbsde.stochastic import TimeGrid

# log E exp(tanh(W_1)) by adaptive quadrature (scipy.integrate.quad, 80-node Gauss-Hermite agrees to 1e-10)
ENTROPIC_TANH = 0.1889260589705691
# (1/0.8) log E exp(0.8 tanh(W_1)) by adaptive quadrature
PSI04_TANH = 0.15339199035085122
# psi^{-1}(E psi(tanh(W_1))) for k(u) = 0.4 - 0.1 tanh(u), psi by nested adaptive quadrature
PSI_STATE_TANH = 0.14921217367534378

FAST = SolverConfig(steps_per_unit=100, n_x=401)


def test_linear_generator_gives_heat_semigroup():
    zero = CustomGenerator(lambda t, y, z: 0.0 * np.asarray(z), name="zero")
    # E exp(-W_1^2 / 2) = 1 / sqrt(2)
    value = terminal_value(zero, lambda x: np.exp(-0.5 * x * x), 1.0, FAST)
    assert value == pytest.approx(1 / np.sqrt(2), abs=2e-5)


def test_entropic_value_and_second_order_convergence():
    errs = []
    for spu, nx in ((100, 201), (200, 401), (400, 801)):
        errs.append(terminal_value(Entropic(0.5), np.tanh, 1.0, SolverConfig(spu, nx)) - ENTROPIC_TANH)
    assert abs(errs[-1]) < 5e-4
    assert abs(errs[0] / errs[1]) > 3.0 and abs(errs[1] / errs[2]) > 3.0


def test_pure_quadratic_constant_and_state_dependent_k():
    assert terminal_value(PureQuadratic(0.4), np.tanh, 1.0) == pytest.approx(PSI04_TANH, abs=1e-5)
    assert terminal_value(PureQuadratic("0.4 - 0.1*tanh(y)"), np.tanh, 1.0) == pytest.approx(PSI_STATE_TANH, abs=1e-5)


def test_constant_flow_solves_the_ode():
    g = DriftQuadratic(DriftFunction.from_expr("0.1*y"), ScalarField("0.05"))
    # -dY = 0.1 Y dt, Y_1 = 2  =>  Y_0 = 2 e^{0.1}
    assert constant_flow(g, np.array([2.0]), 1.0, 0.0, 100)[0] == pytest.approx(2 * np.exp(0.1), rel=1e-10)
    np.testing.assert_array_equal(constant_flow(Entropic(0.5), np.array([1.5]), 1.0, 0.0), [1.5])


def test_two_stage_decomposition_for_time_varying_k():
    # k = 1 on [0, 1/2): early payoff sees the whole nonlinearity, the increment none
    g = TimeVaryingQuadratic("Heaviside(0.5 - t)")
    early = two_stage_value(g, np.tanh, 0.5, "EarlyPayoff", 1.0, FAST)
    late = two_stage_value(g, np.tanh, 0.5, "IncrementPayoff", 1.0, FAST)
    # 0.5 log E exp(2 tanh(W_{1/2})) by adaptive quadrature
    assert early == pytest.approx(0.24998165913647843, abs=1e-4)
    assert abs(late) < 1e-12
    with pytest.raises(ConfigError):
        two_stage_value(g, np.tanh, 0.5, "Other", 1.0, FAST)


def test_early_and_increment_agree_for_pure_quadratic():
    g = PureQuadratic(0.4)
    a = early_value(g, np.tanh, 0.5, 1.0, FAST)
    b = increment_value(g, np.tanh, 0.5, 1.0, 1.0, FAST)
    assert a == pytest.approx(b, abs=1e-5)


def test_zero_drift_audit_and_random_rejection():
    g = DriftQuadratic(DriftFunction.from_expr("0.1*y"), ScalarField("0.05"))
    with pytest.raises(AuditFailure):
        require_zero_drift(g)
    with pytest.raises(VariantMismatch):
        terminal_value(RandomDriftQuadratic(PersistentDrift(0.25), 0.5), np.tanh)


def test_boundary_detector_fires_on_small_box():
    tg = TimeGrid(0.0, 1.0, 50)
    with pytest.raises(DomainTooSmall):
        solve_markov(Entropic(0.5), np.sin, tg, SpatialGrid(-1.0, 1.0, 101))


def test_neumann_boundary_agrees_in_the_interior():
    tg = TimeGrid(0.0, 1.0, 100)
    sg = SpatialGrid.default(1.0, 401)
    a = g_expectation(solve_markov(Entropic(0.5), np.tanh, tg, sg), 0.0)
    b = g_expectation(solve_markov(Entropic(0.5), np.tanh, tg, sg, SchemeParams(boundary="neumann")), 0.0)
    assert a == pytest.approx(b, abs=1e-8)


def test_surface_round_trip_and_apriori_bound(tmp_path):
    tg = TimeGrid(0.0, 1.0, 20)
    vs = solve_markov(Entropic(0.5), np.tanh, tg, SpatialGrid.default(1.0, 81))
    save_surface(vs, tmp_path / "s.bin")
    back = load_surface(tmp_path / "s.bin")
    np.testing.assert_array_equal(back.u, vs.u)
    np.testing.assert_array_equal(back.z_surface, vs.z_surface)
    export_csv(vs, tmp_path / "s.csv")
    assert sum(1 for _ in open(tmp_path / "s.csv")) == 21 * 81 + 1
    assert vs.within_apriori_bound(0.5, 1.0)
    assert apriori_bound(0.5, 1.0, 1.0) >= 1.0
    assert vs.gradient(0.0, 0.0) > 0
