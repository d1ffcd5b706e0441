import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from qbsde.errors import AuditFailure, ClosedFormUnavailable, ConfigError
from qbsde.generators import (CustomGenerator, Entropic, IndicatorWindow, ItoWentzell, PersistentDrift,
                              PureQuadratic, RandomDriftQuadratic, SignedWindow, TimeVaryingQuadratic)
from qbsde.functions import DriftFunction, ScalarField
from qbsde.generators import DriftQuadratic
from qbsde.lab import (IdentityReport, MCConfig, PayoffPair, brownian_invariance_check, clli_gap, cons1_check,
                       gamma_oracle, gap_detail, gateaux_check, ito_wentzell_check, li_gap, mli_gap,
                       quadratic_homogeneity_check, representation_slope, write_gap_matrix)
from qbsde.pde_solver import SolverConfig
from qbsde.risk import MarkovPayoff
from qbsde.stochastic import ThresholdBranch, TimeGrid, ks_two_sample, sample_paths

FAST = SolverConfig(steps_per_unit=100, n_x=401)
ZERO = CustomGenerator(lambda t, y, z: 0.0 * np.asarray(z), lambda t, y, z: 0.0 * np.asarray(z),
                       lambda t, y, z: 0.0 * np.asarray(z), name="zero")


def test_identity_report_verdict_and_export(tmp_path):
    rep = IdentityReport("demo", [1.0, 2.0], [1.0, 2.5], tolerance=0.4, seed=3)
    assert rep.sup_gap == pytest.approx(0.5) and rep.mean_gap == pytest.approx(0.25)
    assert rep.verdict == "fail"
    rep.write_json(tmp_path / "r.json")
    d = json.load(open(tmp_path / "r.json"))
    assert d["verdict"] == "fail" and d["seed"] == 3
    rep.write_csv(tmp_path / "r.csv")
    assert len(open(tmp_path / "r.csv").read().splitlines()) == 3
    write_gap_matrix([("Entropic", "Reflection", "li", 1e-9, 1e-6)], tmp_path / "m.csv")
    assert open(tmp_path / "m.csv").read().splitlines()[1].endswith("pass")


@pytest.mark.parametrize("pair", [PayoffPair.reflection(np.tanh), PayoffPair.increment_shift(np.tanh, 0.4),
                                  PayoffPair.branch_swap(1.0, 0.5)])
def test_pairs_are_equal_in_law(pair):
    batch = sample_paths(TimeGrid(0.0, 1.0, 20), 1, 100_000, seed=21)
    x, xp = pair.sample(batch)
    assert ks_two_sample(x, xp)["p_value"] > 0.01
    X, Xp = pair.payoffs()
    assert X.expect() == pytest.approx(Xp.expect(), abs=1e-12)


def test_pair_validation_and_horizon():
    with pytest.raises(ConfigError):
        PayoffPair("Rotation", np.tanh)
    with pytest.raises(ConfigError):
        PayoffPair.increment_shift(np.tanh, 1.5)
    pair = PayoffPair.branch_swap(1.0, 0.5)
    assert pair.at_horizon(0.75).T == 0.75
    with pytest.raises(ConfigError):
        pair.at_horizon(0.4)


@pytest.mark.parametrize("pair", [PayoffPair.reflection(np.tanh), PayoffPair.increment_shift(np.tanh, 0.5),
                                  PayoffPair.branch_swap(1.0, 0.5)])
def test_linear_expectation_has_no_gap(pair):
    assert li_gap(ZERO, pair, FAST) <= 1e-6


def test_pure_quadratic_li_and_time_varying_failure():
    assert li_gap(PureQuadratic(0.4), PayoffPair.reflection(np.tanh), FAST) <= 1e-10
    tv = TimeVaryingQuadratic("Heaviside(0.5 - t)")
    d = gap_detail(tv, PayoffPair.increment_shift(np.tanh, 0.5), cfg=FAST)
    # Jensen oracle 0.5 log E exp(2 tanh(W_{1/2})) - E tanh(W_{1/2}) by adaptive quadrature
    assert d["gap"] == pytest.approx(0.24998165913647843, rel=1e-3)
    assert d["engine"] == "PDE"


def test_mli_requires_zero_drift():
    assert mli_gap(PureQuadratic(0.4), np.tanh, 0.5, 1.0, cfg=FAST) <= 1e-10
    dq = DriftQuadratic(DriftFunction.from_expr("0.1*y"), ScalarField("0.05"))
    with pytest.raises(AuditFailure):
        mli_gap(dq, np.tanh, 0.5, 1.0, cfg=FAST)
    with pytest.raises(ConfigError):
        mli_gap(RandomDriftQuadratic(PersistentDrift(0.25), 0.5), np.tanh, 0.5, 1.0)


def test_clli_measurability_and_entropic():
    pair = PayoffPair.increment_shift(np.tanh, 0.5)
    with pytest.raises(ConfigError):
        clli_gap(Entropic(0.5), pair, 0.25, FAST)
    assert clli_gap(Entropic(0.5), pair, 0.75, FAST) <= 1e-6


def test_random_drift_monte_carlo_small_run():
    g = RandomDriftQuadratic(IndicatorWindow(ThresholdBranch(0.25, 0.5, 0.75), 0.1), 0.5)
    pair = PayoffPair.branch_swap(1.0, 0.25)
    mc = MCConfig(n_paths=100_000, n_steps=20, seed=99)
    full = gap_detail(g, pair, None, mc=mc)
    assert full["gap"] <= 3 * full["se"] + 1e-12
    early = gap_detail(g, pair, 0.65, mc=mc)
    # branch closed form |(1/2b) log(e^{2b(c+e)}/2 + 1/2) - (1/2b) log(e^{2bc}/2 + e^{2be}/2)|
    assert abs(early["gap"] - 0.0461814503833432) <= 3 * early["se"]
    again = gap_detail(g, pair, 0.65, mc=mc)
    assert again["gap"] == early["gap"]


def test_representation_slopes():
    rep = representation_slope(Entropic(0.5), 0.0, 0.3, 1.3, [0.1, 0.05], tol=1e-8)
    assert rep.verdict == "pass"
    np.testing.assert_allclose(rep.extra["slopes"], 0.5 * 1.3**2, atol=1e-8)
    rep = representation_slope(ZERO, 0.0, 0.3, 1.3, [0.1, 0.05], cfg=FAST)
    np.testing.assert_allclose(rep.extra["slopes"], 0.0, atol=1e-8)
    with pytest.raises(ConfigError):
        representation_slope(Entropic(0.5), 0.0, 0.0, 1.0, [0.05, 0.1])


def test_gateaux_constant_payoff_and_gamma():
    c = MarkovPayoff.constant(0.7)
    rep = gateaux_check(Entropic(0.5), 0.0, c, [0.2, 0.1])
    np.testing.assert_allclose(rep.extra["slopes"], 0.7, atol=1e-12)
    dq = DriftQuadratic(DriftFunction.from_expr("0.1*y"), ScalarField("0.05*exp(0.1*t)"))
    assert gamma_oracle(dq, 0.5) == pytest.approx(np.exp(0.1), rel=1e-12)


def test_cons1_variants():
    paths = sample_paths(TimeGrid(0.0, 1.0, 100), 1, 4000, seed=5)
    for g in (Entropic(0.5), PureQuadratic("0.4 - 0.1*tanh(y)"), RandomDriftQuadratic(SignedWindow(0.25), 0.5),
              ItoWentzell("t*(1 - t)", "sin(x)")):
        assert cons1_check(g, 0.2, paths).sup_gap <= 1e-6
    ctrl = cons1_check(RandomDriftQuadratic(PersistentDrift(0.25), 0.5), 0.0, paths)
    assert ctrl.sup_gap >= 0.05
    with pytest.raises(ClosedFormUnavailable):
        cons1_check(CustomGenerator(lambda t, y, z: z * z), 0.0, paths)


def test_cons1_drift_quadratic_normalizes_the_density():
    """Deterministic drift: theta = 0 so the left side is 1 and the right side D / E[D] = 1 too."""
    paths = sample_paths(TimeGrid(0.0, 1.0, 50), 1, 200, seed=6)
    dq = DriftQuadratic(DriftFunction.from_expr("0.1*y"), ScalarField("0.05*exp(0.1*t)"))
    assert cons1_check(dq, 1.0, paths).sup_gap <= 1e-12


def test_homogeneity():
    assert quadratic_homogeneity_check(PureQuadratic("0.4 - 0.1*tanh(y)")).sup_gap == 0.0
    assert quadratic_homogeneity_check(Entropic(0.5)).sup_gap == 0.0
    rep = quadratic_homogeneity_check(CustomGenerator(lambda t, y, z: np.abs(z) ** 1.5))
    assert rep.verdict == "fail" and rep.sup_gap > 0.1


@given(st.floats(0.05, 2.0), st.sampled_from([-1.0, 1.0]), st.floats(-3, 3), st.floats(-3, 3))
@settings(max_examples=50, deadline=None)
def test_homogeneity_property_for_random_lambda(lam, o, y, z):
    g = PureQuadratic("0.4 - 0.1*tanh(y)")
    assert g(0.0, y, lam * o * z) == pytest.approx(lam**2 * g(0.0, y, z), rel=1e-13, abs=1e-15)


def test_brownian_invariance_small_sample():
    rep = brownian_invariance_check(1.0, 1, 1.0, 0.2, 0.4, 0.4, n_paths=20_000, seed=3)
    assert rep.verdict == "pass"
    with pytest.raises(ConfigError):
        brownian_invariance_check(0.5, 2, 1.0, 0.2, 0.4, 0.1)


def test_ito_wentzell_value_and_endpoint():
    res = ito_wentzell_check(ItoWentzell("t*(1 - t)", "sin(x)"), "tanh(x)", 50, n_paths=2000, base_steps=100)
    assert res["entropic"] == pytest.approx(0.1889260589705691, abs=1e-9)
    assert res["value_gap"] < 5e-3
    d = gap_detail(ItoWentzell("t*(1 - t)", "sin(x)"), PayoffPair.reflection(np.tanh))
    assert d["gap"] == 0.0 and d["value_X"] == pytest.approx(0.1889260589705691, abs=1e-9)
    with pytest.raises(ConfigError):
        ito_wentzell_check(ItoWentzell("t*(1 - t)", "sin(x)"), "tanh(x)", 3, base_steps=100)
