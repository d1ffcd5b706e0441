import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from qbsde.stochastic import (LevelExit, ThresholdBranch, TimeGrid, exit_time, exit_times, gauss_hermite,
                              iter_path_blocks, ks_two_sample, load_paths, sample_paths, save_paths,
                              stopped_increment)


def test_grid_index_and_snap():
    g = TimeGrid(0.0, 1.0, 200)
    assert g.dt == pytest.approx(0.005)
    assert g.index(0.25) == 50
    assert g.snap(0.2512) == 50
    with pytest.raises(ValueError):
        g.index(0.2512)


def test_paths_are_reproducible_and_chunk_independent():
    g = TimeGrid(0.0, 1.0, 20)
    a = sample_paths(g, 1, 3000, seed=42)
    b = sample_paths(g, 1, 3000, seed=42)
    np.testing.assert_array_equal(a.values, b.values)
    pieces = np.concatenate([blk.values for blk in iter_path_blocks(g, 1, 3000, 42, chunk=1024)])
    np.testing.assert_array_equal(pieces, a.values)
    c = sample_paths(g, 1, 3000, seed=43)
    assert not np.allclose(c.values, a.values)


def test_paths_start_at_zero_with_brownian_variance():
    g = TimeGrid(0.0, 2.0, 40)
    batch = sample_paths(g, 1, 100_000, seed=1)
    w = batch.coordinate(0)
    np.testing.assert_array_equal(w[:, 0], 0.0)
    # sample variance of W_T within five standard errors of T
    se = 2.0 * np.sqrt(2.0 / w.shape[0])
    assert abs(np.var(w[:, -1]) - 2.0) < 5 * se
    inc = batch.increments()[:, :, 0]
    assert abs(np.mean(inc[:, 5] * inc[:, 6])) < 5 * g.dt / np.sqrt(w.shape[0])


def test_save_load_round_trip(tmp_path):
    batch = sample_paths(TimeGrid(0.0, 1.0, 8), 2, 50, seed=9)
    save_paths(batch, tmp_path / "p.bin")
    back = load_paths(tmp_path / "p.bin")
    np.testing.assert_array_equal(back.values, batch.values)
    assert back.seed == 9 and back.grid.n_steps == 8


def test_gauss_hermite_moments():
    rule = gauss_hermite(40)
    assert rule.expect(lambda x: x**2) == pytest.approx(1.0, abs=1e-13)
    assert rule.expect(lambda x: x**4) == pytest.approx(3.0, abs=1e-12)
    assert rule.expect(np.exp) == pytest.approx(np.exp(0.5), abs=1e-13)
    assert rule.expect(lambda x: x, loc=1.5, scale=2.0) == pytest.approx(1.5, abs=1e-13)


@given(st.floats(-2, 2), st.floats(0.1, 3))
@settings(max_examples=30, deadline=None)
def test_gauss_hermite_exponential_moment(mu, sd):
    assert gauss_hermite(60).expect(np.exp, mu, sd) == pytest.approx(np.exp(mu + sd * sd / 2), rel=1e-12)


def test_threshold_branch_and_level_exit():
    g = TimeGrid(0.0, 1.0, 4)
    paths = np.array([[0.0, 0.2, 1.5, 0.0, 0.0], [0.0, -0.2, 0.1, 0.2, 0.3]])
    tau = exit_times(paths, g, 0.0, ThresholdBranch(0.25, 0.5, 0.75))
    np.testing.assert_array_equal(tau, [0.5, 0.75])
    tau = exit_times(paths, g, 0.0, LevelExit(1.0))
    np.testing.assert_array_equal(tau, [0.5, 1.0])
    assert exit_time(paths[0], g, 0.0, LevelExit(1.0)) == 0.5
    np.testing.assert_allclose(stopped_increment(paths, g, 0.0, 1.0, LevelExit(1.0)), [1.5, 0.3])
    np.testing.assert_allclose(stopped_increment(paths, g, 0.25, 0.5, None), [-0.2, 0.4])


def test_invalid_stopping_specs():
    with pytest.raises(ValueError):
        ThresholdBranch(0.5, 0.4, 0.75)
    with pytest.raises(ValueError):
        LevelExit(0.0)


def test_ks_detects_shift_and_accepts_same_law(rng):
    a, b = rng.standard_normal(20000), rng.standard_normal(20000)
    assert ks_two_sample(a, b)["p_value"] > 0.01
    assert ks_two_sample(a, b + 0.1)["p_value"] < 1e-6
    with pytest.raises(ValueError):
        ks_two_sample([], b)
