import numpy as np
import pytest
from hypothesis import given, strategies as st

from ddlstm.dualnorm import (
    AlphaPair,
    NormError,
    NormalizerParams,
    PopulationStats,
    alpha_bounds,
    batch_norm,
    contribution_d1,
    contribution_d2,
    contribution_weights,
    dd_batch_norm,
    dd_expectation,
    dd_stats,
    dd_variance,
    inference_norm,
    update_population,
)
from ddlstm.verify import check_batch_norms, stats_checks


def _brute(x, w):
    m = sum(w[j] * x[j] for j in range(len(w))) / sum(w)
    v = sum(w[j] * (x[j] - m) ** 2 for j in range(len(w))) / sum(w)
    return m, v


def test_tau1_hand_values():
    # N=4, alpha1=0.5: u = j - 2
    j = np.arange(1, 5)
    expected = (1 - np.tanh(np.array([-1.0, 0.0, 1.0, 2.0]))) / 2
    np.testing.assert_allclose(contribution_d1(0.5, j, 4), expected, rtol=0, atol=1e-15)
    assert contribution_d1(0.5, 2, 4) == 0.5


def test_tau2_is_increasing_and_tau1_decreasing():
    t1, t2 = contribution_weights(AlphaPair(0.6, 0.6), 20)
    assert np.all(np.diff(t1) < 0) and np.all(np.diff(t2) > 0)


@given(st.integers(2, 64), st.floats(0, 1), st.integers(0, 64))
def test_mirror_identity_exact(N, alpha, j):
    assert contribution_d2(alpha, j, N) == contribution_d1(alpha, N - j, N)


def test_stats_oracle_suite_passes():
    for r in stats_checks(seed=5, slices=200):
        assert r.passed, r


@given(st.integers(2, 12), st.integers(1, 4), st.integers(0, 2**31))
def test_weighted_stats_match_brute_force(N, F, seed):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(N, F)) * rng.uniform(0.1, 10)
    w = rng.uniform(0.01, 1, size=N)
    m = dd_expectation(x, w)
    v = dd_variance(x, m, w)
    bm, bv = _brute(x, w)
    np.testing.assert_allclose(m, bm, rtol=1e-12, atol=1e-12)
    np.testing.assert_allclose(v, bv, rtol=1e-12, atol=1e-12)
    assert np.all(v >= 0)


def test_uniform_weights_give_plain_stats(rng):
    x = rng.normal(size=(7, 3))
    m = dd_expectation(x, np.ones(7))
    np.testing.assert_allclose(m, x.mean(0))
    np.testing.assert_allclose(dd_variance(x, m, np.ones(7)), x.var(0))


def test_bad_weights_rejected(rng):
    x = rng.normal(size=(4, 2))
    with pytest.raises(NormError):
        dd_expectation(x, np.zeros(4))
    with pytest.raises(NormError):
        dd_expectation(x, np.ones(3))
    with pytest.raises(NormError):
        dd_expectation(x, np.array([1.0, -1, 1, 1]))


def test_batch_norm_normalizes(rng):
    x = rng.normal(3, 2, size=(500, 4))
    p = NormalizerParams.default(4, gamma=1.0)
    y = batch_norm(x, p)
    np.testing.assert_allclose(y.mean(0), 0, atol=1e-12)
    np.testing.assert_allclose(y.var(0), 1, atol=1e-4)


def test_batch_norm_needs_two_samples():
    with pytest.raises(NormError):
        batch_norm(np.ones((1, 3)), NormalizerParams.default(3))


@pytest.mark.parametrize("n1", [0, 6])
def test_single_domain_batch_is_plain_bn(rng, n1):
    x = rng.normal(size=(6, 5))
    p = NormalizerParams.default(5)
    assert np.array_equal(dd_batch_norm(x, p, AlphaPair(0.3, 0.9), n1), batch_norm(x, p))


def test_each_row_uses_its_own_domain(rng):
    x = rng.normal(size=(8, 3))
    x[4:] += 5.0
    a = AlphaPair(0.5, 0.5)
    p = NormalizerParams.default(3, gamma=1.0)
    y = dd_batch_norm(x, p, a, 4)
    mean, var = dd_stats(x, 4, a)
    np.testing.assert_allclose(y[:4], (x[:4] - mean[0]) / np.sqrt(var[0] + p.epsilon))
    np.testing.assert_allclose(y[4:], (x[4:] - mean[1]) / np.sqrt(var[1] + p.epsilon))
    # mostly-own-domain weighting keeps the shifted domain centered near zero
    assert abs(y[4:].mean()) < 0.5


def test_alpha_one_weights_whole_batch_almost_uniformly():
    t1, _ = contribution_weights(AlphaPair(1.0, 1.0), 32)
    assert t1.min() == 0.5 and t1[:-1].min() > 0.5


def test_alpha_bounds_and_check():
    assert alpha_bounds(3, 4) == (0.75, 0.25)
    AlphaPair(0.75, 0.3).check(3, 4)
    with pytest.raises(NormError):
        AlphaPair(0.7, 0.3).check(3, 4)
    assert AlphaPair(0.1, 1.4).clamped(3, 4) == AlphaPair(0.75, 1.0)


def test_ddbn_gradients():
    for r in check_batch_norms(seed=7):
        assert r.passed, r


def test_population_ema_and_last_slot_reuse():
    st_ = PopulationStats(3, {"cell": 2})
    for _ in range(2):
        update_population(st_, 1, 3, "cell", np.array([1.0, 2.0]), np.array([4.0, 4.0]), 0.5)
    m, v = st_.slot(1, 3, "cell")
    np.testing.assert_allclose(m, [0.75, 1.5])
    np.testing.assert_allclose(v, [3.25, 3.25])
    m9, _ = st_.slot(1, 9, "cell")
    assert np.array_equal(m9, m)
    with pytest.raises(NormError, match="not trained"):
        st_.slot(2, 3, "cell")


def test_update_block_matches_per_slot_updates(rng):
    a, b = PopulationStats(4, {"x": 3}), PopulationStats(4, {"x": 3})
    bm, bv = rng.normal(size=(3, 3)), rng.uniform(0.1, 2, size=(3, 3))
    a.update_block(2, "x", bm, bv, 0.1)
    for t in range(3):
        update_population(b, 2, t + 1, "x", bm[t], bv[t], 0.1)
    np.testing.assert_allclose(a.mean["x"], b.mean["x"], rtol=0, atol=1e-15)
    np.testing.assert_allclose(a.var["x"], b.var["x"], rtol=0, atol=1e-15)
    assert np.array_equal(a.count["x"], b.count["x"])


def test_population_rejects_bad_input():
    st_ = PopulationStats(2, {"h": 1})
    with pytest.raises(NormError):
        update_population(st_, 1, 1, "h", [0.0], [-1.0])
    with pytest.raises(NormError):
        update_population(st_, 3, 1, "h", [0.0], [1.0])
    with pytest.raises(NormError):
        update_population(st_, 1, 1, "h", [0.0], [1.0], momentum=0)


def test_inference_norm_uses_flagged_domain():
    st_ = PopulationStats(1, {"h": 1})
    update_population(st_, 1, 1, "h", [0.0], [1.0], 1.0)
    update_population(st_, 2, 1, "h", [10.0], [4.0], 1.0)
    p = NormalizerParams(np.ones(1), np.zeros(1), 1e-12)
    assert inference_norm(np.array([[10.0]]), st_, 2, 1, "h", p)[0, 0] == 0.0
    assert inference_norm(np.array([[10.0]]), st_, 1, 1, "h", p)[0, 0] == pytest.approx(10.0)
