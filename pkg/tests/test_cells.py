import numpy as np
import pytest
from hypothesis import given, strategies as st

from ddlstm.cells import (
    CellState,
    ConfigError,
    StackConfig,
    bnlstm_step,
    ddlstm_step,
    init_params,
    lstm_step,
    new_population_stats,
    sigmoid,
    stack_forward,
    step_batch_stats,
)
from ddlstm.dualnorm import AlphaPair, NormError
from ddlstm.verify import reduction_checks


def _setup(kind, N=5, F=3, H=4, seed=0):
    cfg = StackConfig(1, H, 6, kind)
    (p,), alphas = init_params(cfg, F, seed=seed)
    rng = np.random.default_rng(seed)
    state = CellState(rng.normal(size=(N, H)), rng.normal(size=(N, H)))
    return p, alphas, state, rng.normal(size=(N, F))


def test_lstm_step_by_hand():
    p, _, state, x = _setup("lstm")
    H = p.hidden
    pre = state.h @ p.W_h.T + x @ p.W_x.T + p.b
    f, i, o, g = (pre[:, k * H:(k + 1) * H] for k in range(4))
    c = sigmoid(f) * state.c + sigmoid(i) * np.tanh(g)
    h = sigmoid(o) * np.tanh(c)
    _, out = lstm_step(p, state, x)
    np.testing.assert_allclose(out.c, c, rtol=0, atol=1e-15)
    np.testing.assert_allclose(out.h, h, rtol=0, atol=1e-15)


def test_sigmoid_is_stable_at_extremes():
    v = sigmoid(np.array([-800.0, 0.0, 800.0]))
    assert np.all(np.isfinite(v))
    np.testing.assert_allclose(v, [0.0, 0.5, 1.0])


def test_reduction_suite():
    for r in reduction_checks(trials=30, seed=11):
        assert r.passed, r


@given(st.integers(2, 8), st.integers(0, 2**31))
def test_ddlstm_with_empty_second_domain_is_bnlstm(N, seed):
    p, (a,), state, x = _setup("ddlstm", N=N, seed=seed % 1000)
    _, s1 = ddlstm_step(p, state, x, N, a)
    _, s2 = bnlstm_step(p, state, x)
    assert np.array_equal(s1.h, s2.h) and np.array_equal(s1.c, s2.c)


def test_ddlstm_mixed_batch_differs_from_bnlstm():
    p, (a,), state, x = _setup("ddlstm", N=6)
    x[3:] += 4.0
    _, s1 = ddlstm_step(p, state, x, 3, a)
    _, s2 = bnlstm_step(p, state, x)
    assert not np.allclose(s1.h, s2.h)


def test_infer_without_stats_raises():
    cfg = StackConfig(1, 4, 6, "bnlstm")
    (p,), _ = init_params(cfg, 3)
    stats = new_population_stats(cfg)[0]
    with pytest.raises(NormError, match="not trained"):
        bnlstm_step(p, CellState.zeros(2, 4), np.ones((2, 3)), 1, "infer", stats)


def test_shape_errors():
    p, _, state, x = _setup("lstm")
    with pytest.raises(ConfigError):
        lstm_step(p, state, x[:, :2])


def test_config_validation():
    with pytest.raises(ConfigError):
        StackConfig(0, 4, 5, "lstm").validate()
    with pytest.raises(ConfigError):
        StackConfig(1, 4, 5, "gru").validate()


def test_stack_forward_rejects_long_windows():
    cfg = StackConfig(1, 3, 4, "bnlstm")
    layers, _ = init_params(cfg, 2)
    with pytest.raises(ConfigError):
        stack_forward(cfg, layers, np.zeros((2, 5, 2)))


def test_init_params_shapes_and_defaults():
    cfg = StackConfig(2, 5, 4, "ddlstm")
    layers, alphas = init_params(cfg, 3, alpha_init=0.75)
    assert layers[0].W_x.shape == (20, 3) and layers[1].W_x.shape == (20, 5)
    assert layers[0].W_h.shape == (20, 5)
    assert np.all(layers[0].norm_h.gamma == 0.1) and np.all(layers[0].norm_c.beta == 0.0)
    assert alphas == [AlphaPair(0.75, 0.75)] * 2
    k = 1 / np.sqrt(5)
    assert np.abs(layers[1].W_h).max() <= k


def test_step_batch_stats_shapes():
    p, (a,), state, x = _setup("ddlstm", N=6)
    stats = step_batch_stats("ddlstm", p, state, x, 3, a)
    for site, (m, v) in stats.items():
        assert m.shape[0] == 2 and v.shape == m.shape
        assert np.all(v >= 0)
