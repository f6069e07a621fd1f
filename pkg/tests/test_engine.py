"""Fused kernels against the step-by-step reference cells and the tape."""

import numpy as np
import pytest

from ddlstm import diffgraph as dg
from ddlstm import engine, graphs
from ddlstm.cells import StackConfig, stack_forward
from ddlstm.model import Model, alpha_limits
from ddlstm.training import softmax_ce_loss
from ddlstm.verify import check_engine, check_stack_sum


def _model(kind, N=6, T=5, F=3, H=4, L=3, seed=0):
    m = Model.create(StackConfig(2, H, T, kind), F, L, seed=seed)
    rng = np.random.default_rng(seed)
    for p in m.layers:
        for norm in (p.norm_h, p.norm_x, p.norm_c):
            norm.gamma[:] = rng.uniform(0.5, 1.5, norm.gamma.shape)
            norm.beta[:] = rng.normal(size=norm.beta.shape) * 0.1
    for l in range(len(m.alphas)):
        m.set_alpha(l, 1, 0.7)
        m.set_alpha(l, 2, 0.9)
    return m, rng.normal(size=(N, T, F)), rng.integers(0, L, size=(N, T))


@pytest.mark.parametrize("kind", ["lstm", "bnlstm", "ddlstm"])
@pytest.mark.parametrize("n1", [3, 6])
def test_train_forward_matches_reference(kind, n1):
    m, x, _ = _model(kind)
    fwd = m.forward(x, n1)
    ref = stack_forward(m.config, m.layers, x, n1, alphas=m.alphas)
    np.testing.assert_allclose(fwd.hidden[-1].transpose(1, 0, 2), ref, rtol=1e-12, atol=1e-12)


@pytest.mark.parametrize("kind", ["bnlstm", "ddlstm"])
def test_infer_forward_matches_reference(kind):
    m, x, _ = _model(kind)
    for _ in range(3):
        m.update_population(m.forward(x, 3), 3, 6)
    dom = np.array([1, 2, 1, 2, 2, 1])
    got = m.forward(x, train=False, domain=dom).hidden[-1].transpose(1, 0, 2)
    ref = stack_forward(m.config, m.layers, x, 3, mode="infer", stats=m.stats, domain=dom)
    np.testing.assert_allclose(got, ref, rtol=1e-12, atol=1e-12)


def test_infer_before_training_raises():
    m, x, _ = _model("bnlstm")
    with pytest.raises(ValueError, match="not trained"):
        m.predict_logits(x, 1)


def test_infer_past_history_reuses_last_slot():
    m, x, _ = _model("bnlstm", T=5)
    m.update_population(m.forward(x), 6, 6)
    long = np.concatenate([x, x], axis=1)
    assert m.predict_logits(long, 1).shape == (6, 10, 3)


@pytest.mark.parametrize("kind", ["lstm", "bnlstm", "ddlstm"])
def test_backward_matches_tape(kind):
    m, x, y = _model(kind, N=4, T=3, H=3)
    n1 = 2 if kind == "ddlstm" else 4
    fwd = m.forward(x, n1)
    loss, dl = softmax_ce_loss(fwd.logits, y.T, return_grad=True)
    grads = m.backward(fwd, dl, n1)
    tape = dg.Tape()
    node = graphs.model_loss_graph(tape, kind, x, y, 2, 3, 3, n1=n1)
    leaves = {k: v for k, v in m.named_parameters() if k in tape.leaves}
    vals = dg.evaluate(tape, leaves)
    assert vals[node].item() == pytest.approx(loss, rel=1e-12)
    tg = dg.gradient(tape, leaves, node)
    for name, g in tg.items():
        np.testing.assert_allclose(np.ravel(grads[name]), np.ravel(g), rtol=1e-9, atol=1e-12,
                                   err_msg=name)


def test_engine_gradient_checks():
    for r in check_engine(seed=8):
        assert r.passed, r
    assert check_stack_sum(seed=9).passed


def test_vexp_accuracy():
    x = np.linspace(-700, 700, 200001)
    out = np.empty_like(x)
    engine.vexp(x, out)
    np.testing.assert_allclose(out, np.exp(x), rtol=4e-16 * 8)


def test_alpha_limits():
    assert alpha_limits(8, 32) == (0.25, 0.75)
