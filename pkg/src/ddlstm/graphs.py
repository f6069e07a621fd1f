"""Tape builders for the normalizers, the recurrent stack and the losses.

These express the models with ``diffgraph`` primitives only, so gradients
(including those with respect to alpha) come from the generic reverse pass
rather than the hand-written kernels. Leaf names follow
``Model.named_parameters``: ``layer{l}.W_h``, ``layer{l}.gamma_h``, ...,
``head.W``, ``head.b``. Vector parameters are 1xF rows on the tape.
"""

from __future__ import annotations

import numpy as np

from .diffgraph import Tape


def _row(tape, values):
    return tape.const(np.asarray(values, dtype=np.float64).reshape(1, -1))


def _weighted_mean(tape, w_row, x):
    """(w @ x) / sum(w) as a 1xF node."""
    inv_s = tape.div(tape.const(np.ones((1, 1))), tape.sum(w_row))
    return tape.matmul(inv_s, tape.matmul(w_row, x))


def _normalize(tape, dev, var, gamma, beta, eps, n):
    ones = tape.fill_like(var, 1.0)
    inv = tape.div(ones, tape.sqrt(tape.add(var, tape.fill_like(var, eps))))
    scaled = tape.mul(dev, tape.broadcast_rows(tape.mul(gamma, inv), n))
    return tape.add(scaled, tape.broadcast_rows(beta, n))


def bn_graph(tape: Tape, x, n, gamma, beta, eps=1e-5):
    """Plain batch norm of node x (n rows) with population variance."""
    mean = tape.mean(x, axis=0)
    dev = tape.sub(x, tape.broadcast_rows(mean, n))
    var = tape.mean(tape.mul(dev, dev), axis=0)
    return _normalize(tape, dev, var, gamma, beta, eps, n)


def tau_graph(tape: Tape, alpha1, alpha2, n):
    """Contribution weight rows (1xN each) as functions of the alpha leaves."""
    j = np.arange(1, n + 1, dtype=np.float64)
    n_row = _row(tape, np.full(n, float(n)))
    half = _row(tape, np.full(n, 0.5))
    one = _row(tape, np.ones(n))
    u1 = tape.sub(_row(tape, j), tape.matmul(alpha1, n_row))
    u2 = tape.sub(_row(tape, n - j), tape.matmul(alpha2, n_row))
    tau1 = tape.mul(half, tape.sub(one, tape.tanh(u1)))
    tau2 = tape.mul(half, tape.sub(one, tape.tanh(u2)))
    return tau1, tau2


def ddbn_graph(tape: Tape, x, n, n1, gamma, beta, alpha1, alpha2, eps=1e-5):
    """Dual-domain batch norm: rows < n1 use domain-1 weighted statistics,
    the rest domain-2. Single-domain batches fall back to `bn_graph`."""
    if n1 in (0, n):
        return bn_graph(tape, x, n, gamma, beta, eps)
    blocks = []
    for tau, (lo, hi) in zip(tau_graph(tape, alpha1, alpha2, n), ((0, n1), (n1, n))):
        mean = _weighted_mean(tape, tau, x)
        dev = tape.sub(x, tape.broadcast_rows(mean, n))
        var = _weighted_mean(tape, tau, tape.mul(dev, dev))
        blocks.append(_normalize(tape, tape.slice(dev, rows=(lo, hi)), var, gamma, beta, eps,
                                 hi - lo))
    return tape.concat(blocks, axis=0)


def cell_graph(tape: Tape, kind, l, h, c, x_t, n, n1, hidden, eps=1e-5):
    """One step of layer l; returns (h, c) nodes."""
    p = f"layer{l}."
    ah = tape.matmul(h, tape.transpose(tape.leaf(p + "W_h")))
    ax = tape.matmul(x_t, tape.transpose(tape.leaf(p + "W_x")))
    if kind != "lstm":
        g = {s: (tape.leaf(p + "gamma_" + s), tape.leaf(p + "beta_" + s)) for s in "hxc"}
    if kind == "ddlstm":
        a1, a2 = tape.leaf(p + "alpha1"), tape.leaf(p + "alpha2")
        ah = ddbn_graph(tape, ah, n, n1, *g["h"], a1, a2, eps)
        ax = ddbn_graph(tape, ax, n, n1, *g["x"], a1, a2, eps)
    elif kind == "bnlstm":
        ah = bn_graph(tape, ah, n, *g["h"], eps)
        ax = bn_graph(tape, ax, n, *g["x"], eps)
    pre = tape.add(tape.add(ah, ax), tape.broadcast_rows(tape.leaf(p + "b"), n))
    H = hidden
    f = tape.sigmoid(tape.slice(pre, cols=(0, H)))
    i = tape.sigmoid(tape.slice(pre, cols=(H, 2 * H)))
    o = tape.sigmoid(tape.slice(pre, cols=(2 * H, 3 * H)))
    gg = tape.tanh(tape.slice(pre, cols=(3 * H, 4 * H)))
    c_new = tape.add(tape.mul(f, c), tape.mul(i, gg))
    cn = c_new if kind == "lstm" else bn_graph(tape, c_new, n, *g["c"], eps)
    return tape.mul(o, tape.tanh(cn)), c_new


def stack_graph(tape: Tape, kind, x, layers, hidden, n1=None, eps=1e-5):
    """Build the stack over x of shape (N, T, F) (constants on the tape).

    Returns the top-layer hidden nodes, one N x H node per timestep.
    """
    N, T, _ = x.shape
    n1 = N if n1 is None else n1
    inputs = [tape.const(x[:, t]) for t in range(T)]
    for l in range(layers):
        h = tape.const(np.zeros((N, hidden)))
        c = tape.const(np.zeros((N, hidden)))
        outs = []
        for t in range(T):
            h, c = cell_graph(tape, kind, l, h, c, inputs[t], N, n1, hidden, eps)
            outs.append(h)
        inputs = outs
    return inputs


def ce_graph(tape: Tape, logits, targets, num_labels):
    """Sum over rows of -log softmax(logits)[target] as a 1x1 node."""
    t = np.asarray(targets, dtype=np.int64)
    onehot = np.zeros((len(t), num_labels))
    onehot[np.arange(len(t)), t] = 1.0
    lse = tape.log(tape.sum(tape.exp(logits), axis=1))
    picked = tape.sum(tape.mul(logits, tape.const(onehot)), axis=1)
    return tape.sum(tape.sub(lse, picked))


def model_loss_graph(tape: Tape, kind, x, targets, layers, hidden, num_labels, n1=None,
                     eps=1e-5):
    """Mean per-frame cross-entropy of the stack plus linear head.

    x: (N, T, F) array, targets: (N, T) int array. Returns the loss node.
    """
    N, T, _ = x.shape
    tops = stack_graph(tape, kind, x, layers, hidden, n1, eps)
    W_T = tape.transpose(tape.leaf("head.W"))
    b = tape.leaf("head.b")
    total = None
    for t, h in enumerate(tops):
        logits = tape.add(tape.matmul(h, W_T), tape.broadcast_rows(b, N))
        term = ce_graph(tape, logits, targets[:, t], num_labels)
        total = term if total is None else tape.add(total, term)
    return tape.scale(total, 1.0 / (N * T))


def gaussian_kl_graph(tape: Tape, pred_mu, pred_sigma, target_mu, target_sigma):
    """Mean over rows of KL(N(target) || N(pred)); all inputs M x 1 nodes."""
    d = tape.sub(target_mu, pred_mu)
    num = tape.add(tape.mul(target_sigma, target_sigma), tape.mul(d, d))
    den = tape.scale(tape.mul(pred_sigma, pred_sigma), 2.0)
    kl = tape.add(tape.log(tape.div(pred_sigma, target_sigma)), tape.div(num, den))
    return tape.mean(tape.sub(kl, tape.fill_like(kl, 0.5)))
