"""Trainable sequence classifier: a cell stack, a linear output head and
per-layer population statistics, driven by the fused kernels."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import engine
from .cells import StackConfig, init_params, new_population_stats
from .dualnorm import (
    AlphaPair,
    NormError,
    PopulationStats,
    alpha_bounds,
    contribution_weights,
)

_MODES = {"lstm": engine.MODE_LSTM, "bnlstm": engine.MODE_BN, "ddlstm": engine.MODE_DDBN}


@dataclass
class ForwardResult:
    logits: np.ndarray  # (T, N, L)
    hidden: list  # per layer (T, N, H)
    caches: list
    inputs: list  # per layer input (T, N, F)
    batch_stats: list  # per layer dict site -> (mean (T,2,W), var (T,2,W))


class Model:
    def __init__(self, config: StackConfig, input_dim, output_dim, layers, alphas, W_out, b_out,
                 stats=None, label_layout=(0, 0), epsilon=1e-5):
        self.config = config
        self.input_dim = int(input_dim)
        self.output_dim = int(output_dim)
        self.layers = layers
        self.alphas = alphas
        self.W_out = W_out
        self.b_out = b_out
        self.stats = stats if stats is not None else new_population_stats(config)
        self.label_layout = tuple(int(v) for v in label_layout)
        self.epsilon = epsilon
        self.aux = None  # optional boundary-prediction model feeding extra features

    @classmethod
    def create(cls, config: StackConfig, input_dim, output_dim, seed=0, alpha_init=0.75,
               label_layout=None, gamma=0.1, beta=0.0, epsilon=1e-5):
        layers, alphas = init_params(config, input_dim, seed, alpha_init, gamma, beta, epsilon)
        config.alphas = alphas
        config.validate()
        rng = np.random.default_rng([seed, 1])
        k = 1.0 / np.sqrt(config.hidden)
        W_out = rng.uniform(-k, k, size=(output_dim, config.hidden))
        b_out = np.zeros(output_dim)
        layout = label_layout if label_layout is not None else (output_dim, 0)
        return cls(config, input_dim, output_dim, layers, alphas, W_out, b_out,
                   label_layout=layout, epsilon=epsilon)

    @property
    def mode(self):
        return _MODES[self.config.cell_kind]

    def resize_head(self, output_dim, label_layout, seed):
        """Fresh output projection for a new label count; the stack is kept."""
        rng = np.random.default_rng([seed, 2])
        k = 1.0 / np.sqrt(self.config.hidden)
        self.W_out = rng.uniform(-k, k, size=(output_dim, self.config.hidden))
        self.b_out = np.zeros(output_dim)
        self.output_dim = int(output_dim)
        self.label_layout = tuple(int(v) for v in label_layout)

    # ------------------------------------------------------------------
    # parameters
    # ------------------------------------------------------------------

    def named_parameters(self, include_norm=True):
        """(name, array) pairs; alphas appear as 1-element arrays (copies)."""
        out = []
        for l, p in enumerate(self.layers):
            out += [(f"layer{l}.W_h", p.W_h), (f"layer{l}.W_x", p.W_x), (f"layer{l}.b", p.b)]
            if include_norm:
                for site, np_ in (("h", p.norm_h), ("x", p.norm_x), ("c", p.norm_c)):
                    out += [(f"layer{l}.gamma_{site}", np_.gamma), (f"layer{l}.beta_{site}", np_.beta)]
            if self.alphas:
                a = self.alphas[l]
                out += [(f"layer{l}.alpha1", np.array([a.alpha1])),
                        (f"layer{l}.alpha2", np.array([a.alpha2]))]
        out += [("head.W", self.W_out), ("head.b", self.b_out)]
        return out

    def set_alpha(self, layer, which, value):
        a = self.alphas[layer]
        if which == 1:
            self.alphas[layer] = AlphaPair(float(value), a.alpha2)
        else:
            self.alphas[layer] = AlphaPair(a.alpha1, float(value))
        self.config.alphas = self.alphas

    # ------------------------------------------------------------------
    # forward / backward
    # ------------------------------------------------------------------

    def _weights(self, layer, n1, N):
        mode = self.mode
        if mode == engine.MODE_DDBN and 0 < n1 < N:
            tau1, tau2 = contribution_weights(self.alphas[layer], N)
            return n1, tau1 / tau1.sum(), tau2 / tau2.sum(), (tau1, tau2)
        uni = np.full(N, 1.0 / N)
        return N, uni, uni, None

    def forward(self, x, n1=None, train=True, domain=None):
        """x: (N, T, F). Training uses batch statistics with the first n1 rows
        from domain 1; inference uses population statistics selected per row
        by `domain` (values 1 or 2)."""
        x = np.asarray(x, dtype=np.float64)
        N, T, F = x.shape
        if F != self.input_dim:
            raise ValueError(f"feature dim {F} != model input dim {self.input_dim}")
        if train and T > self.config.history:
            raise ValueError(f"window length {T} exceeds history {self.config.history}")
        if n1 is None:
            n1 = N
        if not train and self.mode != engine.MODE_LSTM:
            self._check_trained(domain, T)
        if domain is None:
            domain = np.where(np.arange(N) < n1, 1, 2)
        dom = np.ascontiguousarray(np.broadcast_to(np.asarray(domain) - 1, (N,)), dtype=np.int64)
        inp = np.ascontiguousarray(x.transpose(1, 0, 2))
        hidden, caches, inputs, stats_out = [], [], [], []
        for l, p in enumerate(self.layers):
            AX = (inp.reshape(-1, inp.shape[-1]) @ p.W_x.T).reshape(T, N, -1)
            n1_eff, w1, w2, _ = self._weights(l, n1, N)
            pop_mu, pop_var = _pop_arrays(self.stats[l]) if not train else _NO_POP
            cache = engine.layer_forward(
                AX, p.W_h, p.b, p.norm_h.gamma, p.norm_h.beta, p.norm_x.gamma, p.norm_x.beta,
                p.norm_c.gamma, p.norm_c.beta, self.mode, n1_eff, w1, w2, self.epsilon,
                train, pop_mu, pop_var, dom)
            inputs.append(inp)
            caches.append((AX, cache))
            out = cache[0][1:]
            hidden.append(out)
            if train and self.mode != engine.MODE_LSTM:
                _, _, _, _, _, mu_h, var_h, _, mu_x, var_x, _, mu_c, var_c, _ = cache
                stats_out.append({"hidden": (mu_h, var_h), "input": (mu_x, var_x),
                                  "cell": (mu_c, var_c)})
            inp = out
        logits = (inp.reshape(T * N, -1) @ self.W_out.T + self.b_out).reshape(T, N, -1)
        return ForwardResult(logits, hidden, caches, inputs, stats_out)

    def _check_trained(self, domain, T):
        flags = np.unique(np.asarray(domain)) if domain is not None else (1,)
        steps = min(T, self.config.history)
        for st in self.stats:
            for site in st.count:
                for d in flags:
                    if int(d) not in (1, 2):
                        raise NormError(f"unknown domain flag {d}")
                    if np.any(st.count[site][int(d) - 1, :steps] == 0):
                        raise NormError(f"model not trained at this site (domain={int(d)}, "
                                        f"site={site})")

    def backward(self, fwd: ForwardResult, dlogits, n1):
        """Gradients for every parameter of `named_parameters()` (by name)."""
        N = dlogits.shape[1]
        grads = {}
        top = fwd.hidden[-1]
        G = dlogits.reshape(-1, dlogits.shape[-1])
        grads["head.W"] = G.T @ top.reshape(-1, top.shape[-1])
        grads["head.b"] = G.sum(axis=0)
        T = dlogits.shape[0]
        dH = (G @ self.W_out).reshape(T, N, -1)
        for l in range(len(self.layers) - 1, -1, -1):
            p = self.layers[l]
            AX, cache = fwd.caches[l]
            n1_eff, w1, w2, taus = self._weights(l, n1, N)
            dAX, dWh, db, dgh, dbh, dgx, dbx, dgc, dbc, dw1, dw2 = engine.layer_backward(
                np.ascontiguousarray(dH), AX, p.W_h, p.norm_h.gamma, p.norm_x.gamma,
                p.norm_c.gamma, self.mode, n1_eff, w1, w2, cache)
            inp = fwd.inputs[l]
            grads[f"layer{l}.W_h"] = dWh
            grads[f"layer{l}.W_x"] = dAX.reshape(-1, dAX.shape[-1]).T @ inp.reshape(-1, inp.shape[-1])
            grads[f"layer{l}.b"] = db
            for site, g, b_ in (("h", dgh, dbh), ("x", dgx, dbx), ("c", dgc, dbc)):
                grads[f"layer{l}.gamma_{site}"] = g
                grads[f"layer{l}.beta_{site}"] = b_
            if self.alphas:
                if taus is None:
                    g1 = g2 = 0.0
                else:
                    g1, g2 = alpha_gradient(self.alphas[l], taus, dw1, dw2, N)
                grads[f"layer{l}.alpha1"] = np.array([g1])
                grads[f"layer{l}.alpha2"] = np.array([g2])
            if l > 0:
                dH = (dAX.reshape(T * N, -1) @ p.W_x).reshape(T, N, -1)
        return grads

    def update_population(self, fwd: ForwardResult, n1, N, momentum=0.01):
        """Fold a training batch's statistics into the population estimates.

        Dual-domain sites send each domain's weighted statistics to that
        domain's slot; plain batch-norm sites send the shared batch statistics
        to the slot of every domain present in the batch.
        """
        present = [d for d, ok in ((1, n1 > 0), (2, n1 < N)) if ok]
        for st, bstats in zip(self.stats, fwd.batch_stats):
            for site, (mu, var) in bstats.items():
                for d in present:
                    st.update_block(d, site, mu[:, d - 1], var[:, d - 1], momentum)

    def predict_logits(self, x, domain):
        """Inference-mode logits (N, T, L); every row flagged with `domain`."""
        fwd = self.forward(x, train=False, domain=domain)
        return fwd.logits.transpose(1, 0, 2)


_NO_POP = (np.zeros((3, 2, 1, 1)), np.ones((3, 2, 1, 1)))


def alpha_gradient(alphas: AlphaPair, taus, dw1, dw2, N):
    """Chain gradients w.r.t. the normalized weights back to (alpha1, alpha2).

    With u1 = j - alpha1 N and u2 = (N - j) - alpha2 N, d tau_i / d alpha_i
    = (N / 2) sech^2(u_i).
    """
    j = np.arange(1, N + 1, dtype=np.float64)
    dtau1 = engine.tau_grad(dw1, taus[0])
    dtau2 = engine.tau_grad(dw2, taus[1])
    s1 = 1.0 - np.tanh(j - alphas.alpha1 * N) ** 2
    s2 = 1.0 - np.tanh((N - j) - alphas.alpha2 * N) ** 2
    return float(dtau1 @ s1) * N / 2, float(dtau2 @ s2) * N / 2


def _pop_arrays(st: PopulationStats):
    H4 = st.widths["hidden"]
    mu = np.zeros((3, 2, st.t_max, H4))
    var = np.ones((3, 2, st.t_max, H4))
    for k, site in enumerate(("hidden", "input", "cell")):
        w = st.widths[site]
        mu[k, :, :, :w] = st.mean[site]
        var[k, :, :, :w] = st.var[site]
    return mu, var


def softmax_xent(logits, targets):
    """Mean cross-entropy over all frames and its gradient.

    logits: (..., L); targets: int array of matching leading shape.
    """
    z = logits - logits.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    logp = z - lse
    flat = logp.reshape(-1, logp.shape[-1])
    t = targets.reshape(-1)
    M = flat.shape[0]
    loss = -flat[np.arange(M), t].mean()
    grad = np.exp(flat)
    grad[np.arange(M), t] -= 1.0
    return loss, (grad / M).reshape(logits.shape)


def alpha_limits(n1, N):
    return alpha_bounds(n1, N)
