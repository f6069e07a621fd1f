"""Reference recurrent cells (LSTM, BNLSTM, DDLSTM), stacking and
parameter initialization.

These step one timestep at a time in plain numpy and are the readable
definition of the models. The fused training kernels in ``ddlstm.engine`` are
tested against them.

Gate packing along the 4H axis is (f, i, o, g).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .dualnorm import (
    AlphaPair,
    NormalizerParams,
    PopulationStats,
    batch_norm,
    batch_stats,
    dd_batch_norm,
    dd_stats,
    inference_norm,
)

CELL_KINDS = ("lstm", "bnlstm", "ddlstm")
MAX_LAYERS = 10


class ConfigError(ValueError):
    pass


@dataclass
class CellParams:
    W_h: np.ndarray  # (4H, H)
    W_x: np.ndarray  # (4H, F)
    b: np.ndarray  # (4H,)
    norm_h: NormalizerParams
    norm_x: NormalizerParams
    norm_c: NormalizerParams

    @property
    def hidden(self):
        return self.W_h.shape[1]

    def copy(self):
        cp = lambda p: NormalizerParams(p.gamma.copy(), p.beta.copy(), p.epsilon)
        return CellParams(self.W_h.copy(), self.W_x.copy(), self.b.copy(),
                          cp(self.norm_h), cp(self.norm_x), cp(self.norm_c))


@dataclass
class GateBlock:
    f_tilde: np.ndarray
    i_tilde: np.ndarray
    o_tilde: np.ndarray
    g_tilde: np.ndarray

    @classmethod
    def split(cls, pre):
        return cls(*np.split(pre, 4, axis=1))


@dataclass
class CellState:
    c: np.ndarray
    h: np.ndarray

    @classmethod
    def zeros(cls, N, H):
        return cls(np.zeros((N, H)), np.zeros((N, H)))


@dataclass
class StackConfig:
    layers: int = 2
    hidden: int = 32
    history: int = 50
    cell_kind: str = "ddlstm"
    alphas: list = field(default_factory=list)

    def validate(self):
        if not 1 <= self.layers <= MAX_LAYERS:
            raise ConfigError(f"layers must lie in [1, {MAX_LAYERS}]")
        if self.hidden < 1 or self.history < 1:
            raise ConfigError("hidden and history must be positive")
        if self.cell_kind not in CELL_KINDS:
            raise ConfigError(f"cell_kind must be one of {CELL_KINDS}")
        if self.cell_kind == "ddlstm":
            if len(self.alphas) != self.layers:
                raise ConfigError("ddlstm needs one AlphaPair per layer")
        elif self.alphas:
            raise ConfigError("alphas are only meaningful for ddlstm")


def sigmoid(x):
    # tanh form: no overflow for large |x|
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def _cell_update(pre, b, c_prev):
    gates = GateBlock.split(pre + b)
    c = sigmoid(gates.f_tilde) * c_prev + sigmoid(gates.i_tilde) * np.tanh(gates.g_tilde)
    return gates, c


def _check_shapes(params: CellParams, state: CellState, x):
    H = params.hidden
    if x.ndim != 2 or x.shape[1] != params.W_x.shape[1]:
        raise ConfigError(f"input shape {x.shape} does not match W_x {params.W_x.shape}")
    if state.h.shape != (x.shape[0], H) or state.c.shape != (x.shape[0], H):
        raise ConfigError("state shape does not match batch/hidden size")


def lstm_step(params: CellParams, state: CellState, x_t):
    _check_shapes(params, state, x_t)
    pre = state.h @ params.W_h.T + x_t @ params.W_x.T
    gates, c = _cell_update(pre, params.b, state.c)
    h = sigmoid(gates.o_tilde) * np.tanh(c)
    return gates, CellState(c, h)


def _domain_rows(domain, N):
    dom = np.broadcast_to(np.asarray(domain), (N,))
    return dom


def _infer_norm_rows(values, stats, domain, t, site, params):
    dom = _domain_rows(domain, values.shape[0])
    out = np.empty_like(values)
    for d in (1, 2):
        rows = dom == d
        if rows.any():
            out[rows] = inference_norm(values[rows], stats, d, t, site, params)
    return out


def bnlstm_step(params: CellParams, state: CellState, x_t, t=1, mode="train",
                stats: PopulationStats | None = None, domain=1, bypass=False):
    """One BNLSTM step. `bypass=True` replaces every normalization by the
    identity (used to check the reduction to a plain LSTM)."""
    _check_shapes(params, state, x_t)
    ah = state.h @ params.W_h.T
    ax = x_t @ params.W_x.T
    if bypass:
        norm = lambda v, p, site: v
    elif mode == "train":
        norm = lambda v, p, site: batch_norm(v, p)
    elif mode == "infer":
        norm = lambda v, p, site: _infer_norm_rows(v, stats, domain, t, site, p)
    else:
        raise ConfigError(f"unknown mode {mode!r}")
    pre = norm(ah, params.norm_h, "hidden") + norm(ax, params.norm_x, "input")
    gates, c = _cell_update(pre, params.b, state.c)
    h = sigmoid(gates.o_tilde) * np.tanh(norm(c, params.norm_c, "cell"))
    return gates, CellState(c, h)


def ddlstm_step(params: CellParams, state: CellState, x_t, n1, alphas: AlphaPair, t=1,
                mode="train", stats: PopulationStats | None = None, domain=None):
    """One DDLSTM step. In training the first n1 rows are domain 1; in
    inference `domain` gives each row's flag (defaults to the n1 layout)."""
    _check_shapes(params, state, x_t)
    N = x_t.shape[0]
    if mode == "infer":
        if domain is None:
            domain = np.where(np.arange(N) < n1, 1, 2)
        return bnlstm_step(params, state, x_t, t, "infer", stats, domain)
    if mode != "train":
        raise ConfigError(f"unknown mode {mode!r}")
    ah = state.h @ params.W_h.T
    ax = x_t @ params.W_x.T
    pre = (dd_batch_norm(ah, params.norm_h, alphas, n1)
           + dd_batch_norm(ax, params.norm_x, alphas, n1))
    gates, c = _cell_update(pre, params.b, state.c)
    h = sigmoid(gates.o_tilde) * np.tanh(batch_norm(c, params.norm_c))
    return gates, CellState(c, h)


def init_params(config: StackConfig, input_dim, seed=0, alpha_init=0.75, gamma=0.1, beta=0.0,
                epsilon=1e-5):
    """Per-layer CellParams and AlphaPairs. Weights ~ U(-1/sqrt(H), 1/sqrt(H)),
    zero bias, gamma/beta constant."""
    rng = np.random.default_rng(seed)
    H = config.hidden
    k = 1.0 / np.sqrt(H)
    layers = []
    for layer in range(config.layers):
        F = input_dim if layer == 0 else H
        layers.append(CellParams(
            W_h=rng.uniform(-k, k, size=(4 * H, H)),
            W_x=rng.uniform(-k, k, size=(4 * H, F)),
            b=np.zeros(4 * H),
            norm_h=NormalizerParams.default(4 * H, gamma, beta, epsilon),
            norm_x=NormalizerParams.default(4 * H, gamma, beta, epsilon),
            norm_c=NormalizerParams.default(H, gamma, beta, epsilon),
        ))
    alphas = ([AlphaPair(alpha_init, alpha_init) for _ in range(config.layers)]
              if config.cell_kind == "ddlstm" else [])
    return layers, alphas


def new_population_stats(config: StackConfig):
    H = config.hidden
    return [PopulationStats(config.history, {"hidden": 4 * H, "input": 4 * H, "cell": H})
            for _ in range(config.layers)]


def step(kind, params, state, x_t, t, n1=None, alphas=None, mode="train", stats=None,
         domain=1):
    if kind == "lstm":
        return lstm_step(params, state, x_t)
    if kind == "bnlstm":
        return bnlstm_step(params, state, x_t, t, mode, stats, domain)
    if mode == "infer":
        return ddlstm_step(params, state, x_t, n1, alphas, t, mode, stats, domain)
    return ddlstm_step(params, state, x_t, n1, alphas, t, mode, stats)


def stack_forward(config: StackConfig, layer_params, x, n1=None, mode="train", stats=None,
                  alphas=None, domain=1):
    """Run the stack over x of shape (N, T, F); returns top hidden states (N, T, H).

    Every (layer, timestep, site) uses its own batch statistics in training;
    layer l's AlphaPair is reused at every timestep of layer l.
    """
    config.validate()
    x = np.asarray(x, dtype=np.float64)
    N, T, _ = x.shape
    if T > config.history and mode == "train":
        raise ConfigError(f"window length {T} exceeds history {config.history}")
    if len(layer_params) != config.layers:
        raise ConfigError("one CellParams per layer required")
    alphas = alphas if alphas is not None else config.alphas
    if n1 is None:
        n1 = N
    inp = x
    for layer, params in enumerate(layer_params):
        state = CellState.zeros(N, params.hidden)
        outs = []
        for t in range(T):
            _, state = step(config.cell_kind, params, state, inp[:, t], t + 1, n1,
                            alphas[layer] if alphas else None, mode,
                            stats[layer] if stats is not None else None, domain)
            outs.append(state.h)
        inp = np.stack(outs, axis=1)
    return inp


def step_batch_stats(kind, params: CellParams, state: CellState, x_t, n1, alphas):
    """Training-mode statistics at one step, per site: {site: (mean (2,F), var (2,F))}."""
    ah = state.h @ params.W_h.T
    ax = x_t @ params.W_x.T
    if kind == "ddlstm":
        sh, sx = dd_stats(ah, n1, alphas), dd_stats(ax, n1, alphas)
    else:
        sh = tuple(np.stack([s, s]) for s in batch_stats(ah))
        sx = tuple(np.stack([s, s]) for s in batch_stats(ax))
    return {"hidden": sh, "input": sx}
