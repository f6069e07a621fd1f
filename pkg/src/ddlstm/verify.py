"""Self-checks behind ``ddlstm verify``.

Scopes:
  grad       tape primitives, (dual-domain) batch norm and the whole
             DDLSTM + cross-entropy pipeline against central differences,
             plus the fused kernels' gradients (alpha included)
  reduction  DDLSTM on a one-domain batch equals BNLSTM bit for bit;
             BNLSTM with normalization bypassed equals the LSTM
  stats      weighted mean/variance against brute force; the mirror
             identity of the contribution weights
  all        everything above

Every check yields one ``CheckResult``; `format_line` renders it as
``check=<name> status=pass|fail value=<v> tol=<t> seconds=<s>``.
"""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from . import diffgraph as dg
from . import graphs
from .cells import (
    CellState,
    StackConfig,
    bnlstm_step,
    ddlstm_step,
    init_params,
    lstm_step,
)
from .dualnorm import (
    AlphaPair,
    contribution_d1,
    contribution_d2,
    contribution_weights,
    dd_expectation,
    dd_variance,
)
from .model import Model

SCOPES = ("grad", "reduction", "stats", "all")
GRAD_TOL = 1e-4
PRIMITIVE_TOL = 1e-6


@dataclass
class CheckResult:
    name: str
    passed: bool
    value: float
    tol: float
    seconds: float = 0.0
    detail: str = ""


def format_line(r: CheckResult):
    line = (f"check={r.name} status={'pass' if r.passed else 'fail'} value={r.value:.3e} "
            f"tol={r.tol:.1e} seconds={r.seconds:.2f}")
    return line + (f" detail={r.detail}" if r.detail else "")


def _timed(name, tol, fn):
    t0 = time.perf_counter()
    value, detail = fn()
    return CheckResult(name, bool(value <= tol), float(value), tol, time.perf_counter() - t0,
                       detail)


# --------------------------------------------------------------------------
# gradient checks
# --------------------------------------------------------------------------

def _primitive_cases(rng):
    """name -> (builder(tape, leaves) -> node, leaves)."""
    u = lambda *s: rng.uniform(-2, 2, size=s)
    pos = lambda *s: rng.uniform(0.5, 2, size=s)
    away = lambda *s: rng.choice([-1.0, 1.0], size=s) * rng.uniform(0.5, 2, size=s)
    return {
        "matmul": (lambda t: t.matmul(t.leaf("a"), t.leaf("b")), {"a": u(3, 4), "b": u(4, 2)}),
        "transpose": (lambda t: t.transpose(t.leaf("a")), {"a": u(3, 2)}),
        "add": (lambda t: t.add(t.leaf("a"), t.leaf("b")), {"a": u(2, 3), "b": u(2, 3)}),
        "sub": (lambda t: t.sub(t.leaf("a"), t.leaf("b")), {"a": u(2, 3), "b": u(2, 3)}),
        "mul": (lambda t: t.mul(t.leaf("a"), t.leaf("b")), {"a": u(2, 3), "b": u(2, 3)}),
        "div": (lambda t: t.div(t.leaf("a"), t.leaf("b")), {"a": u(2, 3), "b": away(2, 3)}),
        "neg": (lambda t: t.neg(t.leaf("a")), {"a": u(2, 3)}),
        "sigmoid": (lambda t: t.sigmoid(t.leaf("a")), {"a": u(2, 3)}),
        "tanh": (lambda t: t.tanh(t.leaf("a")), {"a": u(2, 3)}),
        "sqrt": (lambda t: t.sqrt(t.leaf("a")), {"a": pos(2, 3)}),
        "exp": (lambda t: t.exp(t.leaf("a")), {"a": u(2, 3)}),
        "log": (lambda t: t.log(t.leaf("a")), {"a": pos(2, 3)}),
        "broadcast_rows": (lambda t: t.broadcast_rows(t.leaf("a"), 4), {"a": u(1, 3)}),
        "sum_all": (lambda t: t.sum(t.leaf("a")), {"a": u(3, 2)}),
        "sum_rows": (lambda t: t.sum(t.leaf("a"), axis=0), {"a": u(3, 2)}),
        "sum_cols": (lambda t: t.sum(t.leaf("a"), axis=1), {"a": u(3, 2)}),
        "mean_all": (lambda t: t.mean(t.leaf("a")), {"a": u(3, 2)}),
        "mean_rows": (lambda t: t.mean(t.leaf("a"), axis=0), {"a": u(3, 2)}),
        "mean_cols": (lambda t: t.mean(t.leaf("a"), axis=1), {"a": u(3, 2)}),
        "concat_rows": (lambda t: t.concat([t.leaf("a"), t.leaf("b")], 0),
                        {"a": u(2, 3), "b": u(1, 3)}),
        "concat_cols": (lambda t: t.concat([t.leaf("a"), t.leaf("b")], 1),
                        {"a": u(2, 3), "b": u(2, 2)}),
        "slice": (lambda t: t.slice(t.leaf("a"), rows=(1, 3), cols=(0, 2)), {"a": u(4, 3)}),
    }


def _scalarize(tape, node, rng, shape):
    """sum(node * W) for a fixed random W, so every output entry matters."""
    return tape.sum(tape.mul(node, tape.const(rng.uniform(-1, 1, size=shape))))


def check_primitives(seed=0):
    rng = np.random.default_rng(seed)
    out = []
    for name, (build, leaves) in _primitive_cases(rng).items():
        def fn(build=build, leaves=leaves):
            tape = dg.Tape()
            node = build(tape)
            shape = dg.evaluate(tape, leaves)[node].shape
            seed_node = _scalarize(tape, node, rng, shape)
            rep = dg.finite_difference_check(tape, leaves, seed_node, 1e-6, PRIMITIVE_TOL)
            return rep.worst, ""
        out.append(_timed(f"grad.primitive.{name}", PRIMITIVE_TOL, fn))
    return out


def _ddbn_leaves(rng, N, F):
    return {"x": rng.normal(size=(N, F)), "gamma": rng.uniform(0.5, 1.5, size=(1, F)),
            "beta": rng.normal(size=(1, F)), "alpha1": np.array([[0.6]]),
            "alpha2": np.array([[0.7]])}


def check_batch_norms(seed=1):
    rng = np.random.default_rng(seed)
    N, F, n1 = 6, 3, 3

    def ddbn():
        leaves = _ddbn_leaves(rng, N, F)
        tape = dg.Tape()
        y = graphs.ddbn_graph(tape, tape.leaf("x"), N, n1, tape.leaf("gamma"), tape.leaf("beta"),
                              tape.leaf("alpha1"), tape.leaf("alpha2"))
        s = _scalarize(tape, y, rng, (N, F))
        rep = dg.finite_difference_check(tape, leaves, s, 1e-6, GRAD_TOL)
        return rep.worst, "leaves=" + ",".join(sorted(rep.max_rel_error))

    def bn():
        leaves = {k: v for k, v in _ddbn_leaves(rng, N, F).items() if "alpha" not in k}
        tape = dg.Tape()
        y = graphs.bn_graph(tape, tape.leaf("x"), N, tape.leaf("gamma"), tape.leaf("beta"))
        s = _scalarize(tape, y, rng, (N, F))
        return dg.finite_difference_check(tape, leaves, s, 1e-6, GRAD_TOL).worst, ""

    return [_timed("grad.ddbn", GRAD_TOL, ddbn), _timed("grad.batch_norm", GRAD_TOL, bn)]


def _pipeline_model(kind, seed, N=4, T=4, H=3, F=3, L=5, layers=2):
    rng = np.random.default_rng(seed)
    cfg = StackConfig(layers=layers, hidden=H, history=T, cell_kind=kind)
    m = Model.create(cfg, F, L, seed=seed)
    for p in m.layers:
        for norm in (p.norm_h, p.norm_x, p.norm_c):
            norm.gamma[:] = rng.uniform(0.5, 1.5, norm.gamma.shape)
            norm.beta[:] = rng.normal(size=norm.beta.shape) * 0.1
        p.b[:] = rng.normal(size=p.b.shape) * 0.1
    for l in range(len(m.alphas)):
        m.set_alpha(l, 1, rng.uniform(0.55, 0.95))
        m.set_alpha(l, 2, rng.uniform(0.55, 0.95))
    x = rng.normal(size=(N, T, F))
    y = rng.integers(0, L, size=(N, T))
    return m, x, y


def check_pipeline_tape(seed=2):
    def fn():
        m, x, y = _pipeline_model("ddlstm", seed)
        tape = dg.Tape()
        loss = graphs.model_loss_graph(tape, "ddlstm", x, y, 2, 3, 5, n1=2)
        leaves = {k: v for k, v in m.named_parameters() if k in tape.leaves}
        rep = dg.finite_difference_check(tape, leaves, loss, 1e-6, GRAD_TOL)
        return rep.worst, f"entries={sum(v.size for v in leaves.values())}"
    return _timed("grad.pipeline_tape", GRAD_TOL, fn)


def _model_loss(m, x, y, n1):
    from .training import softmax_ce_loss
    return softmax_ce_loss(m.forward(x, n1).logits, y.T)


def _engine_fd(m, x, y, n1, names, step=1e-6):
    """Worst relative error of Model.backward against central differences
    over the named parameters."""
    from .training import softmax_ce_loss
    fwd = m.forward(x, n1)
    _, dl = softmax_ce_loss(fwd.logits, y.T, return_grad=True)
    grads = m.backward(fwd, dl, n1)
    worst = 0.0
    params = dict(m.named_parameters())
    for name in names:
        if ".alpha" in name:
            layer, which = int(name[5:name.index(".")]), int(name[-1])
            a0 = params[name][0]
            m.set_alpha(layer, which, a0 + step)
            fp = _model_loss(m, x, y, n1)
            m.set_alpha(layer, which, a0 - step)
            fm = _model_loss(m, x, y, n1)
            m.set_alpha(layer, which, a0)
            pairs = [(grads[name][0], (fp - fm) / (2 * step))]
        else:
            arr = params[name]
            pairs = []
            for idx in np.ndindex(arr.shape):
                v = arr[idx]
                arr[idx] = v + step
                fp = _model_loss(m, x, y, n1)
                arr[idx] = v - step
                fm = _model_loss(m, x, y, n1)
                arr[idx] = v
                pairs.append((grads[name][idx], (fp - fm) / (2 * step)))
        for a, b in pairs:
            worst = max(worst, float(dg.relative_error(a, b)))
    return worst


def check_engine(seed=3):
    out = []

    def alpha():
        m, x, y = _pipeline_model("ddlstm", seed)
        names = [n for n, _ in m.named_parameters() if ".alpha" in n]
        return _engine_fd(m, x, y, 2, names), f"params={len(names)}"

    def full(kind):
        def fn():
            m, x, y = _pipeline_model(kind, seed)
            names = [n for n, _ in m.named_parameters()]
            return _engine_fd(m, x, y, 2 if kind == "ddlstm" else 4, names), ""
        return fn

    out.append(_timed("grad.ddbn_alpha_engine", GRAD_TOL, alpha))
    for kind in ("lstm", "bnlstm", "ddlstm"):
        out.append(_timed(f"grad.pipeline_engine.{kind}", GRAD_TOL, full(kind)))
    return out


def check_stack_sum(seed=4):
    """loss = sum of h_T of a 3-layer DDLSTM stack; tape against differences."""
    def fn():
        rng = np.random.default_rng(seed)
        N, T, H, F = 4, 4, 3, 3
        cfg = StackConfig(layers=3, hidden=H, history=T, cell_kind="ddlstm")
        m = Model.create(cfg, F, 1, seed=seed)
        x = rng.normal(size=(N, T, F))
        tape = dg.Tape()
        tops = graphs.stack_graph(tape, "ddlstm", x, 3, H, n1=2)
        loss = tape.sum(tops[-1])
        names = [n for n, _ in m.named_parameters()
                 if n.startswith("layer") and ("W_" in n or n.endswith(".b") or "alpha" in n)]
        leaves = {k: v for k, v in m.named_parameters() if k in tape.leaves}
        rep = dg.finite_difference_check(tape, leaves, loss, 1e-6, GRAD_TOL, only=names)
        return rep.worst, ""
    return _timed("grad.stack_sum_hT", GRAD_TOL, fn)


def grad_checks():
    return (check_primitives() + check_batch_norms() + [check_pipeline_tape()]
            + check_engine() + [check_stack_sum()])


# --------------------------------------------------------------------------
# reduction checks
# --------------------------------------------------------------------------

def reduction_checks(trials=100, seed=5):
    rng = np.random.default_rng(seed)

    def bitwise():
        mismatched = 0
        for _ in range(trials):
            N, F, H = int(rng.integers(2, 9)), int(rng.integers(1, 6)), int(rng.integers(1, 6))
            cfg = StackConfig(1, H, 4, "ddlstm")
            (p,), (a,) = init_params(cfg, F, seed=int(rng.integers(1 << 30)),
                                     alpha_init=float(rng.uniform(0.5, 1)))
            _randomize_norms(p, rng)
            state = CellState(rng.normal(size=(N, H)), rng.normal(size=(N, H)))
            x = rng.normal(size=(N, F))
            _, s1 = ddlstm_step(p, state, x, N, a)
            _, s2 = bnlstm_step(p, state, x)
            if not (np.array_equal(s1.h, s2.h) and np.array_equal(s1.c, s2.c)):
                mismatched += 1
        return float(mismatched), f"trials={trials} (value counts mismatches)"

    def bypass():
        worst = 0.0
        for _ in range(trials):
            N, F, H = int(rng.integers(1, 9)), int(rng.integers(1, 6)), int(rng.integers(1, 6))
            cfg = StackConfig(1, H, 4, "bnlstm")
            (p,), _ = init_params(cfg, F, seed=int(rng.integers(1 << 30)))
            state = CellState(rng.normal(size=(N, H)), rng.normal(size=(N, H)))
            x = rng.normal(size=(N, F))
            _, s1 = bnlstm_step(p, state, x, bypass=True)
            _, s2 = lstm_step(p, state, x)
            worst = max(worst, float(np.abs(s1.h - s2.h).max()), float(np.abs(s1.c - s2.c).max()))
        return worst, f"trials={trials}"

    return [_timed("reduction.ddlstm_single_domain_is_bnlstm", 0.0, bitwise),
            _timed("reduction.bnlstm_bypass_is_lstm", 1e-9, bypass)]


def _randomize_norms(p, rng):
    for norm in (p.norm_h, p.norm_x, p.norm_c):
        norm.gamma[:] = rng.uniform(0.05, 2.0, norm.gamma.shape)
        norm.beta[:] = rng.normal(size=norm.beta.shape)


# --------------------------------------------------------------------------
# statistics checks
# --------------------------------------------------------------------------

def _brute_mean_var(x, w):
    N, F = x.shape
    mean = np.zeros(F)
    var = np.zeros(F)
    for f in range(F):
        s = sw = 0.0
        for j in range(N):
            s += w[j] * x[j, f]
            sw += w[j]
        mean[f] = s / sw
        acc = 0.0
        for j in range(N):
            acc += w[j] * (x[j, f] - mean[f]) ** 2
        var[f] = acc / sw
    return mean, var


def stats_checks(slices=1000, seed=6):
    rng = np.random.default_rng(seed)

    def weighted():
        worst = 0.0
        negative = 0
        for _ in range(slices):
            N, F = int(rng.integers(2, 33)), int(rng.integers(1, 9))
            x = rng.normal(size=(N, F)) * rng.uniform(0.1, 10)
            a = AlphaPair(*rng.uniform(0.0, 1.0, size=2))
            for tau in contribution_weights(a, N):
                m = dd_expectation(x, tau)
                v = dd_variance(x, m, tau)
                bm, bv = _brute_mean_var(x, tau)
                worst = max(worst, float(dg.relative_error(m, bm).max()),
                            float(dg.relative_error(v, bv).max()))
                negative += int(np.any(v < 0))
        return (worst if negative == 0 else np.inf), f"slices={slices} negative={negative}"

    def mirror():
        mismatches = 0
        grid = np.round(np.arange(0, 101) * 0.01, 2)
        for N in range(2, 65):
            j = np.arange(1, N + 1, dtype=np.float64)
            for a in grid:
                if not np.array_equal(contribution_d2(a, j, N), contribution_d1(a, N - j, N)):
                    mismatches += 1
        return float(mismatches), "N=2..64 alpha step 0.01"

    return [_timed("stats.weighted_mean_var", 1e-12, weighted),
            _timed("stats.tau_mirror", 0.0, mirror)]


def run_checks(scope):
    if scope not in SCOPES:
        raise ValueError(f"scope must be one of {SCOPES}")
    out = []
    if scope in ("grad", "all"):
        out += grad_checks()
    if scope in ("reduction", "all"):
        out += reduction_checks()
    if scope in ("stats", "all"):
        out += stats_checks()
    return out

