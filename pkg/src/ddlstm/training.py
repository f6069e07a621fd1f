"""Batches, losses, the constrained SGD step, the training protocols and
frame-level evaluation.

Labels live in one concatenated vector: domain-1 labels take indices
0..L1-1 and domain-2 labels L1..L1+L2-1. Internally targets are kept as
integer indices into that vector; ``concat_labels`` gives the one-hot form.
"""

from __future__ import annotations

import csv
import math
import os
from dataclasses import dataclass, field

import numpy as np

from .cells import CELL_KINDS, ConfigError, StackConfig
from .data import Sequence, SequenceDataset
from .model import Model

PROTOCOLS = ("single", "joint", "finetune", "ddlstm")
ACCURACY_EVERY = 500
BOUNDARY_SIGMA = 10.0
RUNLOG_HEADER = ("iter", "loss", "layer", "alpha1", "alpha2", "acc_d1", "acc_d2")


class TrainingError(RuntimeError):
    pass


class NonFiniteGradient(TrainingError):
    def __init__(self, name):
        self.name = name
        super().__init__(f"non-finite gradient for parameter {name}")


# --------------------------------------------------------------------------
# labels and batches
# --------------------------------------------------------------------------

def concat_labels(label_id, domain, L1, L2):
    """One-hot vector of length L1 + L2 for a label of the given domain."""
    size = L1 if domain == 1 else L2
    if domain not in (1, 2):
        raise ValueError(f"domain must be 1 or 2, got {domain}")
    if not 0 <= label_id < size:
        raise ValueError(f"label {label_id} outside [0, {size}) for domain {domain}")
    out = np.zeros(L1 + L2)
    out[label_id + (L1 if domain == 2 else 0)] = 1.0
    return out


@dataclass
class DomainBatch:
    x: np.ndarray  # (N, T, F)
    targets: np.ndarray  # (N, T) indices into the concatenated label vector
    n1: int

    @property
    def N(self):
        return self.x.shape[0]


def _window(seq: Sequence, T, rng):
    n = len(seq)
    if n >= T:
        start = rng.integers(0, n - T + 1)
        return seq.features[start:start + T], seq.labels[start:start + T]
    pad = T - n
    feats = np.concatenate([np.repeat(seq.features[:1], pad, axis=0), seq.features])
    labels = np.concatenate([np.repeat(seq.labels[:1], pad), seq.labels])
    return feats, labels


def compose_batch(pool1, pool2, n1, n2, T, rng, label_offsets=None):
    """n1 windows from pool1 followed by n2 windows from pool2.

    Windows start uniformly over valid positions; sequences shorter than T
    are left-padded by repeating their first frame. `label_offsets` gives
    where each domain's labels start in the target vector (default
    (0, pool1.label_count)).
    """
    for n, pool, name in ((n1, pool1, "pool1"), (n2, pool2, "pool2")):
        if n > 0 and (pool is None or not pool.sequences):
            raise TrainingError(f"{name} is empty but {n} samples were requested")
        if n < 0:
            raise TrainingError("sample counts must be non-negative")
    if n1 + n2 < 1:
        raise TrainingError("empty batch")
    if label_offsets is None:
        label_offsets = (0, pool1.label_count if pool1 is not None else 0)
    F = (pool1 if n1 > 0 else pool2).feature_dim
    x = np.empty((n1 + n2, T, F))
    targets = np.empty((n1 + n2, T), dtype=np.int64)
    row = 0
    for n, pool, off in ((n1, pool1, label_offsets[0]), (n2, pool2, label_offsets[1])):
        for _ in range(n):
            seq = pool.sequences[rng.integers(len(pool.sequences))]
            x[row], labels = _window(seq, T, rng)
            targets[row] = labels + off
            row += 1
    return DomainBatch(x, targets, n1)


# --------------------------------------------------------------------------
# losses
# --------------------------------------------------------------------------

def _as_indices(targets, L):
    t = np.asarray(targets)
    if t.dtype.kind == "f":
        if t.shape[-1] != L:
            raise ValueError(f"one-hot targets of width {t.shape[-1]} for {L} logits")
        return t.argmax(axis=-1)
    return t.astype(np.int64)


def softmax_ce_loss(logits, targets, return_grad=False):
    """Mean over frames of -log softmax(logits)[target].

    logits: (N, T, L); targets: (N, T) indices or (N, T, L) one-hot rows.
    With `return_grad` also returns d loss / d logits.
    """
    logits = np.asarray(logits, dtype=np.float64)
    L = logits.shape[-1]
    t = _as_indices(targets, L)
    if t.shape != logits.shape[:-1]:
        raise ValueError(f"targets shape {t.shape} does not match logits {logits.shape}")
    if t.size and (t.min() < 0 or t.max() >= L):
        raise ValueError("target index out of range")
    z = logits - logits.max(axis=-1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=-1, keepdims=True))
    flat = logp.reshape(-1, L)
    idx = t.reshape(-1)
    M = flat.shape[0]
    loss = float(-flat[np.arange(M), idx].mean())
    if not return_grad:
        return loss
    grad = np.exp(flat)
    grad[np.arange(M), idx] -= 1.0
    return loss, (grad / M).reshape(logits.shape)


def gaussian_kl_loss(pred_mu, pred_sigma, target_mu, target_sigma):
    """Mean over frames of KL(N(target) || N(pred))."""
    pm, ps, tm, ts = (np.asarray(v, dtype=np.float64) for v in
                      (pred_mu, pred_sigma, target_mu, target_sigma))
    if np.any(ps <= 0) or np.any(ts <= 0):
        raise ValueError("standard deviations must be positive")
    kl = np.log(ps / ts) + (ts ** 2 + (tm - pm) ** 2) / (2.0 * ps ** 2) - 0.5
    return float(np.mean(kl))


def _gaussian_kl_grad(pm, log_ps, tm, ts):
    """Gradients of the mean KL w.r.t. pred mean and log pred sigma."""
    ps2 = np.exp(2.0 * log_ps)
    M = pm.size
    d_mu = (pm - tm) / ps2 / M
    d_logs = (1.0 - (ts ** 2 + (tm - pm) ** 2) / ps2) / M
    return d_mu, d_logs


# --------------------------------------------------------------------------
# optimizer
# --------------------------------------------------------------------------

def sgd_step(model: Model, grads, lr, n1, N, freeze_norm=True):
    """p <- p - lr * g for every trainable parameter, then clamp each alpha
    to [n_i / N, 1]. Gamma and beta stay fixed when `freeze_norm`."""
    if lr <= 0:
        raise ValueError("learning rate must be positive")
    params = model.named_parameters(include_norm=not freeze_norm)
    for name, _ in params:
        g = grads.get(name)
        if g is None:
            raise TrainingError(f"missing gradient for {name}")
        if not np.all(np.isfinite(g)):
            raise NonFiniteGradient(name)
    lo = (n1 / N, (N - n1) / N)
    for name, arr in params:
        g = grads[name]
        if ".alpha" in name:
            layer = int(name[len("layer"):name.index(".")])
            which = int(name[-1])
            value = float(arr[0] - lr * g[0])
            model.set_alpha(layer, which, min(max(value, lo[which - 1]), 1.0))
        else:
            arr -= lr * g
    return model


# --------------------------------------------------------------------------
# config and run log
# --------------------------------------------------------------------------

@dataclass
class TrainConfig:
    protocol: str = "ddlstm"
    cell_kind: str = "ddlstm"
    learning_rate: float = 0.01
    iterations: int = 5000
    batch_size: int = 128
    n1: int = 64
    seed: int = 0
    alpha_init: float = 0.75
    boundary_aux: bool = False
    history: int = 200
    layers: int = 2
    hidden: int = 128
    freeze_norm: bool = True
    momentum: float = 0.01

    def validate(self):
        if self.protocol not in PROTOCOLS:
            raise ConfigError(f"protocol must be one of {PROTOCOLS}")
        if self.cell_kind not in CELL_KINDS:
            raise ConfigError(f"cell_kind must be one of {CELL_KINDS}")
        if self.protocol == "ddlstm" and self.cell_kind != "ddlstm":
            raise ConfigError("protocol ddlstm needs cell_kind ddlstm")
        if self.protocol != "ddlstm" and self.cell_kind == "ddlstm":
            raise ConfigError(f"protocol {self.protocol} takes cell_kind lstm or bnlstm")
        if not self.learning_rate > 0:
            raise ConfigError("learning_rate must be positive")
        if self.iterations < 0:
            raise ConfigError("iterations must be non-negative")
        if self.batch_size < 2:
            raise ConfigError("batch_size must be at least 2")
        if self.protocol in ("joint", "ddlstm") and not 0 < self.n1 < self.batch_size:
            raise ConfigError("mixed protocols need 0 < n1 < batch_size")
        if not 0 < self.momentum <= 1:
            raise ConfigError("momentum must lie in (0, 1]")
        if self.cell_kind == "ddlstm" and not 0 <= self.alpha_init <= 1:
            raise ConfigError("alpha_init must lie in [0, 1]")
        StackConfig(self.layers, self.hidden, self.history, "lstm").validate()
        return self

    @property
    def n2(self):
        return self.batch_size - self.n1


@dataclass
class RunLog:
    """Per-iteration loss and per-layer alphas; accuracy at logging steps."""

    iterations: list = field(default_factory=list)
    losses: list = field(default_factory=list)
    alphas: list = field(default_factory=list)  # per iteration: [(a1, a2) per layer]
    accuracy: dict = field(default_factory=dict)  # iteration -> (acc_d1, acc_d2)
    bounds: list = field(default_factory=list)  # per iteration: (n1/N, n2/N)

    def record(self, iteration, loss, alphas, bounds):
        if self.iterations and iteration <= self.iterations[-1]:
            raise TrainingError("run log iterations must increase")
        self.iterations.append(int(iteration))
        self.losses.append(float(loss))
        self.alphas.append([(a.alpha1, a.alpha2) for a in alphas])
        self.bounds.append(bounds)

    def alpha_violations(self):
        out = []
        for it, per_layer, (lo1, lo2) in zip(self.iterations, self.alphas, self.bounds):
            for layer, (a1, a2) in enumerate(per_layer):
                if not (lo1 <= a1 <= 1.0 and lo2 <= a2 <= 1.0):
                    out.append((it, layer, a1, a2))
        return out

    def final_accuracy(self):
        if not self.accuracy:
            return None
        return self.accuracy[max(self.accuracy)]

    def rows(self):
        for it, loss, per_layer in zip(self.iterations, self.losses, self.alphas):
            acc = self.accuracy.get(it)
            fmt = lambda v: "" if acc is None or v is None else repr(float(v))
            layers = per_layer or [(None, None)]
            for layer, (a1, a2) in enumerate(layers):
                yield (it, repr(loss), layer,
                       "" if a1 is None else repr(a1), "" if a2 is None else repr(a2),
                       fmt(acc[0]) if acc else "", fmt(acc[1]) if acc else "")

    def write_csv(self, path):
        tmp = f"{path}.tmp"
        with open(tmp, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(RUNLOG_HEADER)
            w.writerows(self.rows())
        os.replace(tmp, path)

    def __eq__(self, other):
        if not isinstance(other, RunLog):
            return NotImplemented
        return list(self.rows()) == list(other.rows())


def read_runlog_csv(path):
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = tuple(next(reader))
        if header != RUNLOG_HEADER:
            raise TrainingError(f"unexpected run log header {header}")
        return [dict(zip(header, row)) for row in reader]


# --------------------------------------------------------------------------
# boundary auxiliary task
# --------------------------------------------------------------------------

def boundary_targets(labels):
    """Frames until the next label change for every frame; the last segment
    counts down to the end of the sequence."""
    labels = np.asarray(labels)
    n = len(labels)
    out = np.empty(n)
    nxt = n
    for t in range(n - 1, -1, -1):
        if t + 1 < n and labels[t + 1] != labels[t]:
            nxt = t + 1
        out[t] = nxt - t
    return out


def _aux_features(aux: Model, features):
    """(frames, 2) online boundary predictions (mu, sigma), in units of the
    target spread, for one sequence."""
    out = aux.forward(features[None], train=False, domain=1).logits[:, 0]
    return np.stack([out[:, 0], np.exp(out[:, 1])], axis=1)


def augment_dataset(aux: Model, ds: SequenceDataset):
    seqs = [Sequence(s.person_id, np.concatenate([s.features, _aux_features(aux, s.features)], 1),
                     s.labels) for s in ds.sequences]
    return SequenceDataset(seqs, ds.label_count, ds.feature_dim + 2)


def train_boundary_model(config: TrainConfig, datasets, rng):
    """1-layer LSTM predicting a Gaussian over frames-to-next-boundary,
    trained with the KL loss on windows pooled from `datasets`."""
    F = datasets[0].feature_dim
    cfg = StackConfig(1, config.hidden, config.history, "lstm")
    aux = Model.create(cfg, F, 2, seed=config.seed + 7919)
    seqs = [Sequence(s.person_id, s.features, boundary_targets(s.labels).astype(np.int64))
            for ds in datasets for s in ds.sequences]
    pool = SequenceDataset(seqs, max(int(s.labels.max()) for s in seqs) + 1, F)
    N, T = config.batch_size, config.history
    for _ in range(config.iterations):
        batch = compose_batch(pool, None, N, 0, T, rng, label_offsets=(0, 0))
        fwd = aux.forward(batch.x, N)
        out = fwd.logits  # (T, N, 2)
        tm = batch.targets.T / BOUNDARY_SIGMA
        ts = np.full_like(tm, 1.0)
        d_mu, d_logs = _gaussian_kl_grad(out[..., 0], out[..., 1], tm, ts)
        grads = aux.backward(fwd, np.stack([d_mu, d_logs], axis=-1), N)
        sgd_step(aux, grads, config.learning_rate, N, N)
    return aux


# --------------------------------------------------------------------------
# protocols
# --------------------------------------------------------------------------

def _check_datasets(config, d1, d2):
    if d1 is None:
        raise TrainingError("the first dataset is required")
    if config.protocol == "single" and d2 is not None:
        raise TrainingError("protocol single trains on one dataset; got two")
    if config.protocol != "single" and d2 is None:
        raise TrainingError(f"protocol {config.protocol} needs two datasets")
    if d2 is not None and d2.feature_dim != d1.feature_dim:
        raise TrainingError("datasets have different feature dimensions")


def _run_phase(model, config, log, pools, n1, label_offsets, rng, start, evaluators):
    N = config.batch_size
    for k in range(1, config.iterations + 1):
        batch = compose_batch(pools[0], pools[1], n1, N - n1, config.history, rng, label_offsets)
        fwd = model.forward(batch.x, n1)
        loss, dlogits = softmax_ce_loss(fwd.logits, batch.targets.T, return_grad=True)
        if not math.isfinite(loss):
            raise TrainingError(f"loss became non-finite at iteration {start + k}")
        grads = model.backward(fwd, dlogits, n1)
        if model.config.cell_kind != "lstm":
            model.update_population(fwd, n1, N, config.momentum)
        sgd_step(model, grads, config.learning_rate, n1, N, config.freeze_norm)
        it = start + k
        log.record(it, loss, model.alphas, (n1 / N, (N - n1) / N))
        if evaluators and (k % ACCURACY_EVERY == 0 or k == config.iterations):
            log.accuracy[it] = tuple(fn(model) if fn else None for fn in evaluators)
    return start + config.iterations


def train(config: TrainConfig, d1: SequenceDataset, d2: SequenceDataset | None = None,
          test1: SequenceDataset | None = None, test2: SequenceDataset | None = None):
    """Train under `config.protocol`; returns (model, RunLog).

    Accuracy is logged every 500 iterations (and at the end) on `test1` /
    `test2` when given. For protocol single the dataset is domain 1.
    """
    config.validate()
    _check_datasets(config, d1, d2)
    rng = np.random.default_rng(config.seed)
    aux = None
    if config.boundary_aux:
        aux = train_boundary_model(config, [d for d in (d1, d2) if d is not None], rng)
        d1, d2, test1, test2 = (augment_dataset(aux, d) if d is not None else None
                                for d in (d1, d2, test1, test2))
    F = d1.feature_dim
    L1 = d1.label_count
    L2 = d2.label_count if d2 is not None else 0
    stack = StackConfig(config.layers, config.hidden, config.history, config.cell_kind)
    log = RunLog()
    N = config.batch_size
    ev = lambda ds, flag: (lambda m: evaluate_frame_accuracy(m, ds, flag, _augmented=True)) \
        if ds is not None else None

    if config.protocol == "single":
        model = Model.create(stack, F, L1, config.seed, config.alpha_init, (L1, 0))
        model.aux = aux
        _run_phase(model, config, log, (d1, None), N, (0, 0), rng, 0, (ev(test1, 1), None))
    elif config.protocol == "finetune":
        model = Model.create(stack, F, L1, config.seed, config.alpha_init, (L1, 0))
        model.aux = aux
        it = _run_phase(model, config, log, (d1, None), N, (0, 0), rng, 0, (ev(test1, 1), None))
        model.resize_head(L2, (0, L2), config.seed)
        _run_phase(model, config, log, (None, d2), 0, (0, 0), rng, it, (None, ev(test2, 2)))
    else:
        model = Model.create(stack, F, L1 + L2, config.seed, config.alpha_init, (L1, L2))
        model.aux = aux
        _run_phase(model, config, log, (d1, d2), config.n1, (0, L1), rng, 0,
                   (ev(test1, 1), ev(test2, 2)))
    return model, log


# --------------------------------------------------------------------------
# evaluation
# --------------------------------------------------------------------------

def label_block(model: Model, domain_flag):
    L1, L2 = model.label_layout
    if domain_flag == 1:
        return 0, L1
    if domain_flag == 2:
        return L1, L2
    raise ValueError(f"unknown domain flag {domain_flag}")


def evaluate_frame_accuracy(model: Model, dataset: SequenceDataset, domain_flag,
                            _augmented=False):
    """Fraction of frames whose argmax over the flagged domain's label block
    is correct. Frames are processed causally with population statistics."""
    off, size = label_block(model, domain_flag)
    if dataset is None or not dataset.sequences:
        raise ValueError("cannot evaluate on an empty dataset")
    if size == 0:
        raise ValueError(f"model has no labels for domain {domain_flag}")
    if dataset.label_count > size:
        raise ValueError(f"dataset has {dataset.label_count} labels; model block has {size}")
    if model.aux is not None and not _augmented:
        dataset = augment_dataset(model.aux, dataset)
    by_len = {}
    for s in dataset.sequences:
        by_len.setdefault(len(s), []).append(s)
    correct = total = 0
    for seqs in by_len.values():
        x = np.stack([s.features for s in seqs])
        y = np.stack([s.labels for s in seqs])
        logits = model.predict_logits(x, domain_flag)[:, :, off:off + size]
        correct += int((logits.argmax(axis=-1) == y).sum())
        total += y.size
    return correct / total
