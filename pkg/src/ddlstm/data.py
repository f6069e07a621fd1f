"""Sequence datasets: synthetic coupled-Markov generation, text file I/O and
leave-person-out splitting."""

from __future__ import annotations

import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np


class DatasetError(ValueError):
    pass


class SequenceParseError(DatasetError):
    def __init__(self, path, line_no, message):
        self.path = str(path)
        self.line_no = line_no
        super().__init__(f"{path}:{line_no}: {message}")


@dataclass
class Sequence:
    person_id: int
    features: np.ndarray  # (frames, F)
    labels: np.ndarray  # (frames,) int

    def __len__(self):
        return len(self.labels)


@dataclass
class SequenceDataset:
    sequences: list
    label_count: int
    feature_dim: int

    def __post_init__(self):
        validate_dataset(self)

    @property
    def num_frames(self):
        return sum(len(s) for s in self.sequences)

    @property
    def persons(self):
        return sorted({s.person_id for s in self.sequences})

    def summary(self):
        return (f"sequences={len(self.sequences)} frames={self.num_frames} "
                f"labels={self.label_count} feature_dim={self.feature_dim}")


def validate_dataset(ds: SequenceDataset):
    """Raise DatasetError unless every SequenceDataset invariant holds."""
    if not ds.sequences:
        raise DatasetError("no sequences")
    if ds.label_count < 1 or ds.feature_dim < 1:
        raise DatasetError("label_count and feature_dim must be positive")
    for k, seq in enumerate(ds.sequences):
        if seq.features.ndim != 2 or seq.features.shape[1] != ds.feature_dim:
            raise DatasetError(f"sequence {k}: features must have shape (frames, {ds.feature_dim})")
        if len(seq.labels) == 0 or len(seq.labels) != seq.features.shape[0]:
            raise DatasetError(f"sequence {k}: frame/label count mismatch or empty")
        if seq.labels.min() < 0 or seq.labels.max() >= ds.label_count:
            raise DatasetError(f"sequence {k}: label outside [0, {ds.label_count})")
        if not np.all(np.isfinite(seq.features)):
            raise DatasetError(f"sequence {k}: non-finite feature")


# --------------------------------------------------------------------------
# synthetic data
# --------------------------------------------------------------------------

@dataclass
class SynthConfig:
    latent_states: int = 12
    labels_per_domain: tuple = (8, 8)
    feature_dim: int = 16
    noise_sigma: float = 0.5
    sequence_length: int = 100
    sequences_per_domain: int = 200
    persons_per_domain: int = 8
    relatedness: float = 0.9
    seed: int = 0
    # structure of every drawn transition matrix
    stay_prob: float = 0.8
    successor_concentration: float = 0.1

    def validate(self):
        if self.latent_states < 2:
            raise DatasetError("latent_states must be >= 2")
        l1, l2 = self.labels_per_domain
        if min(l1, l2) < 1 or max(l1, l2) > self.latent_states:
            raise DatasetError("labels_per_domain must lie in [1, latent_states]")
        if not 0.0 <= self.relatedness <= 1.0:
            raise DatasetError("relatedness must lie in [0, 1]")
        if not 0.0 <= self.stay_prob < 1.0:
            raise DatasetError("stay_prob must lie in [0, 1)")
        if self.successor_concentration <= 0:
            raise DatasetError("successor_concentration must be positive")
        if self.noise_sigma < 0:
            raise DatasetError("noise_sigma must be non-negative")
        if min(self.feature_dim, self.sequence_length, self.sequences_per_domain,
               self.persons_per_domain) < 1:
            raise DatasetError("sizes must be positive")


@dataclass
class CoupledMarkov:
    """Generator internals, kept around for inspection and tests."""
    shared: np.ndarray
    transitions: tuple
    state_to_label: tuple
    embeddings: tuple
    paths: tuple = field(default=())


def random_transition_matrix(rng, k, stay_prob, concentration):
    """Sticky chain: stay with `stay_prob`, otherwise jump along a sparse
    Dirichlet draw over the other states."""
    P = np.zeros((k, k))
    for s in range(k):
        jump = rng.dirichlet(np.full(k - 1, concentration))
        P[s, np.arange(k) != s] = (1.0 - stay_prob) * jump
        P[s, s] = stay_prob
    return P


def _renormalize(P):
    if np.any(P < 0) or not np.all(np.isfinite(P)):
        raise DatasetError("invalid transition probabilities")
    rows = P.sum(axis=1, keepdims=True)
    if np.any(rows <= 0):
        raise DatasetError("transition matrix has an all-zero row")
    return P / rows


def _sample_path(P, initial, uniforms):
    cum_init = np.cumsum(initial)
    cum = np.cumsum(P, axis=1)
    k = len(initial)
    path = np.empty(len(uniforms), dtype=np.int64)
    s = min(int(np.searchsorted(cum_init, uniforms[0], side="right")), k - 1)
    path[0] = s
    for t in range(1, len(uniforms)):
        s = min(int(np.searchsorted(cum[s], uniforms[t], side="right")), k - 1)
        path[t] = s
    return path


def generate_coupled_markov(config: SynthConfig, return_internals=False):
    """Generate two related sequence datasets.

    Both domains are driven by the same stream of uniforms, so with
    relatedness 1 they walk the same latent path and differ only in how
    latent states map to labels and how labels map to features.
    """
    config.validate()
    rng = np.random.default_rng(config.seed)
    K = config.latent_states
    rho = config.relatedness

    shared = random_transition_matrix(rng, K, config.stay_prob, config.successor_concentration)
    own = [random_transition_matrix(rng, K, config.stay_prob, config.successor_concentration)
           for _ in range(2)]
    transitions = tuple(_renormalize(rho * shared + (1.0 - rho) * P) for P in own)
    initial = np.full(K, 1.0 / K)

    state_to_label = []
    embeddings = []
    for L in config.labels_per_domain:
        # surjection: every label gets at least one latent state
        mapping = np.concatenate([np.arange(L), rng.integers(0, L, K - L)])
        state_to_label.append(rng.permutation(mapping))
        # unit expected norm, so noise_sigma is measured against label separation
        embeddings.append(rng.normal(size=(L, config.feature_dim)) / np.sqrt(config.feature_dim))

    uniforms = rng.random((config.sequences_per_domain, config.sequence_length))
    noise_rngs = [np.random.default_rng(s) for s in rng.integers(0, 2**63 - 1, size=2)]

    datasets = []
    paths = []
    for d in range(2):
        seqs = []
        dom_paths = []
        for n in range(config.sequences_per_domain):
            path = _sample_path(transitions[d], initial, uniforms[n])
            labels = state_to_label[d][path]
            feats = embeddings[d][labels] + config.noise_sigma * noise_rngs[d].normal(
                size=(config.sequence_length, config.feature_dim))
            seqs.append(Sequence(person_id=n % config.persons_per_domain,
                                 features=feats, labels=labels.astype(np.int64)))
            dom_paths.append(path)
        datasets.append(SequenceDataset(seqs, config.labels_per_domain[d], config.feature_dim))
        paths.append(dom_paths)

    if return_internals:
        internals = CoupledMarkov(shared, transitions, tuple(state_to_label),
                                  tuple(embeddings), tuple(paths))
        return datasets[0], datasets[1], internals
    return datasets[0], datasets[1]


# --------------------------------------------------------------------------
# text format
# --------------------------------------------------------------------------

MAGIC = "DDSEQ"


def save_sequences(dataset: SequenceDataset, path):
    """Write `dataset` atomically in the DDSEQ text format."""
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    lines = [f"{MAGIC} 1 {dataset.label_count} {dataset.feature_dim}"]
    for seq in dataset.sequences:
        lines.append(f"SEQ {seq.person_id} {len(seq)}")
        for label, row in zip(seq.labels, seq.features):
            lines.append(f"{int(label)} " + " ".join(repr(float(v)) for v in row))
    try:
        with open(tmp, "w", encoding="utf-8") as fh:
            fh.write("\n".join(lines) + "\n")
        os.replace(tmp, path)
    except BaseException:
        if tmp.exists():
            tmp.unlink()
        raise


def load_sequences(path) -> SequenceDataset:
    path = Path(path)
    if not path.exists():
        raise DatasetError(f"{path}: no such file")
    with open(path, encoding="utf-8") as fh:
        lines = fh.read().split("\n")
    if lines and lines[-1] == "":
        lines.pop()
    if not lines:
        raise SequenceParseError(path, 1, "no sequences")

    head = lines[0].split()
    if len(head) != 4 or head[0] != MAGIC or head[1] != "1":
        raise SequenceParseError(path, 1, f"expected header '{MAGIC} 1 <label_count> <feature_dim>'")
    try:
        label_count, feature_dim = int(head[2]), int(head[3])
    except ValueError:
        raise SequenceParseError(path, 1, "label_count and feature_dim must be integers") from None
    if label_count < 1 or feature_dim < 1:
        raise SequenceParseError(path, 1, "label_count and feature_dim must be positive")

    seqs = []
    i = 1
    while i < len(lines):
        line_no = i + 1
        parts = lines[i].split()
        if not parts:
            raise SequenceParseError(path, line_no, "blank line")
        if parts[0] != "SEQ" or len(parts) != 3:
            raise SequenceParseError(path, line_no, "expected 'SEQ <person_id> <num_frames>'")
        try:
            person, n = int(parts[1]), int(parts[2])
        except ValueError:
            raise SequenceParseError(path, line_no, "person_id and num_frames must be integers") from None
        if n < 1:
            raise SequenceParseError(path, line_no, "num_frames must be positive")
        if i + n > len(lines) - 1:
            raise SequenceParseError(path, len(lines), f"sequence truncated: expected {n} frames")
        labels = np.empty(n, dtype=np.int64)
        feats = np.empty((n, feature_dim))
        for f in range(n):
            i += 1
            line_no = i + 1
            cols = lines[i].split()
            if not cols:
                raise SequenceParseError(path, line_no, "blank line")
            if len(cols) != feature_dim + 1:
                raise SequenceParseError(
                    path, line_no, f"expected label and {feature_dim} features, got {len(cols) - 1} features")
            try:
                labels[f] = int(cols[0])
                feats[f] = [float(v) for v in cols[1:]]
            except ValueError:
                raise SequenceParseError(path, line_no, "malformed number") from None
            if not 0 <= labels[f] < label_count:
                raise SequenceParseError(path, line_no, f"label {labels[f]} outside [0, {label_count})")
            if not np.all(np.isfinite(feats[f])):
                raise SequenceParseError(path, line_no, "non-finite feature")
        seqs.append(Sequence(person, feats, labels))
        i += 1

    if not seqs:
        raise SequenceParseError(path, 1, "no sequences")
    return SequenceDataset(seqs, label_count, feature_dim)


# --------------------------------------------------------------------------
# splits
# --------------------------------------------------------------------------

def split_leave_person_out(dataset: SequenceDataset, num_splits=4, split_index=0,
                           train_fraction=None):
    """Partition persons into `num_splits` groups; group `split_index` is the
    test side.

    `train_fraction`, when given, must agree with 1 - 1/num_splits; it only
    exists so callers can state the intended proportion explicitly.
    """
    persons = dataset.persons
    if num_splits < 2 or len(persons) < num_splits:
        raise DatasetError(f"need at least {num_splits} distinct persons, have {len(persons)}")
    if not 0 <= split_index < num_splits:
        raise DatasetError("split_index out of range")
    if train_fraction is not None and abs(train_fraction - (1 - 1 / num_splits)) > 1e-9:
        raise DatasetError("train_fraction must equal 1 - 1/num_splits")
    groups = {p: k % num_splits for k, p in enumerate(persons)}
    test = [s for s in dataset.sequences if groups[s.person_id] == split_index]
    train = [s for s in dataset.sequences if groups[s.person_id] != split_index]
    make = lambda seqs: SequenceDataset(seqs, dataset.label_count, dataset.feature_dim)
    return make(train), make(test)
