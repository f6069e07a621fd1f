"""Batch normalization, dual-domain batch normalization and per-domain
population statistics.

Batch layout convention: the first ``n1`` rows of every slice come from
domain 1, the remaining ``N - n1`` rows from domain 2. Sample indices used by
the contribution functions are 1-based.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

DEFAULT_EPS = 1e-5
SITES = ("hidden", "input", "cell")


class NormError(ValueError):
    pass


@dataclass
class NormalizerParams:
    gamma: np.ndarray
    beta: np.ndarray
    epsilon: float = DEFAULT_EPS

    def __post_init__(self):
        self.gamma = np.asarray(self.gamma, dtype=np.float64)
        self.beta = np.asarray(self.beta, dtype=np.float64)
        if self.epsilon <= 0:
            raise NormError("epsilon must be positive")
        if self.gamma.shape != self.beta.shape:
            raise NormError("gamma and beta must have the same shape")

    @classmethod
    def default(cls, width, gamma=0.1, beta=0.0, epsilon=DEFAULT_EPS):
        return cls(np.full(width, gamma), np.full(width, beta), epsilon)


@dataclass
class AlphaPair:
    alpha1: float = 0.75
    alpha2: float = 0.75

    def check(self, n1, N):
        lo1, lo2 = alpha_bounds(n1, N)
        if not (lo1 <= self.alpha1 <= 1.0 and lo2 <= self.alpha2 <= 1.0):
            raise NormError(f"alphas ({self.alpha1}, {self.alpha2}) outside "
                            f"[{lo1}, 1] x [{lo2}, 1]")

    def clamped(self, n1, N):
        lo1, lo2 = alpha_bounds(n1, N)
        return AlphaPair(float(np.clip(self.alpha1, lo1, 1.0)),
                         float(np.clip(self.alpha2, lo2, 1.0)))


def alpha_bounds(n1, N):
    """Lower bounds (n1/N, n2/N) for (alpha1, alpha2)."""
    return n1 / N, (N - n1) / N


# --------------------------------------------------------------------------
# plain batch normalization
# --------------------------------------------------------------------------

def batch_stats(x):
    """Per-feature mean and population variance (divide by N)."""
    mean = x.mean(axis=0)
    var = ((x - mean) ** 2).mean(axis=0)
    return mean, var


def batch_norm(x, params: NormalizerParams, training=True):
    x = np.asarray(x, dtype=np.float64)
    if training and x.shape[0] < 2:
        raise NormError("batch_norm needs at least 2 samples in training mode")
    mean, var = batch_stats(x)
    return params.beta + params.gamma * (x - mean) / np.sqrt(var + params.epsilon)


# --------------------------------------------------------------------------
# contribution functions and weighted statistics
# --------------------------------------------------------------------------

def contribution_d1(alpha1, j, N):
    """Weight of (1-based) sample j in domain 1's statistics."""
    return (1.0 - np.tanh(j - alpha1 * N)) / 2.0


def contribution_d2(alpha2, j, N):
    """Weight of sample j in domain 2's statistics.

    Mirror of ``contribution_d1`` about the batch: equal to
    (1 + tanh(j - (1 - alpha2) N)) / 2, written so that the reflection
    contribution_d2(a, j, N) == contribution_d1(a, N - j, N) is exact.
    """
    return contribution_d1(alpha2, N - j, N)


def contribution_weights(alphas: AlphaPair, N):
    j = np.arange(1, N + 1, dtype=np.float64)
    return contribution_d1(alphas.alpha1, j, N), contribution_d2(alphas.alpha2, j, N)


def _check_weights(values, weights):
    weights = np.asarray(weights, dtype=np.float64)
    if weights.ndim != 1 or len(weights) != values.shape[0]:
        raise NormError(f"weight vector length {weights.shape} != batch size {values.shape[0]}")
    if np.any(weights < 0) or weights.sum() <= 0:
        raise NormError("weights must be non-negative with a positive sum")
    return weights


def dd_expectation(values, weights):
    values = np.asarray(values, dtype=np.float64)
    weights = _check_weights(values, weights)
    return weights @ values / weights.sum()


def dd_variance(values, mean, weights):
    values = np.asarray(values, dtype=np.float64)
    weights = _check_weights(values, weights)
    return weights @ (values - mean) ** 2 / weights.sum()


def dd_stats(x, n1, alphas: AlphaPair):
    """Per-domain (mean, var) pairs, each of shape (2, F).

    Single-domain batches (n1 in {0, N}) get the plain batch statistics in
    both rows.
    """
    N = x.shape[0]
    if n1 in (0, N):
        mean, var = batch_stats(x)
        return np.stack([mean, mean]), np.stack([var, var])
    means, variances = [], []
    for tau in contribution_weights(alphas, N):
        m = dd_expectation(x, tau)
        means.append(m)
        variances.append(dd_variance(x, m, tau))
    return np.stack(means), np.stack(variances)


def dd_batch_norm(x, params: NormalizerParams, alphas: AlphaPair, n1):
    """Each sample is normalized with its own domain's weighted statistics."""
    x = np.asarray(x, dtype=np.float64)
    N = x.shape[0]
    if not 0 <= n1 <= N:
        raise NormError(f"n1={n1} outside [0, {N}]")
    if n1 in (0, N):
        return batch_norm(x, params)
    if N < 2:
        raise NormError("dd_batch_norm needs at least 2 samples")
    mean, var = dd_stats(x, n1, alphas)
    dom = (np.arange(N) >= n1).astype(int)
    return params.beta + params.gamma * (x - mean[dom]) / np.sqrt(var[dom] + params.epsilon)


# --------------------------------------------------------------------------
# population statistics
# --------------------------------------------------------------------------

class PopulationStats:
    """Running mean/variance per (domain, timestep, site).

    Stored densely: ``mean[site]`` and ``var[site]`` have shape
    (2, T_max, width); ``count[site]`` has shape (2, T_max). A slot exists
    once it has received at least one update.
    """

    def __init__(self, t_max, widths):
        self.t_max = int(t_max)
        self.widths = dict(widths)
        self.mean = {s: np.zeros((2, self.t_max, w)) for s, w in self.widths.items()}
        self.var = {s: np.ones((2, self.t_max, w)) for s, w in self.widths.items()}
        self.count = {s: np.zeros((2, self.t_max), dtype=np.int64) for s in self.widths}

    def copy(self):
        out = PopulationStats(self.t_max, self.widths)
        for s in self.widths:
            out.mean[s] = self.mean[s].copy()
            out.var[s] = self.var[s].copy()
            out.count[s] = self.count[s].copy()
        return out

    def slot(self, domain, t, site):
        d, ti = self._index(domain, t, site)
        if self.count[site][d, ti] == 0:
            raise NormError(f"model not trained at this site (domain={domain}, t={t}, site={site})")
        return self.mean[site][d, ti], self.var[site][d, ti]

    def has_slot(self, domain, t, site):
        d, ti = self._index(domain, t, site)
        return self.count[site][d, ti] > 0

    def _index(self, domain, t, site):
        if domain not in (1, 2):
            raise NormError(f"unknown domain flag {domain}")
        if site not in self.widths:
            raise NormError(f"unknown site {site!r}")
        if t < 1:
            raise NormError("timesteps are 1-based")
        return domain - 1, min(t, self.t_max) - 1

    def update_block(self, domain, site, batch_mean, batch_var, momentum):
        """EMA update of timesteps 1..T at once; batch arrays have shape (T, width)."""
        T = batch_mean.shape[0]
        if T > self.t_max:
            raise NormError(f"{T} timesteps exceed T_max={self.t_max}")
        if batch_var.min() < 0:
            raise NormError("negative batch variance")
        d = domain - 1
        for store, batch in ((self.mean[site][d, :T], batch_mean), (self.var[site][d, :T], batch_var)):
            store *= 1 - momentum
            store += momentum * batch
        self.count[site][d, :T] += 1

    def __eq__(self, other):
        if not isinstance(other, PopulationStats):
            return NotImplemented
        return (self.t_max == other.t_max and self.widths == other.widths and all(
            np.array_equal(getattr(self, a)[s], getattr(other, a)[s])
            for a in ("mean", "var", "count") for s in self.widths))


def update_population(stats: PopulationStats, domain, timestep, site, batch_mean, batch_var,
                      momentum=0.01):
    if not 0 < momentum <= 1:
        raise NormError("momentum must lie in (0, 1]")
    batch_var = np.asarray(batch_var, dtype=np.float64)
    if np.any(batch_var < 0):
        raise NormError("negative batch variance")
    d, ti = stats._index(domain, timestep, site)
    m = momentum
    stats.mean[site][d, ti] = (1 - m) * stats.mean[site][d, ti] + m * np.asarray(batch_mean)
    stats.var[site][d, ti] = (1 - m) * stats.var[site][d, ti] + m * batch_var
    stats.count[site][d, ti] += 1
    return stats


def inference_norm(values, stats: PopulationStats, domain_flag, timestep, site,
                   params: NormalizerParams):
    """Normalize with the flagged domain's population estimates; timesteps
    past T_max reuse the last slot."""
    mean, var = stats.slot(domain_flag, timestep, site)
    return params.beta + params.gamma * (np.asarray(values) - mean) / np.sqrt(var + params.epsilon)
