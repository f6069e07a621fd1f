"""Desk-scale synthetic experiments: cross-domain benefit, relatedness
ordering and alpha initialisation.

Each run generates a coupled pair of synthetic domains, holds out a quarter
of the persons of each domain, trains one protocol and reports the final
frame accuracy on the held-out persons.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field, replace

import numpy as np

from .data import SynthConfig, generate_coupled_markov, split_leave_person_out
from .training import TrainConfig, train

DESK = dict(iterations=5000, batch_size=32, n1=16, hidden=32, history=50, layers=2,
            learning_rate=1.0)


@dataclass
class RunResult:
    name: str
    seed: int
    rho: float
    acc: tuple  # (acc_d1, acc_d2); None where not measured
    seconds: float
    final_alphas: list = field(default_factory=list)
    log: object = None


def _splits(rho, seed, synth=None):
    cfg = replace(synth or SynthConfig(), relatedness=rho, seed=seed)
    d1, d2 = generate_coupled_markov(cfg)
    return split_leave_person_out(d1) + split_leave_person_out(d2)


def run(name, rho, seed, overrides=None, synth=None, keep_log=False):
    """One named run: 'ddlstm', 'joint_lstm', 'single_d1', 'single_d2'."""
    tr1, te1, tr2, te2 = _splits(rho, seed, synth)
    params = dict(DESK, seed=seed, **(overrides or {}))
    t0 = time.perf_counter()
    if name == "ddlstm":
        cfg = TrainConfig(protocol="ddlstm", cell_kind="ddlstm", **params)
        model, log = train(cfg, tr1, tr2, te1, te2)
        acc = log.final_accuracy()
    elif name == "joint_lstm":
        cfg = TrainConfig(protocol="joint", cell_kind="lstm", **params)
        model, log = train(cfg, tr1, tr2, te1, te2)
        acc = log.final_accuracy()
    elif name in ("single_d1", "single_d2"):
        cfg = TrainConfig(protocol="single", cell_kind="bnlstm", **params)
        tr, te = (tr1, te1) if name == "single_d1" else (tr2, te2)
        model, log = train(cfg, tr, None, te)
        a = log.final_accuracy()[0]
        acc = (a, None) if name == "single_d1" else (None, a)
    else:
        raise ValueError(f"unknown run {name!r}")
    seconds = time.perf_counter() - t0
    alphas = [(a.alpha1, a.alpha2) for a in model.alphas]
    return RunResult(name, seed, rho, acc, seconds, alphas, log if keep_log else None)


@dataclass
class BenefitSummary:
    rho: float
    seeds: tuple
    ddlstm: np.ndarray  # (seeds, 2)
    single: np.ndarray  # (seeds, 2)
    joint: np.ndarray  # (seeds, 2)
    seconds: float
    runs: list

    def mean(self, which):
        return getattr(self, which).mean(axis=0)

    @property
    def gain_over_single(self):
        return self.mean("ddlstm") - self.mean("single")

    @property
    def gain_over_joint(self):
        return self.mean("ddlstm") - self.mean("joint")


def benefit_experiment(rho=0.9, seeds=(0, 1, 2), include_joint=True, overrides=None,
                       progress=None, keep_logs=False):
    runs = []
    t0 = time.perf_counter()
    dd, single, joint = [], [], []
    for seed in seeds:
        names = ["ddlstm", "single_d1", "single_d2"] + (["joint_lstm"] if include_joint else [])
        res = {}
        for name in names:
            r = run(name, rho, seed, overrides, keep_log=keep_logs)
            runs.append(r)
            res[name] = r
            if progress:
                progress(r)
        dd.append(res["ddlstm"].acc)
        single.append((res["single_d1"].acc[0], res["single_d2"].acc[1]))
        if include_joint:
            joint.append(res["joint_lstm"].acc)
    as_arr = lambda v: np.array(v, dtype=np.float64) if v else np.full((len(seeds), 2), np.nan)
    return BenefitSummary(rho, tuple(seeds), as_arr(dd), as_arr(single), as_arr(joint),
                          time.perf_counter() - t0, runs)


def alpha_init_experiment(inits=(0.55, 0.75, 0.95), rho=0.9, seed=0, overrides=None,
                          progress=None):
    """Final per-layer alphas and run logs for several initial alphas on one
    fixed dataset."""
    out = {}
    for a in inits:
        r = run("ddlstm", rho, seed, dict(overrides or {}, alpha_init=a), keep_log=True)
        out[a] = r
        if progress:
            progress(r)
    return out
