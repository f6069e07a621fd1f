"""``ddlstm`` command line: gen, train, eval, verify, alphas.

Any configuration key can be given as ``--key value`` (dashes or
underscores); flags override the ``--config`` file. Exit codes: 0 success,
1 validation error (bad config, unreadable or mismatched input), 2 runtime
or numeric failure.
"""

from __future__ import annotations

import argparse
import os
import sys

from .checkpoint import load_checkpoint, save_checkpoint
from .config import ConfigFileError, load_config
from .data import generate_coupled_markov, load_sequences, save_sequences
from .training import (
    TrainingError,
    evaluate_frame_accuracy,
    read_runlog_csv,
    train,
)

EXIT_OK, EXIT_INVALID, EXIT_RUNTIME = 0, 1, 2


class UsageError(ValueError):
    pass


def _err(msg):
    print(f"ddlstm: {msg}", file=sys.stderr)


def _overrides(extra):
    """['--key', 'v', '--other=w'] -> [('key', 'v'), ('other', 'w')]."""
    out = []
    k = 0
    while k < len(extra):
        tok = extra[k]
        if not tok.startswith("--") or len(tok) == 2:
            raise UsageError(f"unexpected argument {tok!r}")
        if "=" in tok:
            key, value = tok[2:].split("=", 1)
            k += 1
        else:
            if k + 1 >= len(extra):
                raise UsageError(f"{tok} needs a value")
            key, value = tok[2:], extra[k + 1]
            k += 2
        out.append((key.replace("-", "_"), value))
    return out


def _writable(path):
    parent = os.path.dirname(os.path.abspath(path))
    if not os.path.isdir(parent) or not os.access(parent, os.W_OK):
        raise UsageError(f"cannot write {path}: directory missing or not writable")


def _need(paths, *keys):
    missing = [k for k in keys if not paths.get(k)]
    if missing:
        raise UsageError("missing " + ", ".join("--" + k for k in missing))


def cmd_gen(cfg):
    _need(cfg.paths, "out1", "out2")
    for key in ("out1", "out2"):
        _writable(cfg.paths[key])
    d1, d2 = generate_coupled_markov(cfg.synth)
    save_sequences(d1, cfg.paths["out1"])
    save_sequences(d2, cfg.paths["out2"])
    print(f"d1 {d1.summary()}")
    print(f"d2 {d2.summary()}")
    return EXIT_OK


def _load(paths, key):
    return load_sequences(paths[key]) if paths.get(key) else None


def cmd_train(cfg):
    tc, paths = cfg.train, cfg.paths
    _need(paths, "d1", "checkpoint")
    if tc.protocol == "single" and paths.get("d2"):
        raise UsageError("protocol single trains on one dataset; drop --d2")
    if tc.protocol != "single" and not paths.get("d2"):
        raise UsageError(f"protocol {tc.protocol} needs --d2")
    _writable(paths["checkpoint"])
    if paths.get("runlog"):
        _writable(paths["runlog"])
    d1, d2, t1, t2 = (_load(paths, k) for k in ("d1", "d2", "test1", "test2"))
    model, log = train(tc, d1, d2, t1, t2)
    save_checkpoint(model, paths["checkpoint"])
    if paths.get("runlog"):
        log.write_csv(paths["runlog"])
    acc = log.final_accuracy()
    if tc.protocol == "single" and acc:
        acc = (acc[0], None)
    fmt = lambda v: "n/a" if v is None else f"{v:.4f}"
    if acc:
        print(f"acc_d1={fmt(acc[0])} acc_d2={fmt(acc[1])}")
    if model.alphas:
        print("alphas=" + ";".join(f"{a.alpha1:.4f},{a.alpha2:.4f}" for a in model.alphas))
    if log.losses:
        print(f"final_loss={log.losses[-1]:.6f}")
    return EXIT_OK


def cmd_eval(checkpoint, data, domain):
    model = load_checkpoint(checkpoint)
    ds = load_sequences(data)
    print(f"{evaluate_frame_accuracy(model, ds, domain):.4f}")
    return EXIT_OK


def cmd_verify(scope):
    from .verify import format_line, run_checks
    results = run_checks(scope)
    for r in results:
        print(format_line(r))
    failed = [r.name for r in results if not r.passed]
    if failed:
        _err("failed checks: " + ", ".join(failed))
        return EXIT_RUNTIME
    return EXIT_OK


def cmd_alphas(runlog):
    rows = read_runlog_csv(runlog)
    print("iter,layer,alpha1,alpha2")
    for row in rows:
        if row["alpha1"]:
            print(f"{row['iter']},{row['layer']},{row['alpha1']},{row['alpha2']}")
    return EXIT_OK


def build_parser():
    p = argparse.ArgumentParser(prog="ddlstm", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)
    for name, text in (("gen", "generate a coupled pair of synthetic domains"),
                       ("train", "train under a protocol; write checkpoint and run log")):
        s = sub.add_parser(name, help=text)
        s.add_argument("--config", help="key = value configuration file")
    e = sub.add_parser("eval", help="frame accuracy of a checkpoint on a sequence file")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--domain", type=int, choices=(1, 2), default=1)
    v = sub.add_parser("verify", help="gradient, reduction and statistics self-checks")
    v.add_argument("--scope", choices=("grad", "reduction", "stats", "all"), default="all")
    a = sub.add_parser("alphas", help="export alpha trajectories from a run log as CSV")
    a.add_argument("--runlog", required=True)
    return p


def main(argv=None):
    parser = build_parser()
    args, extra = parser.parse_known_args(argv)
    try:
        if args.command in ("gen", "train"):
            cfg = load_config(args.config, _overrides(extra))
            return cmd_gen(cfg) if args.command == "gen" else cmd_train(cfg)
        if extra:
            raise UsageError(f"unexpected arguments: {' '.join(extra)}")
        if args.command == "eval":
            return cmd_eval(args.checkpoint, args.data, args.domain)
        if args.command == "verify":
            return cmd_verify(args.scope)
        return cmd_alphas(args.runlog)
    except (TrainingError, ArithmeticError) as exc:
        _err(str(exc))
        return EXIT_RUNTIME
    except (ValueError, ConfigFileError, OSError) as exc:
        _err(str(exc))
        return EXIT_INVALID


if __name__ == "__main__":
    sys.exit(main())
