"""Flat ``key = value`` configuration shared by the command-line tools.

One setting per line, ``#`` starts a comment. Keys mirror the fields of
TrainConfig and SynthConfig plus a handful of file paths. Unknown keys and
malformed values are rejected before any work starts.
"""

from __future__ import annotations

from dataclasses import dataclass, field, fields

from .data import SynthConfig
from .training import TrainConfig


class ConfigFileError(ValueError):
    pass


_TRUE = {"1", "true", "yes", "on"}
_FALSE = {"0", "false", "no", "off"}

PATH_KEYS = ("d1", "d2", "test1", "test2", "checkpoint", "runlog", "out1", "out2")
_SYNTH_KEYS = ("latent_states", "labels_per_domain", "feature_dim", "noise_sigma",
               "sequence_length", "sequences_per_domain", "persons_per_domain", "relatedness",
               "stay_prob", "successor_concentration")


def _parse_bool(key, text):
    t = text.strip().lower()
    if t in _TRUE:
        return True
    if t in _FALSE:
        return False
    raise ConfigFileError(f"{key}: expected on/off, got {text!r}")


def _parse(key, text, like):
    try:
        if isinstance(like, bool):
            return _parse_bool(key, text)
        if isinstance(like, int):
            return int(text)
        if isinstance(like, float):
            return float(text)
        if isinstance(like, tuple):
            return tuple(int(v) for v in text.split(","))
    except ValueError:
        raise ConfigFileError(f"{key}: cannot parse {text!r}") from None
    return text


@dataclass
class CliConfig:
    train: TrainConfig = field(default_factory=TrainConfig)
    synth: SynthConfig = field(default_factory=SynthConfig)
    paths: dict = field(default_factory=dict)

    @classmethod
    def known_keys(cls):
        keys = {f.name for f in fields(TrainConfig)} | set(_SYNTH_KEYS) | set(PATH_KEYS)
        return sorted(keys)

    def set(self, key, text):
        if key in PATH_KEYS:
            self.paths[key] = text
            return
        if key in _SYNTH_KEYS:
            setattr(self.synth, key, _parse(key, text, getattr(self.synth, key)))
            return
        if key in {f.name for f in fields(TrainConfig)}:
            value = _parse(key, text, getattr(self.train, key))
            setattr(self.train, key, value)
            if key == "seed":
                self.synth.seed = value
            return
        raise ConfigFileError(f"unknown configuration key {key!r}")

    def validate(self):
        try:
            self.train.validate()
            self.synth.validate()
        except ValueError as exc:
            raise ConfigFileError(str(exc)) from None
        return self


def parse_lines(lines, source="<config>"):
    cfg = CliConfig()
    for no, raw in enumerate(lines, 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigFileError(f"{source}:{no}: expected 'key = value'")
        key, value = (part.strip() for part in line.split("=", 1))
        if not key or not value:
            raise ConfigFileError(f"{source}:{no}: empty key or value")
        try:
            cfg.set(key, value)
        except ConfigFileError as exc:
            raise ConfigFileError(f"{source}:{no}: {exc}") from None
    return cfg


def load_config(path=None, overrides=()):
    """Read `path` (optional) and apply (key, value) overrides in order."""
    if path is None:
        cfg = CliConfig()
    else:
        try:
            with open(path) as fh:
                cfg = parse_lines(fh.read().splitlines(), str(path))
        except OSError as exc:
            raise ConfigFileError(f"cannot read config {path}: {exc}") from None
    for key, value in overrides:
        cfg.set(key, value)
    return cfg.validate()
