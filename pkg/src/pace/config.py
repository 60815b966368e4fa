"""Flat ``key = value`` run configuration with desk-scale defaults.

Lines starting with ``#`` and trailing ``# ...`` comments are ignored.
Unknown keys, malformed lines and out-of-range values raise
:class:`ConfigError` naming the offending key.
"""
from __future__ import annotations

from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np

from . import blackbox as bb
from . import explainer as X


class ConfigError(ValueError):
    pass


# sub-seed names, in the order they are derived from the root seed
SEED_NAMES = ("bb", "pace", "kmeans", "null")


@dataclass(frozen=True)
class RunConfig:
    # dataset
    seed: int = 42
    num_classes: int = 4
    images_per_class: int = 500
    # black-box
    bb_epochs: int = 20
    bb_batch_size: int = 64
    bb_learning_rate: float = 1e-3
    bb_weight_decay: float = 5e-5
    # explainer
    num_concepts: int = 4
    embed_dim: int = 8
    tau: float = 95.0
    eps: float = 1e-6
    alpha: float = 1.0
    beta: float = 100.0
    gamma: float = 10.0
    delta: float = 1.0
    omega: float = 1.0
    rho: int = 5
    onehot_target: bool = False
    ce_form: str = "binary"
    pace_epochs: int = 40
    pace_batch_size: int = 32
    pace_learning_rate: float = 1e-3
    pace_weight_decay: float = 0.1
    # evaluation
    permutations: int = 100
    # paths
    workdir: str = "pace_run"

    @property
    def root(self) -> Path:
        return Path(self.workdir)

    @property
    def dataset_dir(self) -> Path:
        return self.root / "dataset"

    @property
    def checkpoint_dir(self) -> Path:
        return self.root / "checkpoints"

    @property
    def report_dir(self) -> Path:
        return self.root / "reports"

    def sub_seed(self, name: str) -> int:
        """Named seed derived from the root seed; the dataset uses the root seed itself."""
        i = SEED_NAMES.index(name)
        return int(np.random.SeedSequence([self.seed, i]).generate_state(1)[0])

    def hyper(self) -> X.Hyper:
        return X.Hyper(self.tau, self.eps, self.alpha, self.beta, self.gamma, self.delta,
                       self.omega, self.rho, self.onehot_target, self.ce_form)

    def blackbox_config(self) -> bb.TrainConfig:
        return bb.TrainConfig(self.bb_epochs, self.bb_batch_size, self.bb_learning_rate,
                              self.bb_weight_decay, self.sub_seed("bb"))

    def explainer_config(self) -> X.ExplainerConfig:
        return X.ExplainerConfig(self.num_concepts, self.embed_dim, self.pace_epochs,
                                 self.pace_batch_size, self.pace_learning_rate,
                                 self.pace_weight_decay, self.sub_seed("pace"), self.hyper())


# (predicate, description) per key; checked after parsing
_RANGES = {
    "seed": (lambda v: 0 <= v < 2 ** 32, "in [0, 2^32)"),
    "num_classes": (lambda v: 2 <= v <= 16, "in [2, 16]"),
    "images_per_class": (lambda v: v >= 10, ">= 10"),
    "bb_epochs": (lambda v: v >= 0, ">= 0"),
    "bb_batch_size": (lambda v: v >= 1, ">= 1"),
    "bb_learning_rate": (lambda v: v > 0, "> 0"),
    "bb_weight_decay": (lambda v: v >= 0, ">= 0"),
    "num_concepts": (lambda v: v >= 1, ">= 1"),
    "embed_dim": (lambda v: 1 <= v <= 64, "in [1, 64]"),
    "tau": (lambda v: 0 < v <= 100, "in (0, 100]"),
    "eps": (lambda v: v > 0, "> 0"),
    "alpha": (lambda v: v >= 0, ">= 0"),
    "beta": (lambda v: v >= 0, ">= 0"),
    "gamma": (lambda v: v >= 0, ">= 0"),
    "delta": (lambda v: v >= 0, ">= 0"),
    "omega": (lambda v: v >= 0, ">= 0"),
    "rho": (lambda v: v >= 1, ">= 1"),
    "ce_form": (lambda v: v in X.CE_FORMS, f"one of {', '.join(X.CE_FORMS)}"),
    "pace_epochs": (lambda v: v >= 0, ">= 0"),
    "pace_batch_size": (lambda v: v >= 1, ">= 1"),
    "pace_learning_rate": (lambda v: v > 0, "> 0"),
    "pace_weight_decay": (lambda v: v >= 0, ">= 0"),
    "permutations": (lambda v: v >= 1, ">= 1"),
    "workdir": (lambda v: bool(v.strip()), "non-empty"),
}

_TYPES = {f.name: f.type for f in fields(RunConfig)}


def _convert(key: str, raw: str):
    kind = _TYPES[key]
    try:
        if kind == "bool":
            low = raw.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if kind == "int":
            return int(raw)
        if kind == "float":
            value = float(raw)
            if not np.isfinite(value):
                raise ValueError(raw)
            return value
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {raw!r} as {kind}") from None
    return raw


def parse(text: str) -> RunConfig:
    values = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value'")
        key, raw = (s.strip() for s in line.split("=", 1))
        if key not in _TYPES:
            raise ConfigError(f"{key}: unknown key (line {lineno})")
        if key in values:
            raise ConfigError(f"{key}: given twice (line {lineno})")
        values[key] = _convert(key, raw)
    cfg = RunConfig(**values)
    validate(cfg)
    return cfg


def validate(cfg: RunConfig) -> None:
    for key, (ok, desc) in _RANGES.items():
        if not ok(getattr(cfg, key)):
            raise ConfigError(f"{key}: value {getattr(cfg, key)!r} must be {desc}")


def load(path) -> RunConfig:
    p = Path(path)
    try:
        text = p.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {p}: {exc.strerror}") from None
    return parse(text)


def render(cfg: RunConfig) -> str:
    """Config text that parses back to ``cfg``."""
    return "".join(f"{f.name} = {getattr(cfg, f.name)}\n" for f in fields(RunConfig))
