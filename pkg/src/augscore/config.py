"""Run configuration: a strict JSON schema with materialized defaults.

A run is fully specified by one JSON document with four sections (dataset,
score, cl, aug) plus a seed.  Parsing is strict: unknown keys and
out-of-range values are errors, and every default is materialized so the
echoed resolved config re-parses to an identical object.  The only entropy
source anywhere is the seed.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

from .augment import AugPolicy
from .losses import (METHODS, SIMCLR_FORMS, WEIGHT_MODES, WEIGHT_NORMS,
                     LossConfig)

SAMPLING_MODES = ("all", "median_threshold")
OPTIMIZERS = ("sgd", "adam")
DATASET_KINDS = ("synth", "cifar10", "file")

# per-method training defaults, desk-scaled from the usual recipes
_METHOD_DEFAULTS = {
    "simclr": {"optimizer": "sgd", "lr": 0.5, "weight_decay": 5e-4},
    "simsiam": {"optimizer": "sgd", "lr": 0.06, "weight_decay": 5e-4},
    "wmse": {"optimizer": "adam", "lr": 1e-3, "weight_decay": 1e-6},
    "vicreg": {"optimizer": "adam", "lr": 1e-3, "weight_decay": 1e-6},
}


class ConfigError(ValueError):
    """Malformed, unknown, or out-of-range configuration input."""


@dataclass
class DatasetConfig:
    kind: str = "synth"
    n: int = 2000
    n_test: int = 500
    resolution: int = 32
    class_count: int = 4
    path: str | None = None

    def validate(self):
        if self.kind not in DATASET_KINDS:
            raise ConfigError(f"dataset.kind must be one of {DATASET_KINDS}")
        if self.kind == "synth":
            if self.n < 1 or self.n_test < 1:
                raise ConfigError("dataset.n and n_test must be positive")
            if not 1 <= self.class_count <= 4:
                raise ConfigError("dataset.class_count must be in [1, 4]")
            if self.resolution < 8 or self.resolution % 4:
                raise ConfigError("dataset.resolution must be >= 8 and "
                                  "divisible by 4")
        elif self.path is None:
            raise ConfigError(f"dataset.kind {self.kind!r} needs dataset.path")
        return self


@dataclass
class ScoreConfig:
    epochs: int = 30
    batch_size: int = 100
    lr: float = 1e-3
    channels: tuple = (8, 16, 32)
    sigma_levels: int = 4
    sigma_max: float = 1.0
    sigma_min: float = 0.01
    sigma_index: int | None = None   # 1-based; None = smallest

    def validate(self):
        if self.epochs < 0 or self.batch_size < 1 or self.lr <= 0:
            raise ConfigError("score.epochs/batch_size/lr out of range")
        if len(self.channels) != 3 or min(self.channels) < 1:
            raise ConfigError("score.channels must be three positive ints")
        if self.sigma_levels < 1 or not 0 < self.sigma_min <= self.sigma_max:
            raise ConfigError("score sigma ladder out of range")
        if self.sigma_levels > 1 and self.sigma_min == self.sigma_max:
            raise ConfigError("sigma_min must differ from sigma_max for a "
                              "multi-level ladder")
        if self.sigma_index is not None and not \
                1 <= self.sigma_index <= self.sigma_levels:
            raise ConfigError("score.sigma_index out of ladder range")
        return self


@dataclass
class CLConfig:
    method: str = "simclr"
    epochs: int = 50
    batch_size: int = 128
    optimizer: str | None = None     # None -> method default
    lr: float | None = None
    weight_decay: float | None = None
    momentum: float = 0.9
    warmup_frac: float = 0.1
    tau: float = 0.5
    lam: float = 25.0
    mu: float = 25.0
    nu: float = 1.0
    eps_var: float = 1e-4
    whiten_eps: float = 1e-6
    weight_mode: str = "score"
    weight_norm: str = "batch_mean"
    simclr_form: str = "alg1"
    sampling: str = "all"

    def materialize(self):
        """Fill optimizer/lr/weight_decay from the method defaults."""
        if self.method in _METHOD_DEFAULTS:
            d = _METHOD_DEFAULTS[self.method]
            if self.optimizer is None:
                self.optimizer = d["optimizer"]
            if self.lr is None:
                self.lr = d["lr"]
            if self.weight_decay is None:
                self.weight_decay = d["weight_decay"]
        return self

    def validate(self):
        self.materialize()
        try:
            self.loss_config().validate()
        except ValueError as e:
            raise ConfigError(str(e)) from e
        if self.method not in METHODS:
            raise ConfigError(f"cl.method must be one of {METHODS}")
        if self.epochs < 0 or self.batch_size < 2:
            raise ConfigError("cl.epochs must be >= 0 and batch_size >= 2")
        if self.optimizer not in OPTIMIZERS:
            raise ConfigError(f"cl.optimizer must be one of {OPTIMIZERS}")
        if self.lr <= 0 or self.weight_decay < 0 or not 0 <= self.momentum < 1:
            raise ConfigError("cl optimizer hyperparameters out of range")
        if not 0 <= self.warmup_frac < 1:
            raise ConfigError("cl.warmup_frac must be in [0, 1)")
        if self.sampling not in SAMPLING_MODES:
            raise ConfigError(f"cl.sampling must be one of {SAMPLING_MODES}")
        if self.simclr_form == "eq6" and self.weight_mode not in ("constant",
                                                                   "score"):
            raise ConfigError("eq6 weighting needs a pairwise distance "
                              "matrix; only constant and score modes "
                              "provide one")
        return self

    def loss_config(self) -> LossConfig:
        return LossConfig(method=self.method, tau=self.tau, lam=self.lam,
                          mu=self.mu, nu=self.nu, eps_var=self.eps_var,
                          whiten_eps=self.whiten_eps,
                          weight_mode=self.weight_mode,
                          weight_norm=self.weight_norm,
                          simclr_form=self.simclr_form)


@dataclass
class RunConfig:
    seed: int
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    score: ScoreConfig = field(default_factory=ScoreConfig)
    cl: CLConfig = field(default_factory=CLConfig)
    aug: AugPolicy = field(default_factory=AugPolicy)

    def validate(self):
        if not isinstance(self.seed, int) or self.seed < 0:
            raise ConfigError("seed must be a nonnegative integer")
        self.dataset.validate()
        self.score.validate()
        self.cl.validate()
        try:
            self.aug.validate()
        except ValueError as e:
            raise ConfigError(f"aug: {e}") from e
        return self


_SECTIONS = {"dataset": DatasetConfig, "score": ScoreConfig, "cl": CLConfig,
             "aug": AugPolicy}
_TUPLE_FIELDS = {"channels", "crop_scale", "crop_aspect", "jitter_strengths"}


def _build_section(cls, data: dict, prefix: str):
    known = {f.name for f in fields(cls)}
    for key in data:
        if key not in known:
            raise ConfigError(f"unknown key '{prefix}{key}'")
    kwargs = {}
    for key, value in data.items():
        if key in _TUPLE_FIELDS:
            if not isinstance(value, (list, tuple)):
                raise ConfigError(f"{prefix}{key} must be a list")
            value = tuple(value)
        kwargs[key] = value
    try:
        return cls(**kwargs)
    except TypeError as e:
        raise ConfigError(f"bad value in section {prefix[:-1]}: {e}") from e


def parse_config_dict(doc: dict) -> RunConfig:
    if not isinstance(doc, dict):
        raise ConfigError("config root must be a JSON object")
    known = {"seed", *_SECTIONS}
    for key in doc:
        if key not in known:
            raise ConfigError(f"unknown key {key!r}")
    if "seed" not in doc:
        raise ConfigError("config must set a seed")
    sections = {}
    for name, cls in _SECTIONS.items():
        sub = doc.get(name, {})
        if not isinstance(sub, dict):
            raise ConfigError(f"section {name!r} must be an object")
        sections[name] = _build_section(cls, sub, f"{name}.")
    cfg = RunConfig(seed=doc["seed"], **sections)
    return cfg.validate()


def parse_config(path) -> RunConfig:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"no such config file: {path}")
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as e:
        raise ConfigError(f"syntax error at line {e.lineno} column {e.colno}: "
                          f"{e.msg}") from e
    return parse_config_dict(doc)


def resolved_dict(cfg: RunConfig) -> dict:
    """Every field materialized; parse(resolved) == cfg."""
    out = {"seed": cfg.seed}
    for name in _SECTIONS:
        section = asdict(getattr(cfg, name))
        for key in list(section):
            if key in _TUPLE_FIELDS:
                section[key] = list(section[key])
        out[name] = section
    return out


def dump_resolved(cfg: RunConfig, path) -> None:
    Path(path).write_text(json.dumps(resolved_dict(cfg), indent=2,
                                     sort_keys=True) + "\n")
