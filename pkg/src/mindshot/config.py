"""Experiment configuration.

Configs are plain nested dataclasses. ``load_config`` reads a YAML file and
rejects unknown keys at every nesting level so that typos fail loudly.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import yaml


class ConfigError(ValueError):
    """Raised for malformed or inconsistent configuration."""


@dataclass
class LossWeights:
    w_softclip: float = 1.0
    w_prior: float = 30.0
    w_amp: float = 2.0
    w_pha: float = 2.0
    # only used by the ``mse`` supervision mode
    w_mse: float = 2.0

    def validate(self):
        for f in dataclasses.fields(self):
            v = getattr(self, f.name)
            if not v >= 0:
                raise ConfigError(f"loss weight {f.name} must be nonnegative, got {v}")


@dataclass
class DataConfig:
    n_classes: int = 10
    train_per_class: int = 20
    test_per_class: int = 10
    n_subjects: int = 4
    canonical_len: int = 96
    raw_multiple: int = 4
    embed_dim: int = 64
    sigma_stim: float = 0.15
    noise_sigma: float = 0.3
    subject_nonlinearity: bool = False

    def validate(self):
        if self.n_classes < 2:
            raise ConfigError("data.n_classes must be >= 2")
        if self.train_per_class < 1 or self.test_per_class < 1:
            raise ConfigError("data.train_per_class and data.test_per_class must be >= 1")
        if self.n_subjects < 1:
            raise ConfigError("data.n_subjects must be >= 1")
        if self.canonical_len < 1 or self.embed_dim < 1:
            raise ConfigError("data.canonical_len and data.embed_dim must be positive")
        if not 2 <= self.raw_multiple <= 8:
            raise ConfigError("data.raw_multiple must lie in [2, 8]")
        if self.sigma_stim < 0 or self.noise_sigma < 0:
            raise ConfigError("data.sigma_stim and data.noise_sigma must be nonnegative")


@dataclass
class ModelConfig:
    hidden: int = 128
    n_blocks: int = 2
    proj_hidden: int = 128
    adapter_depth: int = 1
    adapter_residual: bool = True

    def validate(self):
        if self.hidden < 1 or self.proj_hidden < 1 or self.n_blocks < 0:
            raise ConfigError("model dims must be positive")
        if self.adapter_depth not in (1, 2, 3):
            raise ConfigError("model.adapter_depth must be 1, 2 or 3")


SUPERVISION_MODES = ("none", "mse", "amp", "fourier")


@dataclass
class TrainConfig:
    phase: str = "pretrain"
    epochs: int = 240
    batch_size: int = 64
    max_lr: float = 3e-4
    weights: LossWeights = field(default_factory=LossWeights)
    tau: float = 0.1
    seed: int = 0
    supervision: str = "fourier"
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 1e-2
    use_prior: bool = True
    wrap_phase_diff: bool = False
    bidirectional: bool = False
    checkpoint_every: int = 0

    def validate(self):
        if self.phase not in ("pretrain", "adapt"):
            raise ConfigError(f"train phase must be 'pretrain' or 'adapt', got {self.phase!r}")
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1")
        if self.batch_size < 2:
            raise ConfigError("batch_size must be >= 2")
        if not self.max_lr > 0:
            raise ConfigError("max_lr must be positive")
        if not self.tau > 0:
            raise ConfigError("tau must be positive")
        if self.supervision not in SUPERVISION_MODES:
            raise ConfigError(f"supervision must be one of {SUPERVISION_MODES}")
        if self.checkpoint_every < 0:
            raise ConfigError("checkpoint_every must be >= 0")
        self.weights.validate()


@dataclass
class SelectConfig:
    method: str = "pca"
    strategy: str = "first"

    def validate(self):
        if self.method not in ("pca", "tsne"):
            raise ConfigError("select.method must be 'pca' or 'tsne'")
        if self.strategy not in ("first", "kda_max", "kda_min", "random"):
            raise ConfigError("select.strategy must be first, kda_max, kda_min or random")


@dataclass
class EvalConfig:
    topk: tuple = (1, 5)

    def validate(self):
        if not self.topk or any(int(k) < 1 for k in self.topk):
            raise ConfigError("eval.topk must be a nonempty list of positive ints")
        self.topk = tuple(int(k) for k in self.topk)


def _pretrain_default():
    return TrainConfig(phase="pretrain", batch_size=64)


def _adapt_default():
    return TrainConfig(phase="adapt", batch_size=32)


@dataclass
class ExperimentConfig:
    seed: int = 0
    output_dir: str = "runs/default"
    # subject indices (0-based) used for pretraining; the new subject is adapted
    pretrain_subjects: tuple = (0, 1, 2)
    new_subject: int = 3
    shots: int = 1
    data: DataConfig = field(default_factory=DataConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    pretrain: TrainConfig = field(default_factory=_pretrain_default)
    adapt: TrainConfig = field(default_factory=_adapt_default)
    select: SelectConfig = field(default_factory=SelectConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    def validate(self):
        self.data.validate()
        self.model.validate()
        self.pretrain.validate()
        self.adapt.validate()
        self.select.validate()
        self.eval.validate()
        self.pretrain_subjects = tuple(int(s) for s in self.pretrain_subjects)
        n = self.data.n_subjects
        if len(self.pretrain_subjects) < 1:
            raise ConfigError("pretrain_subjects must not be empty")
        if len(set(self.pretrain_subjects)) != len(self.pretrain_subjects):
            raise ConfigError("pretrain_subjects contains duplicates")
        for s in (*self.pretrain_subjects, self.new_subject):
            if not 0 <= s < n:
                raise ConfigError(f"subject index {s} out of range for {n} subjects")
        if self.new_subject in self.pretrain_subjects:
            raise ConfigError("new_subject must not be a pretraining subject")
        if not 1 <= self.shots <= self.data.train_per_class:
            raise ConfigError("shots must lie in [1, data.train_per_class]")
        if self.pretrain.phase != "pretrain" or self.adapt.phase != "adapt":
            raise ConfigError("pretrain/adapt blocks must carry their own phase")
        return self


def _build(cls, raw: Any, path: str):
    if not isinstance(raw, dict):
        raise ConfigError(f"{path or 'config'}: expected a mapping, got {type(raw).__name__}")
    known = {f.name: f for f in dataclasses.fields(cls)}
    kwargs = {}
    for key, value in raw.items():
        where = f"{path}.{key}" if path else key
        if key not in known:
            raise ConfigError(f"unknown config key: {where}")
        f = known[key]
        default = f.default_factory() if f.default_factory is not dataclasses.MISSING else f.default
        if dataclasses.is_dataclass(default):
            # keep block defaults (e.g. adapt batch size) and overlay the given keys
            merged = {**_to_plain(default), **(value or {})}
            kwargs[key] = _build(type(default), merged, where)
        elif isinstance(default, tuple):
            if not isinstance(value, (list, tuple)):
                raise ConfigError(f"{where}: expected a list")
            kwargs[key] = tuple(value)
        elif isinstance(default, bool):
            if not isinstance(value, bool):
                raise ConfigError(f"{where}: expected a boolean")
            kwargs[key] = value
        elif isinstance(default, int):
            if isinstance(value, bool) or not isinstance(value, int):
                raise ConfigError(f"{where}: expected an integer")
            kwargs[key] = value
        elif isinstance(default, float):
            if isinstance(value, bool) or not isinstance(value, (int, float)):
                raise ConfigError(f"{where}: expected a number")
            kwargs[key] = float(value)
        else:
            kwargs[key] = value
    return cls(**kwargs)


def _to_plain(obj):
    if dataclasses.is_dataclass(obj):
        return {f.name: _to_plain(getattr(obj, f.name)) for f in dataclasses.fields(obj)}
    if isinstance(obj, tuple):
        return [_to_plain(v) for v in obj]
    return obj


def config_from_dict(raw: dict) -> ExperimentConfig:
    try:
        cfg = _build(ExperimentConfig, raw or {}, "")
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc
    return cfg.validate()


def config_to_dict(cfg) -> dict:
    return _to_plain(cfg)


def load_config(path) -> ExperimentConfig:
    text = Path(path).read_text()
    try:
        raw = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigError(f"cannot parse {path}: {exc}") from exc
    return config_from_dict(raw or {})


def dump_config(cfg, path):
    Path(path).write_text(yaml.safe_dump(config_to_dict(cfg), sort_keys=True))
