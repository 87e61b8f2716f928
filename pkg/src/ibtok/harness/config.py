"""Training configuration and its YAML file format.

Example file (every key optional; unknown keys are rejected)::

    seed: 0
    steps: 2000
    batch_size: 32
    learning_rate: 0.05
    optimizer: momentum        # or "gd"
    log_interval: 50
    generator:
      num_classes: 4
      d_image: 16
      d_text: 4
      sigma_image: 0.25
      sigma_text: 0.25
      d_nuisance: 4
      n: 1000
      seed: 0
    hyper:
      beta: 1.0                # shorthand for beta_u = beta_g
      alpha: 1.0               # shorthand for alpha_u = alpha_g
      lam: 0.1
      tau: 0.2
    model:
      n_tokens: 4
      d_token: 8
      d_hidden: 32

``hyper`` also accepts the per-branch keys ``beta_u``, ``beta_g``,
``alpha_u``, ``alpha_g``; they override the shorthands.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import yaml

from ..synthdata import GeneratorConfig
from ..toymodel import InfoTokHyper, ModelDims

OPTIMIZERS = ("gd", "momentum")
MOMENTUM = 0.9


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ModelArch:
    n_tokens: int = 4
    d_token: int = 8
    d_hidden: int = 32


@dataclass(frozen=True)
class TrainConfig:
    generator: GeneratorConfig = field(default_factory=GeneratorConfig)
    hyper: InfoTokHyper = field(default_factory=InfoTokHyper)
    model: ModelArch = field(default_factory=ModelArch)
    steps: int = 2000
    batch_size: int = 32
    learning_rate: float = 0.05
    optimizer: str = "momentum"
    seed: int = 0
    log_interval: int = 50

    def validate(self) -> "TrainConfig":
        try:
            self.generator.validate()
        except ValueError as exc:
            raise ConfigError(f"generator: {exc}") from exc
        # zero steps is allowed: the run only records the initial state
        if self.steps < 0:
            raise ConfigError("steps must be non-negative")
        if self.batch_size < 2:
            raise ConfigError("batch_size must be at least 2")
        if self.batch_size > self.generator.n:
            raise ConfigError("batch_size exceeds the number of training samples")
        if not self.learning_rate >= 0:
            raise ConfigError("learning_rate must be non-negative")
        if self.optimizer not in OPTIMIZERS:
            raise ConfigError(f"optimizer must be one of {OPTIMIZERS}")
        if self.log_interval < 1:
            raise ConfigError("log_interval must be positive")
        return self

    @property
    def dims(self) -> ModelDims:
        return ModelDims(
            d_image=self.generator.d_image,
            n_tokens=self.model.n_tokens,
            d_token=self.model.d_token,
            d_latent=self.generator.d_text,
            n_classes=self.generator.num_classes,
            d_hidden=self.model.d_hidden,
        )

    def with_seed(self, seed: int) -> "TrainConfig":
        """Same config with both the training and the data seed replaced."""
        return replace(self, seed=seed, generator=replace(self.generator, seed=seed))

    def with_hyper(self, **kw) -> "TrainConfig":
        return replace(self, hyper=self.hyper.replace(**kw))

    def to_dict(self) -> dict:
        return asdict(self)


def _build(cls, data, section: str):
    if data is None:
        return cls()
    if not isinstance(data, dict):
        raise ConfigError(f"{section}: expected a mapping")
    known = {f.name for f in fields(cls)}
    unknown = set(data) - known
    if unknown:
        raise ConfigError(f"{section}: unknown keys {sorted(unknown)}")
    try:
        return cls(**data)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{section}: {exc}") from exc


def _hyper(data) -> InfoTokHyper:
    if data is None:
        return InfoTokHyper()
    if not isinstance(data, dict):
        raise ConfigError("hyper: expected a mapping")
    data = dict(data)
    merged = {}
    if "beta" in data:
        merged.update(beta_u=data["beta"], beta_g=data["beta"])
    if "alpha" in data:
        merged.update(alpha_u=data["alpha"], alpha_g=data["alpha"])
    data.pop("beta", None)
    data.pop("alpha", None)
    merged.update(data)
    return _build(InfoTokHyper, merged, "hyper")


def config_from_dict(data: dict) -> TrainConfig:
    if data is None:
        data = {}
    if not isinstance(data, dict):
        raise ConfigError("top level: expected a mapping")
    data = dict(data)
    top = {f.name for f in fields(TrainConfig)}
    unknown = set(data) - top
    if unknown:
        raise ConfigError(f"unknown keys {sorted(unknown)}")
    gen = _build(GeneratorConfig, data.pop("generator", None), "generator")
    hyper = _hyper(data.pop("hyper", None))
    model = _build(ModelArch, data.pop("model", None), "model")
    try:
        cfg = TrainConfig(generator=gen, hyper=hyper, model=model, **data)
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc
    return cfg.validate()


def load_config(path) -> TrainConfig:
    try:
        data = yaml.safe_load(Path(path).read_text())
    except (OSError, yaml.YAMLError) as exc:
        raise ConfigError(f"cannot read {path}: {exc}") from exc
    return config_from_dict(data)


def dump_config(config: TrainConfig, path) -> None:
    Path(path).write_text(yaml.safe_dump(config.to_dict(), sort_keys=False))
