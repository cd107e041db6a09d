"""Run configuration: a YAML document with one section per subsystem.

Unknown keys are rejected with their full key path. ``resolved()`` expands
every default so a run directory holds everything needed to repeat it.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Any

import yaml

from . import __version__
from .env import PhysicsConfig
from .physics import ConfigurationError
from .task import EpisodeConfig
from .training import TrainConfig


@dataclass(frozen=True)
class DrisSection:
    size: int = 10
    dataset_envs: int = 64
    dataset_episodes: int = 50
    dataset_instances: int = 200
    obs_subsets: bool = True

    def __post_init__(self):
        for f in fields(self):
            v = getattr(self, f.name)
            if f.name == "obs_subsets":
                continue
            if not isinstance(v, int) or isinstance(v, bool) or v < 1:
                raise ConfigurationError(f"dris.{f.name} must be an integer >= 1, got {v!r}")


@dataclass(frozen=True)
class NetworkSection:
    train_encoder: bool = False
    pretrain_epochs: int = 100
    pretrain_lr: float = 1e-3
    pretrain_batch: int = 64
    # Sets drawn per pretraining epoch; null uses the whole dataset.
    pretrain_samples: int | None = 4096

    def __post_init__(self):
        if self.pretrain_epochs < 1 or self.pretrain_batch < 1 or not self.pretrain_lr > 0:
            raise ConfigurationError("network: pretraining epochs, batch and lr must be positive")
        if self.pretrain_samples is not None and self.pretrain_samples < 1:
            raise ConfigurationError("network.pretrain_samples must be >= 1 or null")


@dataclass(frozen=True)
class PPOSection:
    n_envs: int = 64
    epochs: int = 300
    ppo_epochs: int = 10
    minibatch: int = 256
    clip: float = 0.2
    gamma: float = 0.95
    gae_lambda: float = 0.95
    lr: float = 3e-4
    entropy_coef: float = 0.003
    value_coef: float = 0.5
    max_grad_norm: float = 0.5
    train_obs_noise: float = 0.0
    checkpoint_every: int = 25


@dataclass(frozen=True)
class EvaluationSection:
    episodes: int = 512
    scenarios: tuple = ("noise", "exec", "ood")
    noise_levels: tuple = (0.0, 1.0, 2.0)
    batch: int = 256

    def __post_init__(self):
        if self.episodes < 1:
            raise ConfigurationError("evaluation.episodes must be >= 1")
        bad = set(self.scenarios) - {"noise", "exec", "ood"}
        if bad:
            raise ConfigurationError(f"evaluation.scenarios: unknown {sorted(bad)}")
        if any(lv < 0 for lv in self.noise_levels):
            raise ConfigurationError("evaluation.noise_levels must be >= 0")


@dataclass(frozen=True)
class TheorySection:
    particle_sequences: int = 100
    particle_sizes: tuple = (1, 10, 200)
    variance_sizes: tuple = (1, 2, 5, 10)
    variance_repetitions: int = 256
    synthetic_repetitions: int = 10_000
    unmasking_sizes: tuple = (1, 10, 100, 1000)
    unmasking_draws: int = 2000
    rademacher_samples: int = 128
    rademacher_draws: int = 2000
    ipm_samples: int = 256

    def __post_init__(self):
        for f in fields(self):
            v = getattr(self, f.name)
            vals = v if isinstance(v, tuple) else (v,)
            if not vals or any(not isinstance(x, int) or x < 1 for x in vals):
                raise ConfigurationError(f"theory.{f.name} must hold integers >= 1")


SECTIONS = {
    "physics": PhysicsConfig,
    "episode": EpisodeConfig,
    "dris": DrisSection,
    "network": NetworkSection,
    "ppo": PPOSection,
    "evaluation": EvaluationSection,
    "theory": TheorySection,
}


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    output_dir: str = "runs/default"
    physics: PhysicsConfig = field(default_factory=PhysicsConfig)
    episode: EpisodeConfig = field(default_factory=EpisodeConfig)
    dris: DrisSection = field(default_factory=DrisSection)
    network: NetworkSection = field(default_factory=NetworkSection)
    ppo: PPOSection = field(default_factory=PPOSection)
    evaluation: EvaluationSection = field(default_factory=EvaluationSection)
    theory: TheorySection = field(default_factory=TheorySection)

    def train_config(self, dris_size: int | None = None, train_encoder: bool | None = None) -> TrainConfig:
        return TrainConfig(
            dris_size=self.dris.size if dris_size is None else dris_size,
            train_encoder=self.network.train_encoder if train_encoder is None else train_encoder,
            seed=self.seed,
            obs_subsets=self.dris.obs_subsets,
            **dataclasses.asdict(self.ppo),
        )

    def resolved(self) -> dict:
        return _plain(dataclasses.asdict(self))

    def with_overrides(self, **kw) -> "RunConfig":
        return dataclasses.replace(self, **kw)


def _plain(x):
    if isinstance(x, dict):
        return {k: _plain(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_plain(v) for v in x]
    return x


# List-valued fields whose length is free; all other tuples are fixed-size.
VARIABLE_LENGTH = {"scenarios", "noise_levels", "particle_sizes", "variance_sizes", "unmasking_sizes"}
NULLABLE = {"pretrain_samples"}


def _coerce(path: str, default, value):
    """Match ``value`` to the type of the default it replaces."""
    name = path.rsplit(".", 1)[-1]
    if value is None and name in NULLABLE:
        return None
    if isinstance(default, bool) or isinstance(value, bool):
        if isinstance(default, bool) and isinstance(value, bool):
            return value
    elif isinstance(default, int) and isinstance(value, int):
        return value
    elif isinstance(default, float) and isinstance(value, (int, float)):
        return float(value)
    elif isinstance(default, str) and isinstance(value, str):
        return value
    elif isinstance(default, tuple) and isinstance(value, (list, tuple)):
        if name not in VARIABLE_LENGTH and len(value) != len(default):
            raise ConfigurationError(f"{path}: expected {len(default)} entries, got {len(value)}")
        if not default:
            return tuple(value)
        proto = 0.0 if any(isinstance(d, float) for d in default) else default[0]
        return tuple(_coerce(f"{path}[{i}]", proto, v) for i, v in enumerate(value))
    raise ConfigurationError(f"{path}: cannot use {value!r} where {type(default).__name__} is expected")


def _build(cls, data, path: str):
    if data is None:
        data = {}
    if not isinstance(data, dict):
        raise ConfigurationError(f"{path}: expected a mapping")
    known = {f.name: f for f in fields(cls)}
    unknown = sorted(set(data) - set(known))
    if unknown:
        raise ConfigurationError(f"unknown key {path + '.' if path else ''}{unknown[0]}")
    defaults = cls()
    kwargs = {}
    for name, value in data.items():
        key = f"{path}.{name}" if path else name
        if name in SECTIONS and cls is RunConfig:
            kwargs[name] = _build(SECTIONS[name], value, key)
        else:
            kwargs[name] = _coerce(key, getattr(defaults, name), value)
    try:
        return cls(**kwargs)
    except ConfigurationError as exc:
        msg = str(exc)
        raise ConfigurationError(msg if path and path in msg else f"{path or 'config'}: {msg}") from None
    except TypeError as exc:
        raise ConfigurationError(f"{path or 'config'}: {exc}") from None


def config_from_dict(data: dict | None) -> RunConfig:
    return _build(RunConfig, data, "")


def load_config(path) -> RunConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigurationError(f"cannot read config {path}: {exc}") from None
    try:
        data = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigurationError(f"invalid YAML in {path}: {exc}") from None
    return config_from_dict(data)


def write_run_record(directory, cfg: RunConfig, command: str, extra: dict | None = None) -> Path:
    """Write the resolved config plus seed and version next to a run's outputs."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    record: dict[str, Any] = {"version": __version__, "command": command, "seed": cfg.seed}
    if extra:
        record.update(extra)
    record["config"] = cfg.resolved()
    out = directory / "run.yaml"
    out.write_text(yaml.safe_dump(record, sort_keys=True))
    return out
