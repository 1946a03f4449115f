"""Experiment configuration: strict YAML loading, validation and hashing."""
from __future__ import annotations

import dataclasses
import hashlib
import json
import math
from dataclasses import dataclass, field
from typing import Any, Optional

import yaml

from . import env as E
from . import world as W
from .eval import AblationConfig
from .ppo import PpoConfig


class ConfigError(ValueError):
    """Invalid configuration; the message starts with the offending key path."""


@dataclass
class NetworkConfig:
    actor_hidden: tuple = (256, 128)
    critic_hidden: tuple = (256, 128)
    activation: str = "tanh"
    init_log_std: float = 0.0


@dataclass
class ExperimentConfig:
    world: W.WorldParams = field(default_factory=W.WorldParams)
    ranges: E.RandomizationRanges = field(default_factory=E.RandomizationRanges)
    curriculum: E.CurriculumSchedule = field(default_factory=E.CurriculumSchedule)
    rewards: E.RewardConfig = field(default_factory=E.RewardConfig)
    network: NetworkConfig = field(default_factory=NetworkConfig)
    ppo: PpoConfig = field(default_factory=PpoConfig)
    ablation: AblationConfig = field(default_factory=AblationConfig)
    seed: int = 0
    out_dir: str = "runs/default"
    # Train on a single curriculum level instead of the adaptive schedule.
    fixed_level: Optional[int] = None
    checkpoint_every: int = 50

    def to_dict(self) -> dict:
        return _plain(dataclasses.asdict(self))

    def dump(self) -> str:
        return yaml.safe_dump(self.to_dict(), sort_keys=False)

    def hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()

    def training_level(self) -> Optional[int]:
        if self.ablation.disable_curriculum:
            return self.curriculum.n_levels - 1
        return self.fixed_level


def _plain(x):
    if isinstance(x, dict):
        return {k: _plain(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_plain(v) for v in x]
    return x


def _coerce(path: str, default, value):
    """Convert a YAML value to the type of the default it replaces."""
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{path}: expected a boolean, got {value!r}")
        return value
    if isinstance(default, int) and not isinstance(default, bool):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{path}: expected an integer, got {value!r}")
        return value
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{path}: expected a number, got {value!r}")
        return float(value)
    if isinstance(default, tuple):
        if not isinstance(value, (list, tuple)):
            raise ConfigError(f"{path}: expected a list, got {value!r}")
        if default and isinstance(default[0], tuple):
            return tuple(tuple(float(v) for v in row) for row in value)
        if default and all(isinstance(v, int) for v in default):
            return tuple(int(v) for v in value)
        return tuple(float(v) for v in value)
    if isinstance(default, str):
        if not isinstance(value, str):
            raise ConfigError(f"{path}: expected a string, got {value!r}")
        return value
    return value


# fields whose default is None but that take a value of a known type
_OPTIONAL_TYPES = {"fixed_level": int, "terminal_reward": float}


def _merge(obj, data: dict, prefix: str):
    if not isinstance(data, dict):
        raise ConfigError(f"{prefix or '<root>'}: expected a mapping, got {data!r}")
    names = {f.name: f for f in dataclasses.fields(obj)}
    updates = {}
    for key, value in data.items():
        path = f"{prefix}.{key}" if prefix else str(key)
        if key not in names:
            raise ConfigError(f"{path}: unknown key")
        current = getattr(obj, key)
        if dataclasses.is_dataclass(current):
            updates[key] = _merge(current, value, path)
        elif current is None or value is None:
            kind = _OPTIONAL_TYPES.get(key)
            if value is not None and kind is not None:
                if isinstance(value, bool) or not isinstance(value, (int, float)):
                    raise ConfigError(f"{path}: expected a number, got {value!r}")
                if kind is int and not isinstance(value, int):
                    raise ConfigError(f"{path}: expected an integer, got {value!r}")
                value = kind(value)
            updates[key] = value
        else:
            updates[key] = _coerce(path, current, value)
    try:
        return dataclasses.replace(obj, **updates)
    except ValueError as exc:
        raise ConfigError(f"{prefix or '<root>'}: {exc}") from exc


def _check_range(path: str, r):
    if len(r) != 2 or not (r[0] <= r[1]):
        raise ConfigError(f"{path}: range must be [low, high] with low <= high, got {list(r)}")


def validate(cfg: ExperimentConfig) -> None:
    for f in dataclasses.fields(cfg.ranges):
        v = getattr(cfg.ranges, f.name)
        if isinstance(v, tuple):
            _check_range(f"ranges.{f.name}", v)
    if not 0 < cfg.ranges.com_margin <= 1:
        raise ConfigError("ranges.com_margin: must lie in (0, 1]")
    for f in dataclasses.fields(cfg.rewards):
        v = getattr(cfg.rewards, f.name)
        if isinstance(v, float) and not math.isfinite(v):
            raise ConfigError(f"rewards.{f.name}: weight must be finite")
    if cfg.rewards.dt != cfg.world.control_dt:
        raise ConfigError(f"rewards.dt: must equal world.control_dt ({cfg.world.control_dt})")
    if cfg.network.activation not in ("tanh", "elu"):
        raise ConfigError(f"network.activation: expected 'tanh' or 'elu', got {cfg.network.activation!r}")
    if any(h < 1 for h in cfg.network.actor_hidden + cfg.network.critic_hidden):
        raise ConfigError("network: hidden sizes must be positive")
    lv = cfg.fixed_level
    if lv is not None and not 0 <= lv < cfg.curriculum.n_levels:
        raise ConfigError(f"fixed_level: must lie in 0..{cfg.curriculum.n_levels - 1}, got {lv}")
    if cfg.checkpoint_every < 1:
        raise ConfigError("checkpoint_every: must be >= 1")
    try:
        cfg.ppo.validate()
    except ValueError as exc:
        raise ConfigError(f"ppo: {exc}") from exc


def from_dict(data: Optional[dict]) -> ExperimentConfig:
    cfg = _merge(ExperimentConfig(), data or {}, "")
    validate(cfg)
    return cfg


def load(path) -> ExperimentConfig:
    with open(path, encoding="utf-8") as fh:
        try:
            data = yaml.safe_load(fh)
        except yaml.YAMLError as exc:
            raise ConfigError(f"<file>: YAML parse error: {exc}") from exc
    return from_dict(data)


def override(cfg: ExperimentConfig, **changes: Any) -> ExperimentConfig:
    return dataclasses.replace(cfg, **changes)
