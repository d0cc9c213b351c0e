"""
Run configuration: training hyperparameters, robot, modulation, seed and
output settings, stored as YAML.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from .cpg import Modulation
from .env import CrawlerSpec, RewardCoeffs
from .errors import ConfigError
from .td3 import TrainConfig

NESTED = {"modulation": Modulation, "coeffs": RewardCoeffs}


def to_dict(obj) -> dict:
    """Dataclass -> plain dict of lists, numbers and strings."""
    out = {}
    for f in dataclasses.fields(obj):
        out[f.name] = _plain(getattr(obj, f.name))
    return out


def _plain(v):
    if dataclasses.is_dataclass(v):
        return to_dict(v)
    if isinstance(v, (tuple, list)):
        return [_plain(x) for x in v]
    return v


def _tupled(v):
    return tuple(_tupled(x) for x in v) if isinstance(v, list) else v


def from_dict(cls, data: dict | None):
    """Plain dict -> dataclass; unknown keys are a config error, missing keys keep defaults."""
    data = dict(data or {})
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - names)
    if unknown:
        raise ConfigError(f"unknown {cls.__name__} keys: {', '.join(unknown)}")
    defaults = {f.name: f.default for f in dataclasses.fields(cls)}
    kwargs = {}
    for k, v in data.items():
        if k in NESTED and isinstance(v, dict):
            kwargs[k] = from_dict(NESTED[k], v)
        elif isinstance(defaults[k], float) and isinstance(v, (int, str)) and not isinstance(v, bool):
            # YAML reads "1e-3" as a string
            try:
                kwargs[k] = float(v)
            except ValueError as e:
                raise ConfigError(f"{cls.__name__}.{k} must be a number, got {v!r}") from e
        else:
            kwargs[k] = _tupled(v)
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"invalid {cls.__name__}: {e}") from e


@dataclass
class RunConfig:
    train: TrainConfig = field(default_factory=TrainConfig)
    env: CrawlerSpec = field(default_factory=CrawlerSpec)
    seed: int = 0
    system: str = "single"
    total_steps: int = 200_000
    eval_every: int = 10_000
    eval_episodes: int = 5
    checkpoint_every: int = 0
    out: str = "runs"

    def __post_init__(self):
        if self.system not in ("single", "modular"):
            raise ConfigError("system must be 'single' or 'modular'")
        if self.total_steps < 0 or self.eval_every < 0 or self.checkpoint_every < 0:
            raise ConfigError("step counts must be >= 0")

    def to_dict(self) -> dict:
        return to_dict(self)

    @classmethod
    def from_dict(cls, data: dict | None) -> "RunConfig":
        data = dict(data or {})
        train = from_dict(TrainConfig, data.pop("train", None))
        env = from_dict(CrawlerSpec, data.pop("env", None))
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(data) - names)
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
        try:
            return cls(train=train, env=env, **data)
        except TypeError as e:
            raise ConfigError(str(e)) from e

    def dump(self) -> str:
        return yaml.safe_dump(self.to_dict(), sort_keys=True)

    @classmethod
    def load(cls, path) -> "RunConfig":
        try:
            text = Path(path).read_text()
        except OSError as e:
            raise ConfigError(f"cannot read config {path}: {e}") from e
        try:
            data = yaml.safe_load(text)
        except yaml.YAMLError as e:
            raise ConfigError(f"config {path} is not valid YAML: {e}") from e
        if data is not None and not isinstance(data, dict):
            raise ConfigError("config file must hold a mapping")
        return cls.from_dict(data)
