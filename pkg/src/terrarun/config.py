"""Run configuration: one JSON file describing every sub-system.

Loading is strict — any key that does not name a config field is rejected,
so typos never silently fall back to defaults.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field

from .autodiff import ConfigurationError
from .env import EnvConfig
from .policy import PolicyConfig
from .rssm import WorldModelConfig
from .style import DiscriminatorConfig
from .terrain import FAMILIES


@dataclass
class TrainConfig:
    seed: int = 0
    n_envs: int = 256
    horizon: int = 24
    iterations: int = 3000
    wm_batch: int = 16
    wm_updates: int = 4
    replay_capacity: int = 2_000_000
    checkpoint_interval: int = 200
    log_interval: int = 1
    run_dir: str = "run"
    families: tuple = tuple(f.value for f in FAMILIES)
    ref_seed: int = 0
    ref_transitions: int = 10000
    no_depth: bool = False
    no_prop: bool = False
    env: EnvConfig = field(default_factory=EnvConfig)
    wm: WorldModelConfig = field(default_factory=WorldModelConfig)
    policy: PolicyConfig = field(default_factory=PolicyConfig)
    disc: DiscriminatorConfig = field(default_factory=DiscriminatorConfig)

    def __post_init__(self):
        if self.n_envs < 1 or self.horizon < 1 or self.iterations < 0:
            raise ConfigurationError("env count, horizon, iterations must be positive")
        unknown = [f for f in self.families
                   if f not in {fam.value for fam in FAMILIES}]
        if unknown:
            raise ConfigurationError(f"unknown terrain families: {unknown}")
        # top-level ablation switches win over the nested ones
        if self.no_depth:
            self.wm.no_depth = True
        if self.no_prop:
            self.wm.no_prop = True

    def set_segment_seconds(self, seconds: float):
        """Set the world-model training window, rounded to a k multiple."""
        steps = max(self.wm.k, int(round(seconds / self.env.dt_control)))
        steps -= steps % self.wm.k
        self.wm.segment_length = steps


def to_dict(cfg) -> dict:
    out = {}
    for f in dataclasses.fields(cfg):
        v = getattr(cfg, f.name)
        if dataclasses.is_dataclass(v):
            out[f.name] = to_dict(v)
        elif isinstance(v, tuple):
            out[f.name] = list(v)
        elif isinstance(v, dict):
            out[f.name] = dict(v)
        else:
            out[f.name] = v
    return out


def _build(cls, data: dict):
    if not isinstance(data, dict):
        raise ConfigurationError(f"expected mapping for {cls.__name__}, got {data!r}")
    defaults = cls()
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = set(data) - names
    if unknown:
        raise ConfigurationError(
            f"unknown keys for {cls.__name__}: {sorted(unknown)}")
    kwargs = {}
    for f in dataclasses.fields(cls):
        if f.name not in data:
            continue
        v = data[f.name]
        current = getattr(defaults, f.name)
        if dataclasses.is_dataclass(current):
            kwargs[f.name] = _build(type(current), v)
        elif isinstance(current, tuple):
            kwargs[f.name] = tuple(v)
        elif isinstance(current, dict):
            extra = set(v) - set(current)
            if extra:
                raise ConfigurationError(
                    f"unknown keys in {cls.__name__}.{f.name}: {sorted(extra)}")
            merged = dict(current)
            merged.update(v)
            kwargs[f.name] = merged
        else:
            kwargs[f.name] = v
    return cls(**kwargs)


def from_dict(data: dict) -> TrainConfig:
    return _build(TrainConfig, data)


def save_config(path: str, cfg: TrainConfig):
    with open(path, "w") as f:
        json.dump(to_dict(cfg), f, indent=2)


def load_config(path: str) -> TrainConfig:
    with open(path) as f:
        return from_dict(json.load(f))
