"""Run configuration shared by the CLI stages."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Optional

from .diffusion import TrainConfig, VarianceSchedule, default_schedule, make_schedule
from .formats import config_hash
from .guides import GuideConfig
from .maps import MapSpec
from .toydata import RolloutConfig


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ScheduleConfig:
    K: int = 100
    kind: str = "linear"
    # None: the 1e-4..0.02 range of a 1000-step schedule rescaled to K
    beta_min: Optional[float] = None
    beta_max: Optional[float] = None

    def build(self) -> VarianceSchedule:
        if self.beta_min is None and self.beta_max is None:
            return default_schedule(self.K, self.kind)
        if self.beta_min is None or self.beta_max is None:
            raise ConfigError("give both beta_min and beta_max, or neither")
        return make_schedule(self.K, self.beta_min, self.beta_max, self.kind)


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    map: MapSpec = MapSpec()
    n_maps: int = 4
    schedule: ScheduleConfig = ScheduleConfig()
    train: TrainConfig = TrainConfig(steps=1500, lr=1e-3)
    rollout: RolloutConfig = RolloutConfig(M=8, spawn_radius=40.0)
    n_train_scenes: int = 256
    n_reference_scenes: int = 32
    guide: GuideConfig = GuideConfig()
    n_scenes: int = 20
    T_p: int = 6
    ego_rule: str = "longest"
    history: int = 1
    render_svg: bool = False
    workers: int = 1
    extra: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["map"] = self.map.to_dict()
        d["rollout"] = {k: (list(v) if isinstance(v, tuple) else v) for k, v in d["rollout"].items()}
        return d

    def hash(self) -> str:
        d = self.to_dict()
        d.pop("workers")
        return config_hash(d)

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        kw = dict(d)
        try:
            if "map" in kw:
                kw["map"] = MapSpec.from_dict(kw["map"])
            if "schedule" in kw:
                kw["schedule"] = ScheduleConfig(**kw["schedule"])
            if "train" in kw:
                kw["train"] = TrainConfig(**kw["train"])
            if "rollout" in kw:
                kw["rollout"] = RolloutConfig(**{k: (tuple(v) if isinstance(v, list) else v)
                                                 for k, v in kw["rollout"].items()})
            if "guide" in kw:
                kw["guide"] = GuideConfig.from_dict(kw["guide"])
            cfg = cls(**kw)
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from exc
        cfg.validate()
        return cfg

    def validate(self):
        if self.rollout.T <= self.T_p:
            raise ConfigError(f"T={self.rollout.T} must exceed T_p={self.T_p}")
        if self.ego_rule not in ("longest", "dynamic", "random"):
            raise ConfigError(f"unknown ego rule {self.ego_rule!r}")
        if self.n_maps < 1 or self.n_scenes < 0 or self.n_train_scenes < 1:
            raise ConfigError("map and scene counts must be positive")

    def with_overrides(self, **kw) -> "RunConfig":
        return replace(self, **kw)


def load_config(path: Optional[str]) -> RunConfig:
    if path is None:
        return RunConfig()
    try:
        data = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return RunConfig.from_dict(data)
