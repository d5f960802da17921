"""Run configuration: nested dataclasses with a strict JSON loader.

Unknown keys are rejected so a typo'd option can never silently fall back to
a default.  A run's exact configuration is archived verbatim next to its
outputs, making every artifact re-creatable from the run directory alone.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import get_args, get_origin, get_type_hints

from .data import SynthConfig
from .errors import ConfigError
from .meta_opt import TrainerConfig

__all__ = [
    "ScheduleConfig", "NetworkConfig", "GenConfig", "InferenceConfig",
    "EvalConfig", "RunConfig", "load_config", "config_from_dict", "config_to_dict",
]


@dataclass
class ScheduleConfig:
    timesteps: int = 100
    beta_start: float = 1e-4
    beta_end: float = 0.02


@dataclass
class NetworkConfig:
    hidden: int = 512             # encoder recurrent width
    predictor_width: int = 512
    weightnet_hidden: int = 100


@dataclass
class GenConfig:
    synth: SynthConfig = field(default_factory=SynthConfig)
    train_videos: int = 24
    test_videos: int = 12
    val_videos: int = 0


@dataclass
class InferenceConfig:
    trajectories: int = 100       # m reverse-diffusion runs per frame
    steps: int | str = "full"     # subsequence length, or "full"
    decision_rule: str = "majority"


@dataclass
class EvalConfig:
    relaxed: bool = False
    rho: float = 0.05
    piw_column: str = "true"


@dataclass
class RunConfig:
    seed: int = 0
    precision: str = "float64"
    schedule: ScheduleConfig = field(default_factory=ScheduleConfig)
    networks: NetworkConfig = field(default_factory=NetworkConfig)
    trainer: TrainerConfig = field(default_factory=TrainerConfig)
    gen: GenConfig = field(default_factory=GenConfig)
    inference: InferenceConfig = field(default_factory=InferenceConfig)
    evaluation: EvalConfig = field(default_factory=EvalConfig)
    meta_quota: int = 5
    label_dropout: float = 0.0
    background_mode: str = "context_only"
    checkpoint_every: int | None = None

    def validate(self):
        if self.precision not in ("float64", "float32"):
            raise ConfigError(f"precision must be float64 or float32, got {self.precision!r}")
        if self.background_mode not in ("context_only", "drop_frames", "single_pseudo_label"):
            raise ConfigError(f"unknown background_mode {self.background_mode!r}")
        if not (0.0 <= self.label_dropout <= 1.0):
            raise ConfigError(f"label_dropout outside [0, 1]: {self.label_dropout}")
        if self.inference.steps != "full":
            if not isinstance(self.inference.steps, int) or self.inference.steps < 1:
                raise ConfigError(f"inference.steps must be 'full' or a positive int, got {self.inference.steps!r}")
        if self.inference.decision_rule not in ("majority", "max_prob"):
            raise ConfigError(f"unknown decision rule {self.inference.decision_rule!r}")
        if self.evaluation.piw_column not in ("true", "predicted"):
            raise ConfigError(f"unknown piw_column {self.evaluation.piw_column!r}")
        self.trainer.validate()


def _coerce(value, hint, path):
    origin = get_origin(hint)
    if origin is not None:
        args = [a for a in get_args(hint) if a is not type(None)]
        if type(None) in get_args(hint) and value is None:
            return None
        for a in args:
            try:
                return _coerce(value, a, path)
            except (ConfigError, TypeError, ValueError):
                continue
        raise ConfigError(f"{path}: cannot interpret {value!r} as {hint}")
    if dataclasses.is_dataclass(hint):
        return _from_dict(hint, value, path)
    if hint is bool:
        if not isinstance(value, bool):
            raise ConfigError(f"{path}: expected true/false, got {value!r}")
        return value
    if hint is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{path}: expected integer, got {value!r}")
        return value
    if hint is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{path}: expected number, got {value!r}")
        return float(value)
    if hint is str:
        if not isinstance(value, str):
            raise ConfigError(f"{path}: expected string, got {value!r}")
        return value
    if hint == tuple[tuple[int, int], ...]:
        try:
            return tuple((int(a), int(b)) for a, b in value)
        except (TypeError, ValueError):
            raise ConfigError(f"{path}: expected a list of [a, b] pairs, got {value!r}")
    return value


def _from_dict(cls, data, path=""):
    if not isinstance(data, dict):
        raise ConfigError(f"{path or cls.__name__}: expected an object, got {data!r}")
    hints = get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = set(data) - names
    if unknown:
        raise ConfigError(f"{path or cls.__name__}: unknown keys {sorted(unknown)}")
    kwargs = {}
    for f in dataclasses.fields(cls):
        if f.name in data:
            kwargs[f.name] = _coerce(data[f.name], hints[f.name], f"{path}.{f.name}".lstrip("."))
    return cls(**kwargs)


def config_from_dict(data: dict) -> RunConfig:
    cfg = _from_dict(RunConfig, data)
    cfg.validate()
    return cfg


def _to_jsonable(obj):
    if dataclasses.is_dataclass(obj):
        return {f.name: _to_jsonable(getattr(obj, f.name)) for f in dataclasses.fields(obj)}
    if isinstance(obj, tuple):
        return [_to_jsonable(v) for v in obj]
    return obj


def config_to_dict(cfg: RunConfig) -> dict:
    return _to_jsonable(cfg)


def load_config(path) -> RunConfig:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    try:
        data = json.loads(path.read_text())
    except json.JSONDecodeError as e:
        raise ConfigError(f"config is not valid JSON: {e}")
    return config_from_dict(data)
