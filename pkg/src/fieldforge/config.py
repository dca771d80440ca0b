"""Experiment configuration files (TOML) with strict key checking."""

from __future__ import annotations

import dataclasses
import os
import typing
from dataclasses import dataclass
from dataclasses import field as dfield
from pathlib import Path

import tomli
import tomli_w

from .fields import FieldConfig
from .tasks import (DirectSdfConfig, EvalConfig, ImageFitConfig, OptimConfig, PrecondConfig, SdfPointsConfig,
                    config_hash)

TASK_KINDS = ("sdf_points", "sdf_direct", "image")
QUALITY = {"sdf_points": "chamfer", "sdf_direct": "mape", "image": "psnr"}
SEED_ENV = "FIELDFORGE_SEED"


class ConfigError(ValueError):
    """Invalid configuration; the message names the offending key."""


@dataclass
class TaskSection:
    kind: str = "sdf_points"
    shape: str = "star"  # toy shape name when no file is given
    points: str | None = None  # oriented point cloud file (OBJ v/vn or XYZ+normal)
    mesh: str | None = None  # reference / oracle mesh (OBJ)
    image: str = "half_flat"  # PGM/PPM path or a procedural target name
    image_size: int = 64
    cloud_seed: int = 0
    success_threshold: float | None = None

    @property
    def quality(self) -> str:
        return QUALITY[self.kind]


@dataclass
class AblationSection:
    alpha0: list[float] = dfield(default_factory=lambda: [0.0, 0.005, 0.01, 0.02, 0.04, 0.08])
    kernels: list[str] = dfield(default_factory=lambda: ["gaussian", "uniform", "squared_gaussian"])
    samples: list[int] = dfield(default_factory=lambda: [1, 2, 4])
    shapes: list[str] = dfield(default_factory=list)  # empty: just task.shape


@dataclass
class SweepSection:
    lr: list[float] = dfield(default_factory=lambda: [1e-3, 1e-2])
    hash_lr: list[float] = dfield(default_factory=lambda: [1e-2, 1e-1])
    max_resolution: list[int] = dfield(default_factory=lambda: [128, 512])
    table_size_log2: list[int] = dfield(default_factory=lambda: [12, 15])


@dataclass
class ExperimentConfig:
    seed: int = 0
    seeds: list[int] = dfield(default_factory=lambda: [0, 1, 2])
    out: str | None = None
    task: TaskSection = dfield(default_factory=TaskSection)
    field: FieldConfig = dfield(default_factory=FieldConfig)
    precond: PrecondConfig = dfield(default_factory=PrecondConfig)
    optim: OptimConfig = dfield(default_factory=OptimConfig)
    eval: EvalConfig = dfield(default_factory=EvalConfig)
    sdf_points: SdfPointsConfig = dfield(default_factory=SdfPointsConfig)
    sdf_direct: DirectSdfConfig = dfield(default_factory=DirectSdfConfig)
    image: ImageFitConfig = dfield(default_factory=ImageFitConfig)
    ablation: AblationSection = dfield(default_factory=AblationSection)
    sweep: SweepSection = dfield(default_factory=SweepSection)

    def validate(self) -> None:
        if self.task.kind not in TASK_KINDS:
            raise ConfigError(f"task.kind must be one of {TASK_KINDS}, got {self.task.kind!r}")
        checks = [("field", self.field), ("precond", self.precond), ("optim", self.optim)]
        checks.append({"sdf_points": ("sdf_points", self.sdf_points), "sdf_direct": ("sdf_direct", self.sdf_direct),
                       "image": ("image", self.image)}[self.task.kind])
        for section, obj in checks:
            try:
                obj.validate()
            except ValueError as exc:
                msg = str(exc)
                raise ConfigError(msg if msg.startswith(section) else f"{section}: {msg}") from None

    def hash(self) -> str:
        return config_hash(to_dict(self))


def _is_dataclass_type(tp) -> bool:
    return isinstance(tp, type) and dataclasses.is_dataclass(tp)


def _coerce(value, tp, key: str):
    origin = typing.get_origin(tp)
    args = typing.get_args(tp)
    if origin is typing.Union or (origin is not None and type(None) in args):
        inner = [a for a in args if a is not type(None)]
        if value is None:
            return None
        return _coerce(value, inner[0], key)
    if _is_dataclass_type(tp):
        if not isinstance(value, dict):
            raise ConfigError(f"{key} must be a table")
        return from_dict(tp, value, key)
    if origin is list:
        if not isinstance(value, list):
            raise ConfigError(f"{key} must be a list")
        return [_coerce(v, args[0], f"{key}[{i}]") for i, v in enumerate(value)] if args else list(value)
    if tp is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{key} must be a number")
        return float(value)
    if tp is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{key} must be an integer")
        return value
    if tp is bool:
        if not isinstance(value, bool):
            raise ConfigError(f"{key} must be true or false")
        return value
    if tp is str:
        if not isinstance(value, str):
            raise ConfigError(f"{key} must be a string")
        return value
    return value


def from_dict(cls, data: dict, prefix: str = ""):
    """Build dataclass ``cls`` from nested dicts, rejecting unknown keys."""
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    kwargs = {}
    for key, value in data.items():
        full = f"{prefix}.{key}" if prefix else key
        if key not in names:
            raise ConfigError(f"unknown config key {full!r}")
        kwargs[key] = _coerce(value, hints[key], full)
    return cls(**kwargs)


def to_dict(obj) -> dict:
    """Nested plain dict; ``None`` entries are dropped (TOML has no null)."""
    out = {}
    for f in dataclasses.fields(obj):
        value = getattr(obj, f.name)
        if value is None:
            continue
        out[f.name] = to_dict(value) if dataclasses.is_dataclass(value) else value
    return out


def parse_config(text: str) -> ExperimentConfig:
    try:
        data = tomli.loads(text)
    except tomli.TOMLDecodeError as exc:
        raise ConfigError(f"config syntax error: {exc}") from None
    cfg = from_dict(ExperimentConfig, data)
    cfg.validate()
    return cfg


def load_config(path, seed_override: int | None = None) -> ExperimentConfig:
    """Read a config file; ``FIELDFORGE_SEED`` then ``seed_override`` replace ``seed``."""
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
    cfg = parse_config(text)
    env = os.environ.get(SEED_ENV)
    if env is not None:
        try:
            cfg.seed = int(env)
        except ValueError:
            raise ConfigError(f"{SEED_ENV} must be an integer, got {env!r}") from None
    if seed_override is not None:
        cfg.seed = seed_override
    return cfg


def dump_config(cfg: ExperimentConfig) -> str:
    return tomli_w.dumps(to_dict(cfg))
