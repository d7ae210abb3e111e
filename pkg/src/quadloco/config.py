"""Application configuration: one JSON file covering every subsystem.

The schema is the dataclasses themselves: each config section mirrors the
fields of the object it builds (robot -> RobotDescription, sim -> SimConfig,
and so on), and every key is validated against those fields. Unknown keys
and type mismatches are reported with their dotted path, so a typo like
"sim.contact_stifness" fails loudly instead of silently running defaults.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field, fields, is_dataclass
from pathlib import Path

import numpy as np

from .control import MpcConfig, SwingGains
from .model import RobotDescription
from .planner import PlannerParams, TROT, WALK
from .sim import Disturbance, FrictionPatch, SimConfig
from .study import SCORE_WEIGHTS, SweepGrid


class ConfigError(ValueError):
    """Invalid configuration; the message carries the dotted key path."""


@dataclass
class TeleopConfig:
    """Network and pacing settings for the live teleoperation service."""

    host: str = "127.0.0.1"
    port: int = 8080
    telemetry_hz: float = 30.0
    # advertised command limits; incoming commands are clamped to these
    max_speed: float = 1.0
    max_yaw_rate: float = 1.5
    # optional velocity -> (gait, params) table for automatic gait selection
    lookup_path: str | None = None

    def __post_init__(self) -> None:
        if self.port < 1 or self.port > 65535:
            raise ValueError("port must be in [1, 65535]")
        if self.telemetry_hz <= 0:
            raise ValueError("telemetry_hz must be positive")
        if self.max_speed <= 0 or self.max_yaw_rate <= 0:
            raise ValueError("command limits must be positive")


@dataclass
class StudyConfig:
    grid: SweepGrid = field(default_factory=SweepGrid.coarse)
    weights: tuple[float, float] = SCORE_WEIGHTS
    workers: int = 1

    def __post_init__(self) -> None:
        if len(self.weights) != 2 or min(self.weights) < 0 or sum(self.weights) <= 0:
            raise ValueError("weights must be two non-negative values, not both zero")
        if self.workers < 1:
            raise ValueError("workers must be >= 1")


@dataclass
class AppConfig:
    robot: RobotDescription = field(default_factory=RobotDescription)
    sim: SimConfig = field(default_factory=SimConfig)
    planner: PlannerParams = field(default_factory=PlannerParams)
    gait: str = TROT
    mpc: MpcConfig = field(default_factory=MpcConfig)
    gains: SwingGains = field(default_factory=SwingGains)
    study: StudyConfig = field(default_factory=StudyConfig)
    teleop: TeleopConfig = field(default_factory=TeleopConfig)

    def __post_init__(self) -> None:
        if self.gait not in (TROT, WALK):
            raise ValueError(f"gait must be one of ('{TROT}', '{WALK}')")


def _coerce(value, default, path: str):
    """Convert a JSON value to the type of the field's default."""
    if isinstance(default, np.ndarray):
        if not isinstance(value, (list, tuple)):
            raise ConfigError(f"{path}: expected a nested list, got {type(value).__name__}")
        return np.asarray(value, float)
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{path}: expected a boolean, got {type(value).__name__}")
        return value
    if isinstance(default, int) and not isinstance(default, bool):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{path}: expected an integer, got {type(value).__name__}")
        return value
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{path}: expected a number, got {type(value).__name__}")
        return float(value)
    if isinstance(default, tuple):
        if not isinstance(value, (list, tuple)):
            raise ConfigError(f"{path}: expected a list, got {type(value).__name__}")
        return tuple(tuple(v) if isinstance(v, list) else v for v in value)
    if isinstance(default, str) or default is None:
        if value is not None and not isinstance(value, str):
            raise ConfigError(f"{path}: expected a string, got {type(value).__name__}")
        return value
    raise ConfigError(f"{path}: unsupported field type {type(default).__name__}")


# type witnesses for dataclasses without a no-argument constructor
_ANN_WITNESS = {"float": 0.0, "int": 0, "bool": False, "str": "", "tuple": ()}


def _witness(cls, fld):
    try:
        return getattr(cls(), fld.name)
    except TypeError:
        ann = str(fld.type).split("[")[0].strip()
        if ann in _ANN_WITNESS:
            return _ANN_WITNESS[ann]
        raise ConfigError(f"no type witness for field {cls.__name__}.{fld.name}")


def _build(cls, data, path: str, special=None):
    """Construct a dataclass from a JSON object, validating every key."""
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: expected an object, got {type(data).__name__}")
    special = special or {}
    flds = {f.name: f for f in fields(cls)}
    kwargs = {}
    for key, value in data.items():
        kpath = f"{path}.{key}" if path else key
        if key not in flds:
            raise ConfigError(f"{kpath}: unknown key (valid keys: {', '.join(sorted(flds))})")
        if key in special:
            kwargs[key] = special[key](value, kpath)
        else:
            kwargs[key] = _coerce(value, _witness(cls, flds[key]), kpath)
    try:
        return cls(**kwargs)
    except ConfigError:
        raise
    except (TypeError, ValueError) as err:
        raise ConfigError(f"{path or 'config'}: {err}") from None


def _build_list(cls, value, path: str) -> tuple:
    if not isinstance(value, list):
        raise ConfigError(f"{path}: expected a list of objects, got {type(value).__name__}")
    return tuple(_build(cls, item, f"{path}[{i}]") for i, item in enumerate(value))


def config_from_dict(data: dict) -> AppConfig:
    if not isinstance(data, dict):
        raise ConfigError("config root must be an object")
    sections = {
        "robot": lambda v, p: _build(RobotDescription, v, p),
        "sim": lambda v, p: _build(
            SimConfig,
            v,
            p,
            special={
                "friction_patches": lambda vv, pp: _build_list(FrictionPatch, vv, pp),
                "disturbances": lambda vv, pp: _build_list(Disturbance, vv, pp),
            },
        ),
        "planner": lambda v, p: _build(PlannerParams, v, p),
        "mpc": lambda v, p: _build(MpcConfig, v, p),
        "gains": lambda v, p: _build(SwingGains, v, p),
        "study": lambda v, p: _build(
            StudyConfig, v, p, special={"grid": lambda vv, pp: _build(SweepGrid, vv, pp)}
        ),
        "teleop": lambda v, p: _build(TeleopConfig, v, p),
    }
    kwargs = {}
    for key, value in data.items():
        if key == "gait":
            if not isinstance(value, str):
                raise ConfigError(f"gait: expected a string, got {type(value).__name__}")
            kwargs["gait"] = value
        elif key in sections:
            kwargs[key] = sections[key](value, key)
        else:
            valid = ", ".join(sorted(list(sections) + ["gait"]))
            raise ConfigError(f"{key}: unknown section (valid sections: {valid})")
    try:
        return AppConfig(**kwargs)
    except (TypeError, ValueError) as err:
        raise ConfigError(str(err)) from None


def load_config(path: str | Path | None = None) -> AppConfig:
    """Load a JSON config file; None gives the all-defaults configuration."""
    if path is None:
        return AppConfig()
    p = Path(path)
    if not p.exists():
        raise ConfigError(f"config file not found: {p}")
    try:
        data = json.loads(p.read_text())
    except json.JSONDecodeError as err:
        raise ConfigError(f"{p}: not valid JSON ({err})") from None
    return config_from_dict(data)


def _jsonable(value):
    if isinstance(value, np.ndarray):
        return value.tolist()
    if isinstance(value, tuple):
        return [_jsonable(v) for v in value]
    if is_dataclass(value) and not isinstance(value, type):
        return {f.name: _jsonable(getattr(value, f.name)) for f in fields(value)}
    return value


def config_to_dict(cfg: AppConfig) -> dict:
    """Inverse of config_from_dict, for writing editable config files."""
    return {f.name: _jsonable(getattr(cfg, f.name)) for f in fields(cfg)}
