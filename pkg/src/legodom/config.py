"""Scenario configuration files.

A scenario is one JSON document validated against ``SCENARIO_SCHEMA``
(unknown keys are rejected) and loaded into :class:`ScenarioConfig`.
Omitted optional fields take the dataclass defaults.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field, asdict
from importlib import resources
from pathlib import Path

import jsonschema
import numpy as np

from .eskf import NoiseConfig
from .kinematics import LEG_NAMES, default_legs

SCHEMA_VERSION = 1

_num = {"type": "number"}
_nonneg = {"type": "number", "minimum": 0}
_pos = {"type": "number", "exclusiveMinimum": 0}
_vec3 = {"type": "array", "items": _num, "minItems": 3, "maxItems": 3}


def _obj(props, required=()):
    return {"type": "object", "properties": props, "required": list(required),
            "additionalProperties": False}


SCENARIO_SCHEMA = _obj({
    "schema_version": {"const": SCHEMA_VERSION},
    "name": {"type": "string"},
    "duration": _nonneg,
    "imu_rate": _pos,
    "leg_rate": _pos,
    "ramp_time": _nonneg,
    "seed": {"type": "integer", "minimum": 0},
    "gait": _obj({
        "stance_duration": _pos,
        "swing_duration": _pos,
        "step_length": _nonneg,
        "step_height": _nonneg,
        "body_height": _pos,
    }),
    "path": _obj({
        "type": {"enum": ["straight", "circular", "sinusoidal", "slope"]},
        "radius": _pos,
        "amplitude": _nonneg,
        "wavelength": _pos,
        "angle": {"type": "number", "minimum": -0.6, "maximum": 0.6},
    }, required=["type"]),
    "slip_windows": {"type": "array", "items": _obj({
        "t_start": _nonneg,
        "t_end": _nonneg,
        "velocity": _vec3,
        "legs": {"type": "array", "items": {"enum": list(LEG_NAMES)}, "uniqueItems": True},
    }, required=["t_start", "t_end"])},
    "touchdown_impulse": _nonneg,
    "noise": _obj({
        "accel": _nonneg,
        "gyro": _nonneg,
        "accel_bias": _nonneg,
        "gyro_bias": _nonneg,
        "joint_angle": _nonneg,
        "joint_rate": _nonneg,
        "initial_accel_bias": _vec3,
        "initial_gyro_bias": _vec3,
    }),
    "legs": _obj({
        "hip_x": _pos, "hip_y": _pos, "l1": _pos, "l2": _pos, "l3": _pos, "foot_radius": _pos,
    }),
    "filter": _obj({
        "sigma_a": _nonneg, "sigma_w": _nonneg, "sigma_ba": _nonneg, "sigma_bw": _nonneg,
        "q_vf": _nonneg, "r_pos": _pos, "r_vel": _pos, "r_roll": _pos,
        "foot_vel_prior": _pos,
    }),
}, required=["schema_version", "duration"])


class ConfigError(ValueError):
    """Schema or consistency violation; ``field`` is a dotted path."""

    def __init__(self, field: str, message: str):
        super().__init__(f"{field}: {message}")
        self.field = field
        self.message = message


@dataclass
class GaitConfig:
    stance_duration: float = 0.2
    swing_duration: float = 0.2
    step_length: float = 0.1       # body advance per gait cycle at cruise speed
    step_height: float = 0.06
    body_height: float = 0.42

    @property
    def cycle(self) -> float:
        return self.stance_duration + self.swing_duration


@dataclass
class PathConfig:
    type: str = "straight"
    radius: float = 1.0
    amplitude: float = 0.5
    wavelength: float = 3.5
    angle: float = 0.0


@dataclass
class SlipWindow:
    t_start: float
    t_end: float
    velocity: tuple = (0.0, 0.1, 0.0)
    legs: tuple = LEG_NAMES

    def leg_indices(self) -> list:
        return [LEG_NAMES.index(n) for n in self.legs]

    def contains(self, t) -> bool:
        return self.t_start <= t < self.t_end


@dataclass
class SensorNoise:
    accel: float = 0.01            # m/s^2/sqrt(Hz)
    gyro: float = 0.001            # rad/s/sqrt(Hz)
    accel_bias: float = 1e-3       # m/s^2/sqrt(s)
    gyro_bias: float = 1e-4        # rad/s/sqrt(s)
    joint_angle: float = 1e-3      # rad
    joint_rate: float = 0.02       # rad/s
    initial_accel_bias: tuple = (0.0, 0.0, 0.0)
    initial_gyro_bias: tuple = (0.0, 0.0, 0.0)

    @classmethod
    def zero(cls) -> "SensorNoise":
        return cls(0.0, 0.0, 0.0, 0.0, 0.0, 0.0)


@dataclass
class LegGeometry:
    hip_x: float = 0.24
    hip_y: float = 0.05
    l1: float = 0.083
    l2: float = 0.25
    l3: float = 0.25
    foot_radius: float = 0.02

    def build(self):
        return default_legs(**asdict(self))


@dataclass
class ScenarioConfig:
    duration: float = 10.0
    name: str = "scenario"
    imu_rate: float = 500.0
    leg_rate: float = 250.0
    ramp_time: float = 1.0
    seed: int = 0
    gait: GaitConfig = field(default_factory=GaitConfig)
    path: PathConfig = field(default_factory=PathConfig)
    slip_windows: list = field(default_factory=list)
    touchdown_impulse: float = 0.05
    noise: SensorNoise = field(default_factory=SensorNoise)
    legs: LegGeometry = field(default_factory=LegGeometry)
    filter: NoiseConfig = field(default_factory=NoiseConfig)

    def __post_init__(self):
        check_consistency(self)

    @property
    def imu_per_leg(self) -> int:
        return int(round(self.imu_rate / self.leg_rate))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["schema_version"] = SCHEMA_VERSION
        d["slip_windows"] = [{"t_start": w.t_start, "t_end": w.t_end, "velocity": list(w.velocity),
                              "legs": list(w.legs)} for w in self.slip_windows]
        for k in ("initial_accel_bias", "initial_gyro_bias"):
            d["noise"][k] = list(d["noise"][k])
        d["filter"].pop("alpha")
        d["filter"]["q_vf"] = float(np.asarray(self.filter.q_vf).ravel()[0])
        return d


def check_consistency(cfg: ScenarioConfig):
    ratio = cfg.imu_rate / cfg.leg_rate
    if abs(ratio - round(ratio)) > 1e-9 or ratio < 1:
        raise ConfigError("leg_rate", "imu_rate must be an integer multiple of leg_rate")
    leg_dt = 1.0 / cfg.leg_rate
    for name in ("stance_duration", "swing_duration"):
        n = getattr(cfg.gait, name) / leg_dt
        if abs(n - round(n)) > 1e-6:
            raise ConfigError(f"gait.{name}", "must be a whole number of leg-sample periods")
    if cfg.gait.stance_duration < cfg.gait.swing_duration:
        raise ConfigError("gait.stance_duration", "trot needs stance_duration >= swing_duration")
    if cfg.duration > 0 and cfg.gait.step_length > 0 and 2 * cfg.ramp_time > cfg.duration:
        raise ConfigError("ramp_time", "ramps longer than the scenario")
    for i, w in enumerate(cfg.slip_windows):
        if not (0 <= w.t_start <= w.t_end <= cfg.duration):
            raise ConfigError(f"slip_windows.{i}", "window must satisfy 0 <= t_start <= t_end <= duration")


def scenario_from_dict(data: dict) -> ScenarioConfig:
    validator = jsonschema.Draft202012Validator(SCENARIO_SCHEMA)
    errors = sorted(validator.iter_errors(data), key=lambda e: list(e.absolute_path))
    if errors:
        err = errors[0]
        path = ".".join(str(p) for p in err.absolute_path)
        if err.validator == "required":
            missing = err.message.split("'")[1]
            path = f"{path}.{missing}" if path else missing
        elif err.validator == "additionalProperties":
            path = path or "<root>"
        raise ConfigError(path or "<root>", err.message)
    d = dict(data)
    d.pop("schema_version")
    kwargs = {k: v for k, v in d.items() if k not in ("gait", "path", "slip_windows", "noise", "legs", "filter")}
    kwargs["gait"] = GaitConfig(**d.get("gait", {}))
    kwargs["path"] = PathConfig(**d.get("path", {"type": "straight"}))
    kwargs["slip_windows"] = [SlipWindow(w["t_start"], w["t_end"],
                                         tuple(w.get("velocity", (0.0, 0.1, 0.0))),
                                         tuple(w.get("legs", LEG_NAMES)))
                              for w in d.get("slip_windows", [])]
    noise = dict(d.get("noise", {}))
    for k in ("initial_accel_bias", "initial_gyro_bias"):
        if k in noise:
            noise[k] = tuple(noise[k])
    kwargs["noise"] = SensorNoise(**noise)
    kwargs["legs"] = LegGeometry(**d.get("legs", {}))
    kwargs["filter"] = NoiseConfig(**d.get("filter", {}))
    return ScenarioConfig(**kwargs)


def load_scenario(path) -> ScenarioConfig:
    path = Path(path)
    try:
        data = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ConfigError("<root>", f"{path}: invalid JSON ({exc})") from exc
    return scenario_from_dict(data)


def save_scenario(cfg: ScenarioConfig, path):
    Path(path).write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True) + "\n", encoding="utf-8")


def bundled_scenarios() -> list:
    root = resources.files("legodom") / "scenarios"
    return sorted(p.name[:-5] for p in root.iterdir() if p.name.endswith(".json"))


def bundled_scenario_path(name: str) -> Path:
    for ext in (".json", ".cfg"):
        if name.endswith(ext):
            name = name[:-len(ext)]
    p = resources.files("legodom") / "scenarios" / f"{name}.json"
    if not p.is_file():
        raise FileNotFoundError(f"no bundled scenario {name!r}; available: {bundled_scenarios()}")
    return Path(str(p))


def resolve_scenario(ref) -> ScenarioConfig:
    """Load a scenario from a file path or a bundled scenario name."""
    p = Path(ref)
    if p.is_file():
        return load_scenario(p)
    return load_scenario(bundled_scenario_path(str(ref)))
