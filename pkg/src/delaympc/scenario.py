"""Declarative experiment input: JSON scenario files resolved into typed
configuration objects. Unknown keys are rejected so typos fail loudly."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .cbf import CbfObstacle
from .delays import DelayProcess
from .frenet import PlannerConfig
from .influence import FilterConfig
from .sets import HPolytope
from .tube_mpc import MpcConfig
from .vehicle import STATE_NAMES, VehicleParams, VehicleState


class ScenarioError(ValueError):
    pass


@dataclass
class OpponentScript:
    kind: str = "constant"       # constant | sudden_brake | turn_block
    s: float = 30.0
    d: float = 0.0
    speed: float = 10.0
    d_rate: float = 0.0
    brake_time: float = 2.0
    decel: float = 5.0
    radius: float = 1.5          # planner footprint [m]
    d_s: float = 6.0             # CBF longitudinal semi-axis [m]
    d_e: float = 2.0             # CBF lateral semi-axis [m]

    def state_at(self, t: float):
        """(s, d, s_dot, d_dot) at simulation time t."""
        if self.kind in ("constant", "turn_block"):
            return (self.s + self.speed * t, self.d + self.d_rate * t,
                    self.speed, self.d_rate)
        if self.kind == "sudden_brake":
            if t <= self.brake_time:
                return self.s + self.speed * t, self.d, self.speed, 0.0
            t_stop = self.speed / self.decel
            tb = t - self.brake_time
            s_base = self.s + self.speed * self.brake_time
            if tb < t_stop:
                return (s_base + self.speed * tb - 0.5 * self.decel * tb ** 2,
                        self.d, self.speed - self.decel * tb, 0.0)
            return s_base + 0.5 * self.speed * t_stop, self.d, 0.0, 0.0
        raise ScenarioError(f"unknown opponent kind {self.kind!r}")

    def cbf_obstacle(self, t: float) -> CbfObstacle:
        s, d, s_dot, d_dot = self.state_at(t)
        return CbfObstacle(s, d, s_dot, d_dot, self.d_s, self.d_e)


@dataclass
class CompensationConfig:
    computation_shift: bool = True
    actuator_model: bool = True
    fixed_delay: float | None = None


@dataclass
class Scenario:
    name: str
    track: Path
    plan: str = "A"
    duration: float = 8.0
    seed: int = 0
    vehicle: VehicleParams = field(default_factory=VehicleParams)
    initial: VehicleState = field(default_factory=lambda: VehicleState(vx=12.0))
    opponents: list = field(default_factory=list)
    delay: DelayProcess = field(default_factory=lambda: DelayProcess(kind="constant", mean=0.05))
    t_a: float = 0.02
    compensation: CompensationConfig = field(default_factory=CompensationConfig)
    filter_cfg: FilterConfig = field(default_factory=FilterConfig)
    planner: PlannerConfig = field(default_factory=PlannerConfig)
    mpc: dict = field(default_factory=dict)       # overrides for MpcConfig fields
    w_radii: np.ndarray = field(default_factory=lambda: np.zeros(7))
    vx_max: float = 25.0
    w_veh: float = 2.0
    track_spacing: float = 2.0
    a_lat_max: float = 6.0
    a_acc_max: float = 3.0
    a_brake_max: float = 5.0
    v_cap: float = 18.0
    dt_plant: float = 1e-3
    dt_pre: float = 1e-2
    mpc_min_period: float = 0.04

    def __post_init__(self):
        if self.duration <= 0.0:
            raise ScenarioError("duration must be positive")
        if self.plan not in ("A", "B"):
            raise ScenarioError("plan must be 'A' or 'B'")
        self.track = Path(self.track)
        if not self.track.exists():
            raise ScenarioError(f"track file does not exist: {self.track}")
        self.w_radii = np.asarray(self.w_radii, dtype=float)
        if self.w_radii.size != 7:
            raise ScenarioError("disturbance radii need 7 entries")

    def mpc_config(self) -> MpcConfig:
        cfg = MpcConfig(**{k: v for k, v in self.mpc.items()})
        prm = self.vehicle
        cfg.control_set = HPolytope.from_box(
            [-prm.delta_limit, prm.pedal_min], [prm.delta_limit, prm.pedal_max])
        rows = np.zeros((2, 7))
        rows[0, 4] = 1.0
        rows[1, 4] = -1.0
        cfg.state_set = HPolytope(rows, np.array([self.vx_max, -prm.vx_min]))
        return cfg


def _take(d: dict, cls, name: str):
    """Build a dataclass from a dict, rejecting unknown keys."""
    allowed = set(cls.__dataclass_fields__)
    unknown = set(d) - allowed
    if unknown:
        raise ScenarioError(f"{name}: unknown keys {sorted(unknown)}")
    return cls(**d)


_TOP_KEYS = {
    "name", "track", "plan", "duration", "seed", "vehicle", "initial_state",
    "opponents", "delay", "t_a", "compensation", "filter", "planner", "mpc",
    "disturbance", "limits", "sim",
}


def load_scenario(path, overrides: dict | None = None) -> Scenario:
    path = Path(path)
    if not path.exists():
        raise ScenarioError(f"scenario file not found: {path}")
    try:
        raw = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ScenarioError(f"{path}: invalid JSON ({exc})")
    unknown = set(raw) - _TOP_KEYS
    if unknown:
        raise ScenarioError(f"{path}: unknown keys {sorted(unknown)}")

    kw: dict = {}
    kw["name"] = raw.get("name", path.stem)
    if "track" not in raw:
        raise ScenarioError(f"{path}: 'track' is required")
    track = Path(raw["track"])
    if not track.is_absolute():
        track = path.parent / track
    kw["track"] = track
    for key in ("plan", "duration", "seed", "t_a"):
        if key in raw:
            kw[key] = raw[key]
    if "vehicle" in raw:
        kw["vehicle"] = _take(raw["vehicle"], VehicleParams, "vehicle")
    if "initial_state" in raw:
        init = raw["initial_state"]
        unknown = set(init) - set(STATE_NAMES)
        if unknown:
            raise ScenarioError(f"initial_state: unknown keys {sorted(unknown)}")
        kw["initial"] = VehicleState(**init)
    kw["opponents"] = [_take(o, OpponentScript, f"opponents[{i}]")
                       for i, o in enumerate(raw.get("opponents", []))]
    if "delay" in raw:
        kw["delay"] = _take(raw["delay"], DelayProcess, "delay")
    if "compensation" in raw:
        kw["compensation"] = _take(raw["compensation"], CompensationConfig, "compensation")
    if "filter" in raw:
        kw["filter_cfg"] = _take(raw["filter"], FilterConfig, "filter")
    if "planner" in raw:
        planner = dict(raw["planner"])
        for key in ("lateral_offsets", "speed_offsets"):
            if key in planner:
                planner[key] = tuple(planner[key])
        kw["planner"] = _take(planner, PlannerConfig, "planner")
    if "mpc" in raw:
        mpc_raw = dict(raw["mpc"])
        for key in ("q", "r", "q_n"):
            if key in mpc_raw:
                mpc_raw[key] = np.diag(np.asarray(mpc_raw[key], dtype=float))
        allowed = set(MpcConfig.__dataclass_fields__) - {"state_set", "control_set"}
        unknown = set(mpc_raw) - allowed
        if unknown:
            raise ScenarioError(f"mpc: unknown keys {sorted(unknown)}")
        kw["mpc"] = mpc_raw
    if "disturbance" in raw:
        dist = raw["disturbance"]
        unknown = set(dist) - set(STATE_NAMES)
        if unknown:
            raise ScenarioError(f"disturbance: unknown keys {sorted(unknown)}")
        radii = np.zeros(7)
        for key, val in dist.items():
            radii[STATE_NAMES.index(key)] = float(val)
        kw["w_radii"] = radii
    limits = raw.get("limits", {})
    limit_keys = ("vx_max", "a_lat_max", "a_acc_max", "a_brake_max", "v_cap", "w_veh")
    for key in limit_keys:
        if key in limits:
            kw[key] = float(limits[key])
    unknown = set(limits) - set(limit_keys)
    if unknown:
        raise ScenarioError(f"limits: unknown keys {sorted(unknown)}")
    sim = raw.get("sim", {})
    for key in ("dt_plant", "dt_pre", "mpc_min_period", "track_spacing"):
        if key in sim:
            kw[key] = float(sim[key])
    unknown = set(sim) - {"dt_plant", "dt_pre", "mpc_min_period", "track_spacing"}
    if unknown:
        raise ScenarioError(f"sim: unknown keys {sorted(unknown)}")

    scenario = Scenario(**kw)
    if overrides:
        for key, val in overrides.items():
            if not hasattr(scenario, key):
                raise ScenarioError(f"unknown override {key!r}")
            setattr(scenario, key, val)
    return scenario
