"""Sampling-based local planner in the Frenet frame.

Lateral motion uses quintic polynomials to a set of target offsets, the
longitudinal motion quartic polynomials to sampled target speeds. Candidates
colliding with constant-velocity obstacle predictions or leaving the corridor
are discarded; the cheapest survivor becomes the controller reference.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .raceline import Raceline, wrap_angle
from .vehicle import VehicleState


class PlanInfeasibleError(RuntimeError):
    """No candidate is collision-free inside the lane."""


@dataclass
class FrenetState:
    s: float
    s_dot: float
    s_ddot: float
    d: float
    d_dot: float
    d_ddot: float

    @classmethod
    def from_vehicle(cls, x: VehicleState, s_ddot: float = 0.0,
                     d_ddot: float = 0.0) -> "FrenetState":
        return cls(x.s, x.vx - x.e1_dot * x.e2, s_ddot, x.e1, x.e1_dot, d_ddot)


@dataclass(frozen=True)
class PlannerConfig:
    k_lat: float = 1.0
    k_lon: float = 1.0
    k_obs: float = 1.0
    k_j: float = 0.1
    k_a: float = 0.4
    k_v: float = 1.0
    lateral_offsets: tuple = (-2.0, -1.0, 0.0, 1.0, 2.0)
    speed_offsets: tuple = (-2.0, 0.0)
    horizon: float = 2.0
    dt: float = 0.1
    obstacle_eps: float = 0.1   # inverse-distance floor [m]

    def __post_init__(self):
        if self.horizon <= 0.0 or self.dt <= 0.0:
            raise ValueError("horizon and dt must be positive")
        for name in ("k_lat", "k_lon", "k_obs", "k_j", "k_a", "k_v"):
            if getattr(self, name) < 0.0:
                raise ValueError(f"{name} must be nonnegative")


@dataclass
class ObstacleTrack:
    s: float
    d: float
    s_dot: float
    d_dot: float
    radius: float = 1.0


class QuinticPolynomial:
    """Matches position/velocity/acceleration at both ends."""

    def __init__(self, x0, v0, a0, xT, vT, aT, T):
        self.a0 = x0
        self.a1 = v0
        self.a2 = a0 / 2.0
        m = np.array([[T ** 3, T ** 4, T ** 5],
                      [3 * T ** 2, 4 * T ** 3, 5 * T ** 4],
                      [6 * T, 12 * T ** 2, 20 * T ** 3]])
        rhs = np.array([xT - self.a0 - self.a1 * T - self.a2 * T ** 2,
                        vT - self.a1 - 2 * self.a2 * T,
                        aT - 2 * self.a2])
        self.a3, self.a4, self.a5 = np.linalg.solve(m, rhs)

    def pos(self, t):
        return (self.a0 + self.a1 * t + self.a2 * t ** 2 + self.a3 * t ** 3
                + self.a4 * t ** 4 + self.a5 * t ** 5)

    def vel(self, t):
        return (self.a1 + 2 * self.a2 * t + 3 * self.a3 * t ** 2
                + 4 * self.a4 * t ** 3 + 5 * self.a5 * t ** 4)

    def acc(self, t):
        return 2 * self.a2 + 6 * self.a3 * t + 12 * self.a4 * t ** 2 + 20 * self.a5 * t ** 3

    def jerk(self, t):
        return 6 * self.a3 + 24 * self.a4 * t + 60 * self.a5 * t ** 2


class QuarticPolynomial:
    """Matches start position/velocity/acceleration and end velocity/acceleration."""

    def __init__(self, x0, v0, a0, vT, aT, T):
        self.a0 = x0
        self.a1 = v0
        self.a2 = a0 / 2.0
        m = np.array([[3 * T ** 2, 4 * T ** 3],
                      [6 * T, 12 * T ** 2]])
        rhs = np.array([vT - self.a1 - 2 * self.a2 * T,
                        aT - 2 * self.a2])
        self.a3, self.a4 = np.linalg.solve(m, rhs)

    def pos(self, t):
        return self.a0 + self.a1 * t + self.a2 * t ** 2 + self.a3 * t ** 3 + self.a4 * t ** 4

    def vel(self, t):
        return self.a1 + 2 * self.a2 * t + 3 * self.a3 * t ** 2 + 4 * self.a4 * t ** 3

    def acc(self, t):
        return 2 * self.a2 + 6 * self.a3 * t + 12 * self.a4 * t ** 2

    def jerk(self, t):
        return 6 * self.a3 + 24 * self.a4 * t


@dataclass(eq=False)
class Candidate:
    t: np.ndarray
    lat: QuinticPolynomial
    lon: QuarticPolynomial
    target_offset: float
    target_speed: float

    def __post_init__(self):
        self.d = self.lat.pos(self.t)
        self.d_dot = self.lat.vel(self.t)
        self.d_ddot = self.lat.acc(self.t)
        self.d_jerk = self.lat.jerk(self.t)
        self.s = self.lon.pos(self.t)
        self.s_dot = self.lon.vel(self.t)
        self.s_ddot = self.lon.acc(self.t)
        self.s_jerk = self.lon.jerk(self.t)


def predict_obstacles(obstacles, n_steps: int, dt: float):
    """Constant-velocity (s, d) prediction; one (n_steps+1, 2) array per
    obstacle, order preserved."""
    out = []
    k = np.arange(n_steps + 1)
    for obs in obstacles:
        s = obs.s + obs.s_dot * k * dt
        d = obs.d + obs.d_dot * k * dt
        out.append(np.column_stack([s, d]))
    return out


def sample_trajectories(state: FrenetState, cfg: PlannerConfig,
                        target_speed: float) -> list[Candidate]:
    if not cfg.lateral_offsets or not cfg.speed_offsets:
        raise ValueError("empty sample grid")
    n = int(round(cfg.horizon / cfg.dt))
    t = np.arange(n + 1) * cfg.dt
    cands = []
    for d_target in cfg.lateral_offsets:
        lat = QuinticPolynomial(state.d, state.d_dot, state.d_ddot,
                                d_target, 0.0, 0.0, cfg.horizon)
        for dv in cfg.speed_offsets:
            v_target = max(0.0, target_speed + dv)
            lon = QuarticPolynomial(state.s, state.s_dot, state.s_ddot,
                                    v_target, 0.0, cfg.horizon)
            cands.append(Candidate(t, lat, lon, float(d_target), float(v_target)))
    return cands


def evaluate_cost(cand: Candidate, predicted, cfg: PlannerConfig,
                  target_speed: float) -> float:
    dt = cfg.dt
    c_lat = float(np.sum(cfg.k_j * np.abs(cand.d_jerk) + cfg.k_a * np.abs(cand.d_ddot)
                         + cfg.k_v * np.abs(cand.d_dot)) * dt)
    c_lon = float(np.sum(cfg.k_j * np.abs(cand.s_jerk) + cfg.k_a * np.abs(cand.s_ddot)
                         + cfg.k_v * np.abs(cand.s_dot - target_speed)) * dt)
    if predicted:
        dists = np.full(cand.t.size, np.inf)
        for track in predicted:
            d = np.hypot(cand.s - track[:, 0], cand.d - track[:, 1])
            dists = np.minimum(dists, d)
        c_obs = float(np.sum(1.0 / np.maximum(dists, cfg.obstacle_eps)))
    else:
        c_obs = 0.0
    return cfg.k_lat * c_lat + cfg.k_lon * c_lon + cfg.k_obs * c_obs


def _collides(cand: Candidate, predicted, obstacles) -> bool:
    for track, obs in zip(predicted, obstacles):
        d = np.hypot(cand.s - track[:, 0], cand.d - track[:, 1])
        if np.any(d <= obs.radius):
            return True
    return False


def _in_lane(cand: Candidate, line: Raceline) -> bool:
    lo, hi = line.lane_bounds_at(cand.s)
    return bool(np.all(cand.d >= lo - 1e-9) and np.all(cand.d <= hi + 1e-9))


@dataclass
class Plan:
    candidate: Candidate
    cost: float
    x_ref: np.ndarray  # (n_ref, 7) controller reference states

    def reference_states(self):
        return [VehicleState.from_array(row) for row in self.x_ref]


def _reference_from_candidate(cand: Candidate, line: Raceline,
                              ref_times: np.ndarray) -> np.ndarray:
    s = cand.lon.pos(ref_times)
    s_dot = np.maximum(cand.lon.vel(ref_times), 1e-3)
    d = cand.lat.pos(ref_times)
    d_dot = cand.lat.vel(ref_times)
    e2 = np.arctan2(d_dot, s_dot)
    e2_dot = np.gradient(e2, ref_times) if ref_times.size > 1 else np.zeros_like(e2)
    out = np.zeros((ref_times.size, 7))
    out[:, 0] = d
    out[:, 1] = d_dot
    out[:, 2] = e2
    out[:, 3] = e2_dot
    out[:, 4] = s_dot
    out[:, 5] = s
    return out


def plan(state: FrenetState, obstacles, cfg: PlannerConfig, line: Raceline,
         target_speed: float | None = None,
         ref_times: np.ndarray | None = None) -> Plan:
    """Pick the cheapest collision-free in-lane candidate, ties broken by
    smaller |terminal offset| then lower target speed."""
    if target_speed is None:
        target_speed = float(line.speed_at(state.s))
    cands = sample_trajectories(state, cfg, target_speed)
    n = cands[0].t.size - 1
    predicted = predict_obstacles(obstacles, n, cfg.dt)

    survivors = [c for c in cands
                 if not _collides(c, predicted, obstacles) and _in_lane(c, line)]
    if not survivors:
        raise PlanInfeasibleError("all sampled trajectories collide or exit the lane")

    scored = [(evaluate_cost(c, predicted, cfg, target_speed),
               abs(c.target_offset), c.target_speed, i, c)
              for i, c in enumerate(survivors)]
    scored.sort(key=lambda row: row[:4])
    best = scored[0]
    times = best[4].t if ref_times is None else np.asarray(ref_times, dtype=float)
    return Plan(best[4], best[0], _reference_from_candidate(best[4], line, times))
