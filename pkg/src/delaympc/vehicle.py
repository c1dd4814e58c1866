"""Dynamic bicycle model in raceline error coordinates with a first-order
steering actuator state.

State x = [e1, e1_dot, e2, e2_dot, vx, s, delta_a], control u = [delta, p].
The path curvature c enters as an exogenous scheduled signal. The right-hand
side is affine in u, so the B Jacobian is constant.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, replace

import numpy as np

log = logging.getLogger(__name__)

N_STATES = 7
N_CONTROLS = 2

STATE_NAMES = ("e1", "e1_dot", "e2", "e2_dot", "vx", "s", "delta_a")


class VxDomainError(ValueError):
    """Longitudinal speed <= 0: the lateral dynamics divide by vx."""


@dataclass(frozen=True)
class VehicleParams:
    cf: float = 60000.0      # front tire stiffness [N/rad]
    cr: float = 60000.0      # rear tire stiffness [N/rad]
    lf: float = 1.2          # COM to front axle [m]
    lr: float = 1.4          # COM to rear axle [m]
    iz: float = 2500.0       # yaw inertia [kg m^2]
    m: float = 1500.0        # mass [kg]
    k_delta: float = 5.0     # steering time-constant inverse [1/s]
    k_p: float = 4.0         # pedal to acceleration [m/s^2 per unit]
    k_f: float = 0.02        # speed drag coefficient [1/s]
    delta_limit: float = 0.5         # |commanded steering| bound [rad]
    pedal_min: float = -2.0
    pedal_max: float = 1.0
    vx_min: float = 0.5      # floor guarding the 1/vx singularity [m/s]

    def __post_init__(self):
        for name in ("cf", "cr", "lf", "lr", "iz", "m", "k_delta", "k_p"):
            if getattr(self, name) <= 0.0:
                raise ValueError(f"{name} must be strictly positive")
        if self.k_f < 0.0 or self.delta_limit <= 0.0 or self.vx_min <= 0.0:
            raise ValueError("invalid limits")
        if self.pedal_min >= self.pedal_max:
            raise ValueError("pedal limits must be a nonempty interval")


@dataclass
class VehicleState:
    e1: float = 0.0
    e1_dot: float = 0.0
    e2: float = 0.0
    e2_dot: float = 0.0
    vx: float = 10.0
    s: float = 0.0
    delta_a: float = 0.0

    def as_array(self) -> np.ndarray:
        return np.array([self.e1, self.e1_dot, self.e2, self.e2_dot,
                         self.vx, self.s, self.delta_a])

    @classmethod
    def from_array(cls, arr) -> "VehicleState":
        a = np.asarray(arr, dtype=float)
        return cls(*[float(v) for v in a[:N_STATES]])


@dataclass(frozen=True)
class Control:
    delta: float = 0.0
    p: float = 0.0

    def as_array(self) -> np.ndarray:
        return np.array([self.delta, self.p])

    @classmethod
    def from_array(cls, arr) -> "Control":
        return cls(float(arr[0]), float(arr[1]))

    def clamp(self, params: VehicleParams) -> "Control":
        return Control(
            min(max(self.delta, -params.delta_limit), params.delta_limit),
            min(max(self.p, params.pedal_min), params.pedal_max),
        )


def _rhs(e1_dot, e2, e2_dot, vx, delta_a, delta, p, prm: VehicleParams, c):
    """Scalar right-hand side; returns a 7-tuple."""
    a1 = (2.0 * prm.cf + 2.0 * prm.cr) / prm.m
    a2 = (-2.0 * prm.cf * prm.lf + 2.0 * prm.cr * prm.lr) / prm.m
    a3 = (2.0 * prm.cf * prm.lf - 2.0 * prm.cr * prm.lr) / prm.m
    a4 = 4.0 * prm.cf / prm.m
    b1 = (2.0 * prm.cf * prm.lf - 2.0 * prm.cr * prm.lr) / prm.iz
    b2 = (2.0 * prm.cf * prm.lf ** 2 + 2.0 * prm.cr * prm.lr ** 2) / prm.iz
    f1 = e1_dot
    f2 = (-a1 / vx * e1_dot + a1 * e2 - a2 / vx * e2_dot
          - (vx * vx + a3) * c + a4 * delta_a)
    f3 = e2_dot
    f4 = -b1 / vx * e1_dot + b1 * e2 - b2 / vx * e2_dot - b2 * c
    f5 = -prm.k_f * vx + prm.k_p * p
    f6 = vx - e1_dot * e2
    f7 = prm.k_delta * (delta - delta_a)
    return f1, f2, f3, f4, f5, f6, f7


def derivative(x: VehicleState, u: Control, params: VehicleParams, c: float) -> np.ndarray:
    if x.vx <= 0.0:
        raise VxDomainError(f"vx = {x.vx} <= 0 is outside the model domain")
    return np.array(_rhs(x.e1_dot, x.e2, x.e2_dot, x.vx, x.delta_a,
                         u.delta, u.p, params, c))


def linearize(x: VehicleState, u: Control, params: VehicleParams, c: float):
    """Analytic Jacobians (A, B) of `derivative` and affine residual
    d = f(x, u) - A x - B u."""
    if x.vx <= 0.0:
        raise VxDomainError(f"vx = {x.vx} <= 0 is outside the model domain")
    prm = params
    vx = x.vx
    a1 = (2.0 * prm.cf + 2.0 * prm.cr) / prm.m
    a2 = (-2.0 * prm.cf * prm.lf + 2.0 * prm.cr * prm.lr) / prm.m
    a4 = 4.0 * prm.cf / prm.m
    b1 = (2.0 * prm.cf * prm.lf - 2.0 * prm.cr * prm.lr) / prm.iz
    b2 = (2.0 * prm.cf * prm.lf ** 2 + 2.0 * prm.cr * prm.lr ** 2) / prm.iz

    a = np.zeros((N_STATES, N_STATES))
    a[0, 1] = 1.0
    a[1, 1] = -a1 / vx
    a[1, 2] = a1
    a[1, 3] = -a2 / vx
    a[1, 4] = (a1 * x.e1_dot + a2 * x.e2_dot) / vx ** 2 - 2.0 * vx * c
    a[1, 6] = a4
    a[2, 3] = 1.0
    a[3, 1] = -b1 / vx
    a[3, 2] = b1
    a[3, 3] = -b2 / vx
    a[3, 4] = (b1 * x.e1_dot + b2 * x.e2_dot) / vx ** 2
    a[4, 4] = -prm.k_f
    a[5, 1] = -x.e2
    a[5, 2] = -x.e1_dot
    a[5, 4] = 1.0
    a[6, 6] = -prm.k_delta

    b = np.zeros((N_STATES, N_CONTROLS))
    b[6, 0] = prm.k_delta
    b[4, 1] = prm.k_p

    f = derivative(x, u, params, c)
    d = f - a @ x.as_array() - b @ u.as_array()
    return a, b, d


def discretize(a, b, d, dt: float, order: int = 2, substeps: int = 1):
    """Truncated-series discretization: A_k = sum (A dt)^i / i! up to `order`,
    B_k and d_k from the matching integral series.

    `substeps` composes the series over dt/substeps, which keeps the
    truncation sane when the stiff lateral modes make |A| dt large.
    """
    if dt <= 0.0:
        raise ValueError("dt must be positive")
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    d = np.asarray(d, dtype=float)
    n = a.shape[0]
    m = max(int(substeps), 1)
    h = dt / m
    a_s = np.eye(n)
    s = np.eye(n) * h
    term = np.eye(n)
    fact = 1.0
    for i in range(1, order + 1):
        term = term @ a * h
        fact *= i
        a_s = a_s + term / fact
        if i < order:
            s = s + term * (h / (fact * (i + 1)))
    b_s = s @ b
    d_s = s @ d
    a_k, b_k, d_k = a_s, b_s, d_s
    for _ in range(m - 1):
        b_k = a_s @ b_k + b_s
        d_k = a_s @ d_k + d_s
        a_k = a_s @ a_k
    return a_k, b_k, d_k


def step(x: VehicleState, u: Control, params: VehicleParams, dt: float,
         w=None, curvature=0.0) -> VehicleState:
    """RK4 integration over dt plus an additive disturbance w.

    `curvature` is either a constant or a callable s -> c sampled once at the
    starting s and held through the step. A final vx below the configured
    floor is clamped (logged at debug level).
    """
    if dt <= 0.0:
        raise ValueError("dt must be positive")
    c = curvature(x.s) if callable(curvature) else curvature
    vmin = params.vx_min

    def f(state):
        e1, e1d, e2, e2d, vx, s, da = state
        vx_eff = vx if vx > vmin else vmin
        return np.array(_rhs(e1d, e2, e2d, vx_eff, da, u.delta, u.p, params, c))

    x0 = x.as_array()
    k1 = f(x0)
    k2 = f(x0 + 0.5 * dt * k1)
    k3 = f(x0 + 0.5 * dt * k2)
    k4 = f(x0 + dt * k3)
    x1 = x0 + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
    if w is not None:
        x1 = x1 + np.asarray(w, dtype=float)
    if x1[4] < vmin:
        log.debug("vx clamped to %.3f at s=%.2f", vmin, x1[5])
        x1[4] = vmin
    return VehicleState.from_array(x1)


def hold_speed_pedal(vx: float, params: VehicleParams) -> float:
    """Pedal that holds a given speed against the model drag."""
    return params.k_f * vx / params.k_p
