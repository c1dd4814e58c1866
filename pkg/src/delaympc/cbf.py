"""Control-barrier-function rows: linear lane-keeping constraints and the
second-order collision-avoidance constraint against a moving opponent.

The collision safety function is an ellipse in the (s, e1) plane,
h = ((s - s_opp)/d_s)^2 + ((e1 - e_opp)/d_e)^2 - 1. Its first derivative
carries no control, so the constraint is raised to second order,
hddot + 2*lam*hdot + lam^2*h >= 0. Inside hddot the steering-rate state is
collapsed onto the commanded steering (the actuator is treated as settled for
the purpose of this one row), which is what makes steering show up in the
constraint at all.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .raceline import Raceline
from .vehicle import Control, VehicleParams, VehicleState


@dataclass
class CbfObstacle:
    s: float
    e: float
    s_dot: float
    e_dot: float
    d_s: float    # longitudinal safe semi-axis [m]
    d_e: float    # lateral safe semi-axis [m]

    def __post_init__(self):
        if self.d_s <= 0.0 or self.d_e <= 0.0:
            raise ValueError("safe distances must be positive")

    def at_time(self, tau: float) -> "CbfObstacle":
        return CbfObstacle(self.s + self.s_dot * tau, self.e + self.e_dot * tau,
                           self.s_dot, self.e_dot, self.d_s, self.d_e)


@dataclass(eq=False)
class LaneModel:
    """Piecewise-linear left/right free lateral width around the raceline."""

    s_grid: np.ndarray
    l_left: np.ndarray
    l_right: np.ndarray
    closed: bool
    length: float

    @classmethod
    def from_raceline(cls, line: Raceline, w_veh: float | None = None) -> "LaneModel":
        lo, hi = line.lane_bounds_at(line.s, w_veh)
        return cls(line.s.copy(), np.asarray(hi), -np.asarray(lo), line.closed, line.length)

    def _interp(self, s, values):
        if self.closed:
            sq = np.mod(s, self.length)
            grid = np.concatenate([self.s_grid, [self.length]])
            vals = np.concatenate([values, [values[0]]])
            return float(np.interp(sq, grid, vals))
        return float(np.interp(np.clip(s, self.s_grid[0], self.s_grid[-1]),
                               self.s_grid, values))

    def left(self, s: float) -> float:
        return self._interp(s, self.l_left)

    def right(self, s: float) -> float:
        return self._interp(s, self.l_right)


def lane_cbf_rows(x: VehicleState, lane: LaneModel, lam: float):
    """Two rows over (e1, e1_dot, e1_ddot):
    coeffs . (e1, e1_dot, e1_ddot) <= bound, encoding
    -L_r(s0) <= (e1_ddot + lam*e1_dot + lam^2*e1)/lam^2 <= L_l(s0)."""
    if lam <= 0.0:
        raise ValueError("lam must be positive")
    coeffs = np.array([1.0, 1.0 / lam, 1.0 / lam ** 2])
    return [
        (coeffs, lane.left(x.s)),
        (-coeffs, lane.right(x.s)),
    ]


def lane_rows_state_control(rows, a_cont: np.ndarray, b_cont: np.ndarray,
                            f0: np.ndarray):
    """Instantiate (e1, e1_dot, e1_ddot) rows over the 7-state / 2-control
    vector using the continuous linearization e1_ddot = A[1].x + B[1].u + f0[1].

    Returns (c_x, c_u, ub) triples meaning c_x . x + c_u . u <= ub.
    """
    out = []
    a1 = a_cont[1]
    b1 = b_cont[1]
    c1 = f0[1]
    for coeffs, ub in rows:
        cx = np.zeros(7)
        cx[0] = coeffs[0]
        cx[1] = coeffs[1]
        cx = cx + coeffs[2] * a1
        cu = coeffs[2] * b1
        out.append((cx, cu, ub - coeffs[2] * c1))
    return out


def collision_h(x: VehicleState, opp: CbfObstacle) -> float:
    return ((x.s - opp.s) / opp.d_s) ** 2 + ((x.e1 - opp.e) / opp.d_e) ** 2 - 1.0


def collision_h_derivatives(x: VehicleState, u: Control, opp: CbfObstacle,
                            params: VehicleParams, c: float):
    """(h, hdot, hddot) with the commanded steering standing in for the
    actuator state inside hddot."""
    prm = params
    ds2 = opp.d_s ** 2
    de2 = opp.d_e ** 2
    rel_s = x.s - opp.s
    rel_e = x.e1 - opp.e
    s_dot = x.vx - x.e1_dot * x.e2
    rel_s_dot = s_dot - opp.s_dot
    rel_e_dot = x.e1_dot - opp.e_dot

    h = rel_s ** 2 / ds2 + rel_e ** 2 / de2 - 1.0
    h_dot = 2.0 * rel_s * rel_s_dot / ds2 + 2.0 * rel_e * rel_e_dot / de2

    a1 = (2.0 * prm.cf + 2.0 * prm.cr) / prm.m
    a2 = (-2.0 * prm.cf * prm.lf + 2.0 * prm.cr * prm.lr) / prm.m
    a3 = (2.0 * prm.cf * prm.lf - 2.0 * prm.cr * prm.lr) / prm.m
    a4 = 4.0 * prm.cf / prm.m
    e1_ddot = (-a1 / x.vx * x.e1_dot + a1 * x.e2 - a2 / x.vx * x.e2_dot
               - (x.vx ** 2 + a3) * c + a4 * u.delta)
    vx_dot = prm.k_p * u.p - prm.k_f * x.vx
    s_ddot = vx_dot - e1_ddot * x.e2 - x.e1_dot * x.e2_dot

    h_ddot = (2.0 * (rel_s_dot ** 2 + rel_s * s_ddot) / ds2
              + 2.0 * (rel_e_dot ** 2 + rel_e * e1_ddot) / de2)
    return h, h_dot, h_ddot


def collision_cbf_row(x: VehicleState, opp: CbfObstacle, lam: float,
                      params: VehicleParams, c: float):
    """One linear row a . (delta, p) >= b from
    hddot + 2*lam*hdot + lam^2*h >= 0 at the given state."""
    prm = params
    ds2 = opp.d_s ** 2
    de2 = opp.d_e ** 2
    rel_s = x.s - opp.s
    rel_e = x.e1 - opp.e

    a4 = 4.0 * prm.cf / prm.m
    coef_delta = a4 * (2.0 * rel_e / de2 - 2.0 * rel_s * x.e2 / ds2)
    coef_p = 2.0 * rel_s * prm.k_p / ds2

    h, h_dot, h_ddot0 = collision_h_derivatives(x, Control(0.0, 0.0), opp, params, c)
    residual = h_ddot0 + 2.0 * lam * h_dot + lam ** 2 * h
    return np.array([coef_delta, coef_p]), -residual
