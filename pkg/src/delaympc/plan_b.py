"""Safety shield for a blackbox controller: roll the opaque policy out through
the nominal model, then refine its commands with a QP that tracks them through
the steering actuator's step response while enforcing lane and collision CBF
rows on the linearized dynamics.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import qp
from .cbf import (CbfObstacle, LaneModel, collision_cbf_row,
                  collision_h_derivatives, lane_cbf_rows,
                  lane_rows_state_control)
from .raceline import Raceline, wrap_angle
from .vehicle import Control, VehicleParams, VehicleState, discretize, linearize, step


class BlackboxError(RuntimeError):
    """The opaque controller returned a non-finite command."""


@dataclass(frozen=True)
class PlanBConfig:
    q_track: float = 50.0     # steering tracking weight
    r_effort: float = 0.5     # steering effort weight
    q_pedal: float = 20.0
    r_pedal: float = 0.1
    n_steps: int = 10
    dt: float = 0.08
    lambda_cbf: float = 2.0
    k_delta: float = 5.0      # actuator constant used for the step response

    def __post_init__(self):
        for name in ("q_track", "r_effort", "q_pedal", "r_pedal"):
            if getattr(self, name) < 0.0:
                raise ValueError(f"{name} must be nonnegative")
        if self.n_steps < 1 or self.dt <= 0.0 or self.k_delta <= 0.0:
            raise ValueError("invalid horizon or actuator constant")


def step_response_coeffs(k_delta: float, dt: float, n: int) -> np.ndarray:
    """r_i = 1 - exp(-K i dt) for i = 1..n."""
    i = np.arange(1, n + 1)
    return 1.0 - np.exp(-k_delta * i * dt)


def steering_response_matrix(k_delta: float, dt: float, n: int):
    """Predicted actual steering from command increments:
    delta_a_k = M . (delta_1..delta_n) + o_k * delta_0."""
    r = step_response_coeffs(k_delta, dt, n)
    m = np.zeros((n, n))
    for k in range(1, n + 1):
        m[k - 1, k - 1] = r[0]
        for i in range(1, k):
            m[k - 1, i - 1] = r[k - i] - r[k - i - 1]
    offset = 1.0 - r
    return m, offset


@dataclass
class ScriptedBlackbox:
    """Deterministic pure-pursuit + proportional-speed stand-in for a learned
    controller. Consumes the feature tuple (dx, dy, dtheta, v_ego, v_target)
    in the ego frame and emits (steering, pedal)."""

    wheelbase: float = 2.6
    speed_gain: float = 0.3
    delta_limit: float = 0.5
    pedal_min: float = -1.0
    pedal_max: float = 1.0

    def __call__(self, features):
        dx, dy, dtheta, v_ego, v_target = features
        curv = 2.0 * dy / max(dx * dx + dy * dy, 1e-6)
        delta = math.atan(self.wheelbase * curv)
        delta = min(max(delta, -self.delta_limit), self.delta_limit)
        p = self.speed_gain * (v_target - v_ego)
        p = min(max(p, self.pedal_min), self.pedal_max)
        return delta, p


def blackbox_features(x: VehicleState, line: Raceline,
                      lookahead_time: float = 0.5, lookahead_min: float = 3.0):
    """(dx, dy, dtheta, v_ego, v_target) toward a waypoint ahead on the line."""
    psi_line = float(line.heading_at(x.s))
    pos = line.point_at(x.s) + x.e1 * np.array([-math.sin(psi_line), math.cos(psi_line)])
    heading = psi_line + x.e2
    s_wp = x.s + max(lookahead_min, lookahead_time * x.vx)
    wp = line.point_at(s_wp)
    wp_head = float(line.heading_at(s_wp))
    rel = wp - pos
    ch, sh = math.cos(heading), math.sin(heading)
    dx = ch * rel[0] + sh * rel[1]
    dy = -sh * rel[0] + ch * rel[1]
    dtheta = float(wrap_angle(wp_head - heading))
    return dx, dy, dtheta, x.vx, float(line.speed_at(s_wp))


def blackbox_rollout(controller, x0: VehicleState, n_steps: int, dt: float,
                     line: Raceline, params: VehicleParams):
    """Iterate query -> apply through the nominal model -> re-derive features.

    Returns (u_hat (n, 2), states list of n+1 VehicleStates).
    """
    x = x0
    states = [x0]
    u_hat = np.zeros((n_steps, 2))
    for k in range(n_steps):
        cmd = controller(blackbox_features(x, line, lookahead_min=max(3.0, dt * x.vx)))
        delta, p = float(cmd[0]), float(cmd[1])
        if not (math.isfinite(delta) and math.isfinite(p)):
            raise BlackboxError(f"non-finite command at rollout step {k}: {cmd}")
        u = Control(delta, p).clamp(params)
        u_hat[k] = [u.delta, u.p]
        x = step(x, u, params, dt, w=None, curvature=line.curvature_at(x.s))
        states.append(x)
    return u_hat, states


def _collision_row_expanded(st: VehicleState, opp: CbfObstacle, lam: float,
                            params: VehicleParams, c: float, eps: float = 1e-5):
    """First-order expansion of hddot + 2 lam hdot + lam^2 h >= 0 in both the
    state and the control around a rollout point.

    Freezing the state coefficients alone makes the rows inconsistent with the
    decision dynamics (braking now would never help later steps), so the state
    gradient is taken by central finite differences.
    """
    coef_u, bound = collision_cbf_row(st, opp, lam, params, c)

    def g0(arr):
        xs = VehicleState.from_array(arr)
        h, h_dot, h_ddot = collision_h_derivatives(xs, Control(0.0, 0.0), opp,
                                                   params, c)
        return h_ddot + 2.0 * lam * h_dot + lam ** 2 * h

    x_arr = st.as_array()
    base = g0(x_arr)
    grad = np.zeros(7)
    for j in range(7):
        dx = np.zeros(7)
        dx[j] = eps
        grad[j] = (g0(x_arr + dx) - g0(x_arr - dx)) / (2.0 * eps)
    # g(x, u) ~ base + grad.(x - x_arr) + coef_u.u >= 0
    return grad, coef_u, base - grad @ x_arr


@dataclass
class PlanBResult:
    u: np.ndarray          # (N+1, 2) with row 0 = u_start
    x: np.ndarray | None   # (N+1, 7) refined nominal states, None on fallback
    feasible: bool
    objective: float = float("nan")


def _resimulate(x0: VehicleState, controls, dt: float, params: VehicleParams,
                curvature):
    states = [x0]
    x = x0
    for u in controls:
        c = curvature(x.s) if callable(curvature) else curvature
        x = step(x, Control(float(u[0]), float(u[1])), params, dt, curvature=c)
        states.append(x)
    return states


def plan_b_refine(u_hat, u_start: Control, x0: VehicleState, obstacles,
                  lane: LaneModel, cfg: PlanBConfig, params: VehicleParams,
                  rollout_states, curvature) -> PlanBResult:
    """Refine blackbox commands through the actuator model under CBF rows.

    `u_hat` has N rows (the blackbox sequence), `rollout_states` N+1 states
    from `blackbox_rollout`, `curvature` a callable s -> c. The constraint
    coefficients are linearized along the rollout; if that renders the QP
    infeasible, a maximum-braking rollout is tried before giving up. On
    failure the fallback is maximum braking with held steering, flagged.
    """
    u_hat = np.asarray(u_hat, dtype=float)
    n = cfg.n_steps
    if u_hat.shape[0] != n:
        raise ValueError("u_hat must have one row per horizon step")
    if not math.isfinite(u_start.delta) or not math.isfinite(u_start.p):
        raise ValueError("u_start must be finite")

    result = _refine_once(u_hat, u_start, x0, obstacles, lane, cfg, params,
                          rollout_states, curvature)
    if not result.feasible:
        brake = np.column_stack([np.full(n, u_start.delta),
                                 np.full(n, params.pedal_min)])
        brake_states = _resimulate(x0, brake, cfg.dt, params, curvature)
        result = _refine_once(u_hat, u_start, x0, obstacles, lane, cfg, params,
                              brake_states, curvature)
    if result.feasible:
        # one consistency pass along the refined plan itself
        states = _resimulate(x0, result.u[1:], cfg.dt, params, curvature)
        again = _refine_once(u_hat, u_start, x0, obstacles, lane, cfg, params,
                             states, curvature)
        if again.feasible:
            return again
    return result


def _refine_once(u_hat, u_start: Control, x0: VehicleState, obstacles,
                 lane: LaneModel, cfg: PlanBConfig, params: VehicleParams,
                 rollout_states, curvature) -> PlanBResult:
    n = cfg.n_steps

    nx = 7 * n
    nv = nx + 2 * n  # states x_1..x_N, then delta_1..N, then p_1..N

    def xi(k):  # k = 1..n
        return slice((k - 1) * 7, k * 7)

    def di(k):
        return nx + (k - 1)

    def pi(k):
        return nx + n + (k - 1)

    mats_c = []
    for st in rollout_states[:n]:
        c_here = curvature(st.s) if callable(curvature) else curvature
        st_lin = st
        if st.vx < 1.0:  # linearization floor against the stiff 1/vx modes
            st_lin = VehicleState.from_array(st.as_array())
            st_lin.vx = 1.0
        a_c, b_c, d_c = linearize(st_lin, Control(0.0, 0.0), params, c_here)
        mats_c.append((a_c, b_c, d_c, c_here))

    # cost: steering convolution tracking + effort, pedal tracking + effort
    m_conv, off = steering_response_matrix(cfg.k_delta, cfg.dt, n)
    w = off * u_start.delta - u_hat[:, 0]
    p_mat = np.zeros((nv, nv))
    q_vec = np.zeros(nv)
    d_sl = slice(nx, nx + n)
    p_sl = slice(nx + n, nx + 2 * n)
    p_mat[d_sl, d_sl] = 2.0 * cfg.q_track * (m_conv.T @ m_conv) + 2.0 * cfg.r_effort * np.eye(n)
    q_vec[d_sl] = 2.0 * cfg.q_track * (m_conv.T @ w)
    p_mat[p_sl, p_sl] = 2.0 * (cfg.q_pedal + cfg.r_pedal) * np.eye(n)
    q_vec[p_sl] = -2.0 * cfg.q_pedal * u_hat[:, 1]
    p_mat[:nx, :nx] = 1e-9 * np.eye(nx)  # keep the state block well posed

    # dynamics equalities
    a_eq_rows, b_eq_rows = [], []
    for k in range(n):
        a_c, b_c, d_c, _ = mats_c[k]
        ad, bd, dd = discretize(a_c, b_c, d_c, cfg.dt, order=4, substeps=16)
        row = np.zeros((7, nv))
        row[:, xi(k + 1)] = np.eye(7)
        if k == 0:
            rhs = ad @ x0.as_array() + bd @ u_start.as_array() + dd
        else:
            row[:, xi(k)] = -ad
            row[:, di(k)] = -bd[:, 0]
            row[:, pi(k)] = -bd[:, 1]
            rhs = dd
        a_eq_rows.append(row)
        b_eq_rows.append(rhs)

    # CBF inequality rows
    a_in_rows, b_in_rows = [], []
    lane_rows = lane_cbf_rows(x0, lane, cfg.lambda_cbf)
    for k in range(1, n + 1):
        st = rollout_states[k]
        a_c, b_c, d_c, c_here = mats_c[min(k - 1, n - 1)]
        for cx, cu, ub in lane_rows_state_control(lane_rows, a_c, b_c, d_c):
            row = np.zeros(nv)
            row[xi(k)] = cx
            row[di(k)] += cu[0]
            row[pi(k)] += cu[1]
            a_in_rows.append(row)
            b_in_rows.append(ub)
        tau = k * cfg.dt
        for obs in obstacles:
            opp_k = obs.at_time(tau)
            grad_x, coef_u, const = _collision_row_expanded(
                st, opp_k, cfg.lambda_cbf, params, c_here)
            row = np.zeros(nv)
            row[xi(k)] = -grad_x
            row[di(k)] = -coef_u[0]
            row[pi(k)] = -coef_u[1]
            a_in_rows.append(row)
            b_in_rows.append(const)

    lb = np.full(nv, -np.inf)
    ub_v = np.full(nv, np.inf)
    lb[d_sl] = -params.delta_limit
    ub_v[d_sl] = params.delta_limit
    lb[p_sl] = params.pedal_min
    ub_v[p_sl] = params.pedal_max

    problem = qp.QpProblem(
        p_mat, q_vec,
        a_ineq=np.vstack(a_in_rows) if a_in_rows else None,
        b_ineq=np.array(b_in_rows) if b_in_rows else None,
        a_eq=np.vstack(a_eq_rows), b_eq=np.concatenate(b_eq_rows),
        lb=lb, ub=ub_v, assume_psd=True)
    sol = qp.solve(problem, tol=1e-7, max_iter=4000)

    if sol.status == "infeasible":
        u_fb = np.zeros((n + 1, 2))
        u_fb[:, 0] = u_start.delta
        u_fb[0, 1] = u_start.p
        u_fb[1:, 1] = params.pedal_min
        return PlanBResult(u_fb, None, False)

    u_out = np.zeros((n + 1, 2))
    u_out[0] = [u_start.delta, u_start.p]
    u_out[1:, 0] = sol.x[d_sl]
    u_out[1:, 1] = sol.x[p_sl]
    x_out = np.vstack([x0.as_array(), sol.x[:nx].reshape(n, 7)])
    return PlanBResult(u_out, x_out, True, sol.objective)
