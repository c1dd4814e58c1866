"""Deterministic closed-loop simulator with injected computation and actuation
delays.

Single-threaded simulated-clock event loop quantized to the plant step: the
plant integrates at 1 kHz under bounded disturbance, the pre-compensator runs
the buffered feedback law at 100 Hz with an actuation latency of t_a, and the
MPC task re-plans sequentially, its output entering the command buffer only
after the sampled computation delay has elapsed. Identical (scenario, seed)
pairs yield bit-identical traces. A wall-clock delay mode feeds the filter the
measured solve times instead (not deterministic, documented as such).
"""

from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import dataclass, field, replace

import numpy as np

from . import frenet, plan_b as planb, raceline as rl, tube_mpc
from .buffer import (BufferGapError, BufferWritePastError, CommandBuffer,
                     ancillary_control, shift_initial_state, update_buffer)
from .cbf import CbfObstacle, LaneModel, collision_h
from .delays import DelaySampler
from .influence import InfluenceFilter
from .scenario import Scenario
from .sets import (HPolytope, SeedInfeasibleError, Zonotope, envelope,
                   iris_region, minkowski_sum, tube_terms)
from .tube_mpc import MpcInfeasibleError, RiccatiError, feedback_gain
from .vehicle import (Control, VehicleState, discretize, hold_speed_pedal,
                      linearize, step)

log = logging.getLogger(__name__)


@dataclass
class Metrics:
    lap_time: float | None = None
    lane_violations: int = 0
    min_h: float = float("inf")
    min_obstacle_distance: float = float("inf")
    rms_tracking_error: float = 0.0
    buffer_underruns: int = 0
    infeasible_cycles: int = 0
    late_writes: int = 0
    completed: bool = True
    failure: str | None = None

    def to_dict(self) -> dict:
        out = dict(self.__dict__)
        for key, val in out.items():
            if isinstance(val, float) and not math.isfinite(val):
                out[key] = None
        return out


@dataclass
class CycleRecord:
    t: float
    x_obs: np.ndarray
    x_shifted: np.ndarray
    t_c_obs: float
    t_c_hat: float
    u0: np.ndarray
    h_min: float
    feasible: bool


@dataclass
class Trace:
    t: np.ndarray = None
    states: np.ndarray = None        # (n, 7)
    controls: np.ndarray = None      # (n, 2) applied at the plant
    lane_lo: np.ndarray = None       # physical edges relative to the raceline
    lane_hi: np.ndarray = None
    h_min: np.ndarray = None
    obstacle_dist: np.ndarray = None
    cycles: list = field(default_factory=list)
    filter_records: list = field(default_factory=list)
    meta: dict = field(default_factory=dict)

    def write_csv(self, path) -> None:
        cols = ("t,e1,e1_dot,e2,e2_dot,vx,s,delta_a,delta_cmd,pedal_cmd,"
                "lane_lo,lane_hi,h_min,obstacle_dist")
        with open(path, "w") as fh:
            fh.write(cols + "\n")
            for i in range(self.t.size):
                row = [self.t[i], *self.states[i], *self.controls[i],
                       self.lane_lo[i], self.lane_hi[i], self.h_min[i],
                       self.obstacle_dist[i]]
                fh.write(",".join(f"{v:.12g}" for v in row) + "\n")

    def write_cycles_csv(self, path) -> None:
        with open(path, "w") as fh:
            fh.write("t,t_c_obs,t_c_hat,h_min,feasible,u0_delta,u0_pedal,"
                     + ",".join(f"x_obs_{i}" for i in range(7)) + ","
                     + ",".join(f"x_shift_{i}" for i in range(7)) + "\n")
            for c in self.cycles:
                row = [c.t, c.t_c_obs, c.t_c_hat, c.h_min, int(c.feasible),
                       *c.u0, *c.x_obs, *c.x_shifted]
                fh.write(",".join(f"{v:.12g}" for v in row) + "\n")

    def write_filter_csv(self, path) -> None:
        with open(path, "w") as fh:
            fh.write("t_c_obs,x_pred,p_pred,bound\n")
            for r in self.filter_records:
                fh.write(f"{r.t_obs:.12g},{r.x_pred:.12g},{r.p_pred:.12g},{r.bound:.12g}\n")


def build_raceline(scenario: Scenario) -> rl.Raceline:
    track = rl.load_track(scenario.track, spacing=scenario.track_spacing,
                          w_veh=scenario.w_veh)
    line = rl.min_curvature_line(track)
    return rl.velocity_profile(line, scenario.a_lat_max, scenario.a_acc_max,
                               scenario.a_brake_max, v_max=scenario.v_cap)


def _lane_box_region(line: rl.Raceline, s_now: float, span_back: float,
                     span_ahead: float) -> HPolytope:
    """Four halfspaces in (s, e1) around the current position; the lateral
    bounds take the tightest corridor over the window."""
    grid = np.linspace(s_now - span_back, s_now + span_ahead, 24)
    lo, hi = line.lane_bounds_at(grid)
    a = np.array([[1.0, 0.0], [-1.0, 0.0], [0.0, 1.0], [0.0, -1.0]])
    b = np.array([s_now + span_ahead, -(s_now - span_back),
                  float(np.min(hi)), -float(np.max(lo))])
    return HPolytope(a, b)


def _obstacle_points(opponents, t_plan: float, horizon: float, dt: float):
    """Predicted keep-out samples in (s, e1) for region carving.

    Samples the collision-CBF safety ellipse (d_s, d_e) of each opponent, so
    the convex region keeps the tube MPC outside the same set the safety
    metric scores.
    """
    pts = []
    angles = np.linspace(0.0, 2.0 * np.pi, 12, endpoint=False)
    for opp in opponents:
        s0, d0, s_dot, d_dot = opp.state_at(t_plan)
        a_s = max(opp.d_s, opp.radius)
        a_e = max(opp.d_e, opp.radius)
        for k in range(int(horizon / dt) + 1):
            tau = k * dt
            cs = s0 + s_dot * tau
            cd = d0 + d_dot * tau
            pts.extend([(cs + a_s * math.cos(a), cd + a_e * math.sin(a))
                        for a in angles])
            pts.append((cs, cd))
    return pts


class _Emergency(Exception):
    def __init__(self, reason: str):
        self.reason = reason


def run(scenario: Scenario):
    """Simulate one scenario; returns (Metrics, Trace)."""
    prm = scenario.vehicle
    comp = scenario.compensation
    ctrl_prm = prm if comp.actuator_model else replace(prm, k_delta=200.0)
    line = build_raceline(scenario)
    lane = LaneModel.from_raceline(line)
    mpc_cfg = scenario.mpc_config()
    n_h = mpc_cfg.n_steps
    dt_mpc = mpc_cfg.dt

    ss = np.random.SeedSequence(scenario.seed)
    rng_dist, rng_delay = [np.random.default_rng(s) for s in ss.spawn(2)]
    wallclock = scenario.delay.kind == "measured_wallclock"
    sampler = None if wallclock else DelaySampler(scenario.delay, rng_delay)
    filt = InfluenceFilter(scenario.filter_cfg)

    dt_plant = scenario.dt_plant
    n_ticks = int(round(scenario.duration / dt_plant))
    pre_every = max(1, int(round(scenario.dt_pre / dt_plant)))
    ta_ticks = int(math.ceil(scenario.t_a / dt_plant - 1e-9))
    min_period_ticks = max(1, int(round(scenario.mpc_min_period / dt_plant)))

    w_box = Zonotope.box(scenario.w_radii)
    has_dist = bool(np.any(scenario.w_radii > 0.0))
    w_scale = dt_plant / dt_mpc

    buf = CommandBuffer()
    buf.last_command = Control(0.0, hold_speed_pedal(scenario.initial.vx, prm))
    x = replace(scenario.initial)
    applied = buf.last_command
    k_gain = np.zeros((2, 7))
    z_prev: Zonotope | None = None

    pending = []          # (arrival_tick, write_start, x_nom, u_nom, t_c, K, record)
    actuation = []        # (effect_tick, Control)
    next_cycle = 0
    any_write = False
    failure = None

    blackbox = planb.ScriptedBlackbox(wheelbase=prm.lf + prm.lr,
                                      delta_limit=prm.delta_limit,
                                      pedal_min=prm.pedal_min, pedal_max=prm.pedal_max)
    planb_cfg = planb.PlanBConfig(n_steps=n_h, dt=dt_mpc,
                                  lambda_cbf=mpc_cfg.lambda_cbf,
                                  k_delta=ctrl_prm.k_delta)

    t_arr = np.zeros(n_ticks)
    st_arr = np.zeros((n_ticks, 7))
    u_arr = np.zeros((n_ticks, 2))
    lane_lo_arr = np.zeros(n_ticks)
    lane_hi_arr = np.zeros(n_ticks)
    hmin_arr = np.zeros(n_ticks)
    dist_arr = np.zeros(n_ticks)
    cycles: list[CycleRecord] = []
    late_writes = 0
    infeasible_cycles = 0
    underruns = 0

    def emergency_commands(x_from: VehicleState):
        u_em = np.zeros((n_h, 2))
        u_em[:, 0] = applied.delta
        u_em[:, 1] = prm.pedal_min
        xs = [x_from.as_array()]
        xk = x_from
        for k in range(n_h):
            xk = step(xk, Control(u_em[k, 0], u_em[k, 1]), ctrl_prm, dt_mpc,
                      curvature=line.curvature_at)
            xs.append(xk.as_array())
        return np.array(xs), u_em

    def opponent_tracks(t_plan: float):
        tracks = []
        cbf_obs = []
        for opp in scenario.opponents:
            s0, d0, s_dot, d_dot = opp.state_at(t_plan)
            tracks.append(frenet.ObstacleTrack(s0, d0, s_dot, d_dot, opp.radius))
            cbf_obs.append(CbfObstacle(s0, d0, s_dot, d_dot, opp.d_s, opp.d_e))
        return tracks, cbf_obs

    def solve_cycle(t_now: float, x_obs: VehicleState):
        nonlocal z_prev
        t_c_hat = (comp.fixed_delay if comp.fixed_delay is not None
                   else filt.upper_bound())
        t_c_hat = max(0.0, math.ceil(t_c_hat / dt_plant - 1e-9) * dt_plant)
        if comp.computation_shift:
            t_d_hat = t_c_hat + ta_ticks * dt_plant
            try:
                x_shift = shift_initial_state(buf, x_obs, t_now, t_d_hat,
                                              ctrl_prm, line.curvature_at,
                                              dt_sub=dt_plant)
            except BufferGapError:
                x_shift = x_obs
                for _ in range(int(round(t_d_hat / dt_plant))):
                    x_shift = step(x_shift, applied, ctrl_prm, dt_plant,
                                   curvature=line.curvature_at)
        else:
            t_d_hat = 0.0
            x_shift = VehicleState.from_array(x_obs.as_array())
        t_plan = t_now + t_d_hat
        delay_steps = int(math.ceil(t_d_hat / dt_mpc - 1e-9))
        tracks, cbf_obs = opponent_tracks(t_plan)
        try:
            if scenario.plan == "A":
                result = _plan_a(t_plan, x_shift, tracks, delay_steps)
            else:
                result = _plan_b(t_plan, x_shift, cbf_obs)
        except _Emergency as exc:
            log.debug("cycle %.2f emergency: %s", t_now, exc.reason)
            xs, us = emergency_commands(x_shift)
            return t_c_hat, x_shift, xs, us, k_gain, False
        xs, us, gain = result
        return t_c_hat, x_shift, xs, us, gain, True

    def _plan_a(t_plan: float, x_shift: VehicleState, tracks, delay_steps: int):
        nonlocal z_prev
        fs = frenet.FrenetState.from_vehicle(x_shift)
        ref_times = np.arange(n_h + 1) * dt_mpc
        try:
            pl = frenet.plan(fs, tracks, scenario.planner, line,
                             ref_times=ref_times)
        except frenet.PlanInfeasibleError as exc:
            raise _Emergency(f"planner: {exc}")
        x_ref = pl.x_ref
        mats = []
        for k in range(n_h):
            st = VehicleState.from_array(x_ref[k])
            st.vx = max(st.vx, 1.0)  # linearization floor; stiff modes below
            a_c, b_c, d_c = linearize(st, Control(0.0, 0.0), ctrl_prm,
                                      float(line.curvature_at(st.s)))
            mats.append(discretize(a_c, b_c, d_c, dt_mpc, order=4, substeps=16))
        try:
            gain = feedback_gain(mats[0][0], mats[0][1], mpc_cfg.q + 1e-6 * np.eye(7),
                                 mpc_cfg.r)
        except RiccatiError as exc:
            raise _Emergency(f"riccati: {exc}")
        tube = None
        terms = None
        if has_dist:
            a_cl = mats[0][0] + mats[0][1] @ gain
            try:
                terms = tube_terms(a_cl, w_box, tol=1e-4, max_terms=25)
            except Exception as exc:
                raise _Emergency(f"tube: {exc}")
            z_new = terms[0]
            for term in terms[1:]:
                z_new = minkowski_sum(z_new, term)
            z_used = z_new if z_prev is None else envelope(z_prev, z_new)
            z_prev = z_used
            tube = z_used
        # the exponential CBF decay caps travel at span*(1 - decay^N); leave slack
        span_ahead = 1.8 * max(x_shift.vx, 5.0) * n_h * dt_mpc + 5.0
        try:
            region = iris_region(
                (x_shift.s, x_shift.e1),
                _obstacle_points(scenario.opponents, t_plan, n_h * dt_mpc, dt_mpc),
                _lane_box_region(line, x_shift.s, 5.0, span_ahead),
                aspect=(3.0, 1.0))
        except SeedInfeasibleError:
            region = None
        try:
            sol = tube_mpc.tube_mpc_solve(
                x_shift.as_array(), x_ref, mats, mpc_cfg, gain=gain, tube=tube,
                tube_term_list=terms, delay_steps=delay_steps if tube is not None else 0,
                region=region)
        except MpcInfeasibleError as exc:
            raise _Emergency(f"mpc: {exc}")
        return sol.x, sol.u, gain

    def _plan_b(t_plan: float, x_shift: VehicleState, cbf_obs):
        try:
            u_hat, states = planb.blackbox_rollout(blackbox, x_shift, n_h, dt_mpc,
                                                   line, ctrl_prm)
        except planb.BlackboxError as exc:
            raise _Emergency(f"blackbox: {exc}")
        u_start = Control(x_shift.delta_a, float(u_hat[0, 1]))
        res = planb.plan_b_refine(u_hat, u_start, x_shift, cbf_obs, lane,
                                  planb_cfg, ctrl_prm, states, line.curvature_at)
        if not res.feasible:
            raise _Emergency("plan B QP infeasible")
        st0 = VehicleState.from_array(x_shift.as_array())
        st0.vx = max(st0.vx, 1.0)
        a_c, b_c, d_c = linearize(st0, Control(0.0, 0.0), ctrl_prm,
                                  float(line.curvature_at(st0.s)))
        ad, bd, _ = discretize(a_c, b_c, d_c, dt_mpc, order=4, substeps=16)
        try:
            gain = feedback_gain(ad, bd, mpc_cfg.q + 1e-6 * np.eye(7), mpc_cfg.r)
        except RiccatiError:
            gain = np.zeros((2, 7))
        return res.x, res.u[:-1], gain

    tick = 0
    for tick in range(n_ticks):
        t_now = tick * dt_plant

        # command deliveries
        while pending and pending[0][0] <= tick:
            _, w_start, xs, us, t_c, gain_new, rec = pending.pop(0)
            try:
                update_buffer(buf, w_start, 0.0, xs, us, dt_mpc)
                any_write = True
            except BufferWritePastError:
                late_writes += 1
                k0 = int(math.ceil((buf.read_cursor - w_start) / dt_mpc - 1e-9))
                if k0 < len(us):
                    update_buffer(buf, w_start + k0 * dt_mpc, 0.0, xs[k0:], us[k0:],
                                  dt_mpc)
                    any_write = True
            k_gain = gain_new
            filt.update(t_c)
            cycles.append(rec)

        # MPC cycle start
        if tick == next_cycle and tick < n_ticks:
            wall_t0 = time.perf_counter()
            try:
                t_c_hat, x_shift, xs, us, gain_new, feasible = solve_cycle(t_now, x)
            except Exception as exc:
                failure = f"controller failure at t={t_now:.3f}: {exc}"
                log.error(failure)
                break
            if wallclock:
                t_c = time.perf_counter() - wall_t0
            else:
                t_c = sampler.sample()
            if not feasible:
                infeasible_cycles += 1
            arrival = tick + max(1, int(math.ceil(t_c / dt_plant - 1e-9)))
            if comp.computation_shift:
                w_start = t_now + t_c_hat
            else:
                w_start = arrival * dt_plant
            _, cbf_now = opponent_tracks(t_now)
            h_now = min((collision_h(x, o) for o in cbf_now), default=float("inf"))
            rec = CycleRecord(t_now, x.as_array(), x_shift.as_array(), t_c,
                              t_c_hat, us[0].copy(), h_now, feasible)
            pending.append((arrival, w_start, xs, us, t_c, gain_new, rec))
            pending.sort(key=lambda item: item[0])
            next_cycle = max(arrival, tick + min_period_ticks)

        # pre-compensator tick
        if tick % pre_every == 0:
            cmd, gap = ancillary_control(buf, t_now, x, k_gain, prm)
            if gap and any_write:
                underruns += 1
            actuation.append((tick + ta_ticks, cmd))

        # actuation pipeline
        while actuation and actuation[0][0] <= tick:
            applied = actuation.pop(0)[1]

        # plant step
        if has_dist:
            w = rng_dist.uniform(-1.0, 1.0, 7) * scenario.w_radii * w_scale
        else:
            w = None
        x = step(x, applied, prm, dt_plant, w=w, curvature=line.curvature_at)

        t_arr[tick] = t_now + dt_plant
        st_arr[tick] = x.as_array()
        u_arr[tick] = [applied.delta, applied.p]
        w_here = float(line.width_at(x.s))
        a_here = float(line.alpha_at(x.s))
        lane_lo_arr[tick] = -(w_here + a_here)
        lane_hi_arr[tick] = w_here - a_here
        _, cbf_now = opponent_tracks(t_now + dt_plant)
        if cbf_now:
            hmin_arr[tick] = min(collision_h(x, o) for o in cbf_now)
            dist_arr[tick] = min(math.hypot(x.s - o.s, x.e1 - o.e) for o in cbf_now)
        else:
            hmin_arr[tick] = float("inf")
            dist_arr[tick] = float("inf")

    end = tick + 1 if failure is None else tick
    trace = Trace(t_arr[:end], st_arr[:end], u_arr[:end], lane_lo_arr[:end],
                  lane_hi_arr[:end], hmin_arr[:end], dist_arr[:end], cycles,
                  list(filt.history),
                  meta={"track_length": line.length, "closed": line.closed,
                        "buffer_underruns": underruns,
                        "infeasible_cycles": infeasible_cycles,
                        "late_writes": late_writes,
                        "s0": scenario.initial.s,
                        "failure": failure})
    return score(trace), trace


def score(trace: Trace) -> Metrics:
    """Metrics from a trace: lane violations count out-of-corridor excursions
    (rising edges), lap time is the first crossing of the track length."""
    m = Metrics()
    e1 = trace.states[:, 0]
    s = trace.states[:, 5]
    out = (e1 > trace.lane_hi) | (e1 < trace.lane_lo)
    edges = np.flatnonzero(out & ~np.roll(out, 1))
    if out.size and out[0]:
        edges = np.union1d(edges, [0])
    m.lane_violations = int(edges.size)
    m.min_h = float(np.min(trace.h_min)) if trace.h_min.size else float("inf")
    m.min_obstacle_distance = (float(np.min(trace.obstacle_dist))
                               if trace.obstacle_dist.size else float("inf"))
    m.rms_tracking_error = float(np.sqrt(np.mean(e1 ** 2)))
    length = trace.meta.get("track_length")
    s0 = trace.meta.get("s0", 0.0)
    if trace.meta.get("closed") and length:
        crossed = np.flatnonzero(s - s0 >= length)
        m.lap_time = float(trace.t[crossed[0]]) if crossed.size else None
    m.buffer_underruns = int(trace.meta.get("buffer_underruns", 0))
    m.infeasible_cycles = int(trace.meta.get("infeasible_cycles", 0))
    m.late_writes = int(trace.meta.get("late_writes", 0))
    m.failure = trace.meta.get("failure")
    m.completed = m.failure is None
    return m


def write_metrics(metrics: Metrics, path) -> None:
    with open(path, "w") as fh:
        json.dump(metrics.to_dict(), fh, indent=2, sort_keys=True)
        fh.write("\n")
