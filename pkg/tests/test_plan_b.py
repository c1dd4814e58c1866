import math
from pathlib import Path

import numpy as np
import pytest

from delaympc import raceline as rl
from delaympc.cbf import CbfObstacle, LaneModel, collision_cbf_row
from delaympc.plan_b import (BlackboxError, PlanBConfig, ScriptedBlackbox,
                             blackbox_features, blackbox_rollout, plan_b_refine,
                             step_response_coeffs, steering_response_matrix)
from delaympc.vehicle import Control, VehicleParams, VehicleState

PARAMS = VehicleParams()
TRACKS = Path(__file__).resolve().parent.parent / "tracks"


@pytest.fixture(scope="module")
def straight_line():
    track = rl.load_track(TRACKS / "straight.csv", spacing=5.0)
    line = rl.min_curvature_line(track)
    return rl.velocity_profile(line, 6.0, 3.0, 5.0, v_max=14.0)


def flat_lane(width=3.0):
    grid = np.array([0.0, 500.0])
    return LaneModel(grid, np.array([width, width]), np.array([width, width]),
                     closed=False, length=500.0)


class TestStepResponse:
    def test_r1_value(self):
        # K dt = 0.1 -> r_1 = 1 - exp(-0.1)
        r = step_response_coeffs(1.0, 0.1, 3)
        assert r[0] == pytest.approx(0.09516, abs=1e-5)
        assert r[0] == pytest.approx(1 - math.exp(-0.1))

    def test_exact_formula(self):
        k, dt = 5.0, 0.08
        r = step_response_coeffs(k, dt, 10)
        for i in range(1, 11):
            assert r[i - 1] == pytest.approx(1 - math.exp(-k * i * dt), rel=1e-15)

    def test_monotone_to_one(self):
        r = step_response_coeffs(5.0, 0.08, 50)
        assert np.all(np.diff(r) > 0)
        assert r[-1] == pytest.approx(1.0, abs=1e-8)

    def test_constant_command_passthrough(self):
        m, off = steering_response_matrix(5.0, 0.08, 6)
        delta0 = 0.3
        deltas = np.full(6, delta0)
        pred = m @ deltas + off * delta0
        assert np.allclose(pred, delta0, atol=1e-12)

    def test_matches_actuator_ode(self):
        # convolution prediction equals integrating the first-order actuator
        k, dt, n = 5.0, 0.08, 8
        rng = np.random.default_rng(0)
        deltas = rng.uniform(-0.3, 0.3, n)
        delta0 = 0.1
        m, off = steering_response_matrix(k, dt, n)
        pred = m @ deltas + off * delta0
        da = delta0
        got = []
        for i in range(n):
            # exact ZOH response of da' = k (delta - da) over one interval
            da = deltas[i] + (da - deltas[i]) * math.exp(-k * dt)
            got.append(da)
        assert np.allclose(pred, got, atol=1e-12)


class TestBlackboxRollout:
    def test_zero_controller(self, straight_line):
        u_hat, states = blackbox_rollout(lambda f: (0.0, 0.0),
                                         VehicleState(vx=10.0, s=20.0), 6, 0.08,
                                         straight_line, PARAMS)
        assert np.allclose(u_hat, 0.0)
        assert len(states) == 7

    def test_pure_pursuit_straight(self, straight_line):
        ctrl = ScriptedBlackbox()
        u_hat, _ = blackbox_rollout(ctrl, VehicleState(vx=12.0, s=20.0), 10, 0.08,
                                    straight_line, PARAMS)
        assert np.max(np.abs(u_hat[:, 0])) < 1e-3

    def test_deterministic(self, straight_line):
        ctrl = ScriptedBlackbox()
        x0 = VehicleState(e1=0.5, vx=12.0, s=20.0)
        a, _ = blackbox_rollout(ctrl, x0, 8, 0.08, straight_line, PARAMS)
        b, _ = blackbox_rollout(ctrl, x0, 8, 0.08, straight_line, PARAMS)
        assert np.array_equal(a, b)

    def test_nonfinite_command_raises(self, straight_line):
        with pytest.raises(BlackboxError):
            blackbox_rollout(lambda f: (float("nan"), 0.0),
                             VehicleState(vx=10.0, s=20.0), 4, 0.08,
                             straight_line, PARAMS)

    def test_features_shape(self, straight_line):
        feats = blackbox_features(VehicleState(e1=1.0, vx=10.0, s=30.0),
                                  straight_line)
        dx, dy, dtheta, v_ego, v_target = feats
        assert dx > 0
        assert dy == pytest.approx(-1.0, abs=0.05)  # waypoint right of offset ego
        assert v_ego == 10.0

    def test_offset_recovery(self, straight_line):
        # starting left of the line, pure pursuit steers back toward it
        ctrl = ScriptedBlackbox()
        x0 = VehicleState(e1=1.5, vx=12.0, s=20.0)
        u_hat, states = blackbox_rollout(ctrl, x0, 12, 0.1, straight_line, PARAMS)
        assert u_hat[0, 0] < 0  # steer right
        assert abs(states[-1].e1) < 1.5


class TestPlanBRefine:
    def cfg(self, n=8):
        return PlanBConfig(n_steps=n, dt=0.08, k_delta=PARAMS.k_delta)

    def test_reachable_commands_kept(self, straight_line):
        # constant command equal to the observed steering: zero tracking error
        # attainable, only the effort term shrinks the output
        n = 8
        cfg = self.cfg(n)
        x0 = VehicleState(vx=12.0, s=30.0, delta_a=0.02)
        u_start = Control(0.02, 0.1)
        u_hat = np.tile([0.02, 0.1], (n, 1))
        _, states = blackbox_rollout(lambda f: (0.02, 0.1), x0, n, cfg.dt,
                                     straight_line, PARAMS)
        res = plan_b_refine(u_hat, u_start, x0, [], flat_lane(), cfg, PARAMS,
                            states, lambda s: 0.0)
        assert res.feasible
        shrink = cfg.q_track / (cfg.q_track + cfg.r_effort)
        assert np.allclose(res.u[1:, 0], 0.02 * shrink, atol=5e-3)
        assert np.allclose(res.u[1:, 1], 0.1 * cfg.q_pedal / (cfg.q_pedal + cfg.r_pedal),
                           atol=5e-3)

    def test_u0_is_u_start(self, straight_line):
        n = 6
        cfg = self.cfg(n)
        x0 = VehicleState(vx=12.0, s=30.0, delta_a=-0.05)
        u_start = Control(-0.05, 0.2)
        u_hat = np.zeros((n, 2))
        _, states = blackbox_rollout(lambda f: (0.0, 0.0), x0, n, cfg.dt,
                                     straight_line, PARAMS)
        res = plan_b_refine(u_hat, u_start, x0, [], flat_lane(), cfg, PARAMS,
                            states, lambda s: 0.0)
        assert res.u[0, 0] == -0.05
        assert res.u[0, 1] == 0.2

    def test_obstacle_forces_deviation_and_rows_hold(self, straight_line):
        n = 10
        cfg = self.cfg(n)
        x0 = VehicleState(vx=14.0, s=30.0)
        # closing at 10 m/s: near enough that the row binds, far enough that
        # braking authority can honor it
        opp = CbfObstacle(s=50.0, e=0.0, s_dot=4.0, e_dot=0.0, d_s=10.0, d_e=2.5)
        ctrl = ScriptedBlackbox()
        u_hat, states = blackbox_rollout(ctrl, x0, n, cfg.dt, straight_line, PARAMS)
        res = plan_b_refine(u_hat, Control(0.0, float(u_hat[0, 1])), x0, [opp],
                            flat_lane(), cfg, PARAMS, states, lambda s: 0.0)
        assert res.feasible
        # refined commands deviate from the blackbox suggestion (brakes)
        assert np.max(np.abs(res.u[1:] - u_hat)) > 1e-3
        assert np.min(res.u[1:, 1]) < np.min(u_hat[:, 1]) - 1e-3
        # the expanded constraint holds at the refined plan at every step
        lam = cfg.lambda_cbf
        for k in range(1, n + 1):
            xs = VehicleState.from_array(res.x[k])
            from delaympc.cbf import collision_h_derivatives
            h, h_dot, h_ddot = collision_h_derivatives(
                xs, Control(*res.u[k]), opp.at_time(k * cfg.dt), PARAMS, 0.0)
            assert h_ddot + 2 * lam * h_dot + lam ** 2 * h >= -0.2  # linearization slack

    def test_infeasible_fallback(self, straight_line):
        n = 6
        cfg = self.cfg(n)
        x0 = VehicleState(vx=14.0, s=30.0)
        # impossible lane: zero width forces the lane rows to conflict
        lane = LaneModel(np.array([0.0, 500.0]), np.array([-1.0, -1.0]),
                         np.array([-1.0, -1.0]), closed=False, length=500.0)
        u_hat = np.zeros((n, 2))
        _, states = blackbox_rollout(lambda f: (0.0, 0.0), x0, n, cfg.dt,
                                     straight_line, PARAMS)
        res = plan_b_refine(u_hat, Control(0.0, 0.0), x0, [], lane, cfg, PARAMS,
                            states, lambda s: 0.0)
        assert not res.feasible
        assert np.all(res.u[1:, 1] == PARAMS.pedal_min)  # max braking
        assert np.all(res.u[:, 0] == 0.0)                # held steering

    def test_lane_rows_hold(self, straight_line):
        n = 8
        cfg = self.cfg(n)
        x0 = VehicleState(e1=2.0, e1_dot=0.5, vx=12.0, s=30.0)
        ctrl = ScriptedBlackbox()
        u_hat, states = blackbox_rollout(ctrl, x0, n, cfg.dt, straight_line, PARAMS)
        lane = flat_lane(3.0)
        res = plan_b_refine(u_hat, Control(0.0, float(u_hat[0, 1])), x0, [],
                            lane, cfg, PARAMS, states, lambda s: 0.0)
        assert res.feasible
        lam = cfg.lambda_cbf
        # the refined nominal states stay inside the lane band
        assert np.all(res.x[:, 0] <= lane.left(30.0) + 1e-6)
        assert np.all(res.x[:, 0] >= -lane.right(30.0) - 1e-6)
