from pathlib import Path

import numpy as np
import pytest

from delaympc import frenet, raceline as rl
from delaympc.frenet import (Candidate, FrenetState, ObstacleTrack,
                             PlanInfeasibleError, PlannerConfig,
                             QuarticPolynomial, QuinticPolynomial,
                             evaluate_cost, plan, predict_obstacles,
                             sample_trajectories)

TRACKS = Path(__file__).resolve().parent.parent / "tracks"


@pytest.fixture(scope="module")
def straight_line():
    track = rl.load_track(TRACKS / "straight.csv", spacing=5.0)
    line = rl.min_curvature_line(track)
    return rl.velocity_profile(line, 6.0, 3.0, 5.0, v_max=15.0)


class TestPredictObstacles:
    def test_static(self):
        out = predict_obstacles([ObstacleTrack(10, 1, 0, 0)], 5, 0.1)
        assert np.allclose(out[0], [[10, 1]] * 6)

    def test_advance(self):
        out = predict_obstacles([ObstacleTrack(0, 0, 5.0, 0)], 10, 0.1)
        assert out[0][10, 0] == pytest.approx(5.0)

    def test_identity_and_order(self):
        obs = [ObstacleTrack(1, 0, 0, 0), ObstacleTrack(2, 0, 0, 0)]
        out = predict_obstacles(obs, 3, 0.1)
        assert out[0][0, 0] == 1
        assert out[1][0, 0] == 2


class TestPolynomials:
    def test_quintic_boundary_conditions(self):
        rng = np.random.default_rng(0)
        for _ in range(30):
            x0, v0, a0, xT, vT, aT = rng.standard_normal(6)
            T = rng.uniform(0.5, 4.0)
            q = QuinticPolynomial(x0, v0, a0, xT, vT, aT, T)
            assert q.pos(0) == pytest.approx(x0, abs=1e-9)
            assert q.vel(0) == pytest.approx(v0, abs=1e-9)
            assert q.acc(0) == pytest.approx(a0, abs=1e-9)
            assert q.pos(T) == pytest.approx(xT, abs=1e-9)
            assert q.vel(T) == pytest.approx(vT, abs=1e-9)
            assert q.acc(T) == pytest.approx(aT, abs=1e-9)

    def test_quintic_against_full_linear_solve(self):
        # oracle: solve the complete 6x6 Vandermonde-style system
        rng = np.random.default_rng(1)
        for _ in range(20):
            x0, v0, a0, xT, vT, aT = rng.standard_normal(6)
            T = rng.uniform(0.5, 3.0)
            rows = []
            rhs = [x0, v0, a0, xT, vT, aT]
            rows.append([1, 0, 0, 0, 0, 0])
            rows.append([0, 1, 0, 0, 0, 0])
            rows.append([0, 0, 2, 0, 0, 0])
            rows.append([T ** i for i in range(6)])
            rows.append([i * T ** (i - 1) if i else 0 for i in range(6)])
            rows.append([i * (i - 1) * T ** (i - 2) if i >= 2 else 0 for i in range(6)])
            coeffs = np.linalg.solve(np.array(rows, dtype=float), np.array(rhs))
            q = QuinticPolynomial(x0, v0, a0, xT, vT, aT, T)
            got = [q.a0, q.a1, q.a2, q.a3, q.a4, q.a5]
            assert np.allclose(got, coeffs, atol=1e-8)

    def test_quartic_boundary_conditions(self):
        q = QuarticPolynomial(1.0, 2.0, 0.5, 4.0, 0.0, 2.0)
        assert q.pos(0) == pytest.approx(1.0)
        assert q.vel(0) == pytest.approx(2.0)
        assert q.acc(0) == pytest.approx(0.5)
        assert q.vel(2.0) == pytest.approx(4.0, abs=1e-9)
        assert q.acc(2.0) == pytest.approx(0.0, abs=1e-9)


class TestSampleTrajectories:
    def test_trivial_constant_trajectory(self):
        cfg = PlannerConfig(lateral_offsets=(0.0,), speed_offsets=(0.0,))
        state = FrenetState(s=5.0, s_dot=0.0, s_ddot=0.0, d=0.0, d_dot=0.0, d_ddot=0.0)
        cands = sample_trajectories(state, cfg, target_speed=0.0)
        assert len(cands) == 1
        c = cands[0]
        assert np.allclose(c.d, 0.0, atol=1e-12)
        assert np.allclose(c.s, 5.0, atol=1e-12)

    def test_empty_grid_errors(self):
        cfg = PlannerConfig(lateral_offsets=(), speed_offsets=(0.0,))
        state = FrenetState(0, 10, 0, 0, 0, 0)
        with pytest.raises(ValueError, match="empty"):
            sample_trajectories(state, cfg, 10.0)

    def test_candidate_count(self):
        cfg = PlannerConfig(lateral_offsets=(-1.0, 0.0, 1.0), speed_offsets=(-2.0, 0.0))
        cands = sample_trajectories(FrenetState(0, 10, 0, 0, 0, 0), cfg, 10.0)
        assert len(cands) == 6


class TestEvaluateCost:
    def cand(self, cfg, d_target=0.0, v=10.0):
        state = FrenetState(0, v, 0, 0.5, 0, 0)
        lat = QuinticPolynomial(0.5, 0, 0, d_target, 0, 0, cfg.horizon)
        lon = QuarticPolynomial(0, v, 0, v, 0, cfg.horizon)
        n = int(round(cfg.horizon / cfg.dt))
        return Candidate(np.arange(n + 1) * cfg.dt, lat, lon, d_target, v)

    def test_no_obstacles_zero_obstacle_cost(self):
        cfg = PlannerConfig(k_obs=123.0)
        c = self.cand(cfg)
        base = evaluate_cost(c, [], cfg, 10.0)
        cfg0 = PlannerConfig(k_obs=0.0)
        assert base == pytest.approx(evaluate_cost(c, [], cfg0, 10.0))

    def test_linearity_in_k_lat(self):
        cfg1 = PlannerConfig(k_lat=1.0, k_lon=0.0, k_obs=0.0)
        cfg2 = PlannerConfig(k_lat=2.0, k_lon=0.0, k_obs=0.0)
        c = self.cand(cfg1)
        assert evaluate_cost(c, [], cfg2, 10.0) == pytest.approx(
            2.0 * evaluate_cost(c, [], cfg1, 10.0))

    def test_single_obstacle_direct_summation(self):
        cfg = PlannerConfig(k_lat=0.0, k_lon=0.0, k_obs=1.0)
        c = self.cand(cfg)
        obs = [ObstacleTrack(5.0, 2.0, 0.0, 0.0)]
        predicted = predict_obstacles(obs, c.t.size - 1, cfg.dt)
        got = evaluate_cost(c, predicted, cfg, 10.0)
        want = 0.0
        for k in range(c.t.size):
            dist = np.hypot(c.s[k] - 5.0, c.d[k] - 2.0)
            want += 1.0 / max(dist, cfg.obstacle_eps)
        assert got == pytest.approx(want, rel=1e-12)

    def test_velocity_deviation_term(self):
        cfg = PlannerConfig(k_lat=0.0, k_lon=1.0, k_obs=0.0, k_j=0.0, k_a=0.0,
                            k_v=1.0)
        c = self.cand(cfg, v=10.0)
        # constant speed 10 vs target 12: deviation 2 integrated over horizon
        got = evaluate_cost(c, [], cfg, 12.0)
        assert got == pytest.approx(2.0 * cfg.dt * c.t.size, rel=1e-9)


class TestPlan:
    def test_free_road_zero_offset(self, straight_line):
        cfg = PlannerConfig()
        state = FrenetState(s=20.0, s_dot=12.0, s_ddot=0, d=0.0, d_dot=0, d_ddot=0)
        out = plan(state, [], cfg, straight_line, target_speed=12.0)
        assert out.candidate.target_offset == 0.0

    def test_blocking_obstacle_forces_offset(self, straight_line):
        cfg = PlannerConfig()
        state = FrenetState(s=20.0, s_dot=12.0, s_ddot=0, d=0.0, d_dot=0, d_ddot=0)
        obs = [ObstacleTrack(40.0, 0.0, 0.0, 0.0, radius=1.5)]
        out = plan(state, obs, cfg, straight_line, target_speed=12.0)
        assert out.candidate.target_offset != 0.0
        # the exact collision-free property
        predicted = predict_obstacles(obs, out.candidate.t.size - 1, cfg.dt)
        d = np.hypot(out.candidate.s - predicted[0][:, 0],
                     out.candidate.d - predicted[0][:, 1])
        assert np.min(d) > obs[0].radius

    def test_argmin_property(self, straight_line):
        cfg = PlannerConfig()
        state = FrenetState(s=20.0, s_dot=12.0, s_ddot=0, d=1.0, d_dot=0, d_ddot=0)
        obs = [ObstacleTrack(50.0, 0.0, 5.0, 0.0, radius=1.0)]
        out = plan(state, obs, cfg, straight_line, target_speed=12.0)
        predicted = predict_obstacles(obs, out.candidate.t.size - 1, cfg.dt)
        for cand in sample_trajectories(state, cfg, 12.0):
            if frenet._collides(cand, predicted, obs) or not frenet._in_lane(
                    cand, straight_line):
                continue
            assert out.cost <= evaluate_cost(cand, predicted, cfg, 12.0) + 1e-12

    def test_all_blocked_raises(self, straight_line):
        cfg = PlannerConfig(lateral_offsets=(0.0,), speed_offsets=(0.0,))
        state = FrenetState(s=20.0, s_dot=12.0, s_ddot=0, d=0.0, d_dot=0, d_ddot=0)
        obs = [ObstacleTrack(30.0, 0.0, 0.0, 0.0, radius=3.0)]
        with pytest.raises(PlanInfeasibleError):
            plan(state, obs, cfg, straight_line, target_speed=12.0)

    def test_deterministic(self, straight_line):
        cfg = PlannerConfig()
        state = FrenetState(s=20.0, s_dot=12.0, s_ddot=0, d=0.4, d_dot=0.1, d_ddot=0)
        obs = [ObstacleTrack(40.0, 0.5, 2.0, 0.0, radius=1.0)]
        a = plan(state, obs, cfg, straight_line, target_speed=12.0)
        b = plan(state, obs, cfg, straight_line, target_speed=12.0)
        assert a.candidate.target_offset == b.candidate.target_offset
        assert np.array_equal(a.x_ref, b.x_ref)

    def test_reference_states_shape_and_fields(self, straight_line):
        cfg = PlannerConfig()
        state = FrenetState(s=20.0, s_dot=12.0, s_ddot=0, d=0.5, d_dot=0, d_ddot=0)
        ref_times = np.arange(11) * 0.08
        out = plan(state, [], cfg, straight_line, target_speed=12.0,
                   ref_times=ref_times)
        assert out.x_ref.shape == (11, 7)
        assert out.x_ref[0, 0] == pytest.approx(0.5, abs=1e-9)   # e1 = d
        assert out.x_ref[0, 5] == pytest.approx(20.0, abs=1e-9)  # s
        assert np.all(out.x_ref[:, 4] > 0)                       # vx from s_dot

    def test_never_overlaps_invariant(self, straight_line):
        rng = np.random.default_rng(3)
        cfg = PlannerConfig()
        for _ in range(10):
            state = FrenetState(s=20.0, s_dot=rng.uniform(8, 14), s_ddot=0,
                                d=rng.uniform(-1, 1), d_dot=0, d_ddot=0)
            obs = [ObstacleTrack(rng.uniform(40, 60), rng.uniform(-1, 1),
                                 rng.uniform(0, 6), 0.0, radius=1.2)]
            try:
                out = plan(state, obs, cfg, straight_line, target_speed=12.0)
            except PlanInfeasibleError:
                continue
            predicted = predict_obstacles(obs, out.candidate.t.size - 1, cfg.dt)
            assert not frenet._collides(out.candidate, predicted, obs)
