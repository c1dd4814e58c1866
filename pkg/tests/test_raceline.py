import math
from pathlib import Path

import numpy as np
import pytest

from delaympc import raceline as rl

TRACKS = Path(__file__).resolve().parent.parent / "tracks"


def circle_track(r=30.0, w=4.0, n=120, w_veh=2.0):
    ang = np.linspace(0, 2 * np.pi, n, endpoint=False)
    xy = np.column_stack([r * np.cos(ang), r * np.sin(ang)])
    return rl.Track(xy, np.full(n, w), True, w_veh)


class TestLoadTrack:
    def test_square_raw_samples(self):
        track = rl.load_track(TRACKS / "square.csv", spacing=None)
        assert track.n_samples == 4
        assert track.closed

    def test_width_violation_names_row(self, tmp_path):
        path = tmp_path / "bad.csv"
        path.write_text("x,y,w\n0,0,4\n5,0,0.5\n10,0,4\n15,0,4\n")
        with pytest.raises(rl.TrackError, match="sample 1"):
            rl.load_track(path, w_veh=2.0)

    def test_malformed_row(self, tmp_path):
        path = tmp_path / "bad.csv"
        path.write_text("0,0,4\n5,0\n")
        with pytest.raises(rl.TrackError, match="bad.csv:2"):
            rl.load_track(path)

    def test_missing_file(self):
        with pytest.raises(rl.TrackError, match="not found"):
            rl.load_track(TRACKS / "nope.csv")

    def test_comments_and_header_skipped(self, tmp_path):
        path = tmp_path / "t.csv"
        path.write_text("# comment\nx,y,w\n0,0,4\n10,0,4\n20,0,4\n30,0,4\n")
        track = rl.load_track(path, spacing=None)
        assert track.n_samples == 4
        assert not track.closed

    def test_oval_resample_uniform(self):
        track = rl.load_track(TRACKS / "oval.csv", spacing=2.0)
        pts = np.vstack([track.xy, track.xy[:1]])
        d = np.linalg.norm(np.diff(pts, axis=0), axis=1)
        assert np.max(np.abs(d - d.mean())) / d.mean() <= 0.01

    def test_closed_autodetect(self):
        assert rl.load_track(TRACKS / "oval.csv").closed
        assert not rl.load_track(TRACKS / "straight.csv").closed
        assert not rl.load_track(TRACKS / "corner90.csv").closed


class TestMinCurvature:
    def test_straight_track_stays_centered(self):
        track = rl.load_track(TRACKS / "straight.csv", spacing=5.0)
        line = rl.min_curvature_line(track)
        assert np.max(np.abs(line.alpha)) < 1e-3
        assert line.sum_kappa_sq() <= rl.centerline(track).sum_kappa_sq() + 1e-12

    def test_circle_against_constant_offset_oracle(self):
        r, w, w_veh = 30.0, 4.0, 2.0
        track = circle_track(r, w, w_veh=w_veh)
        line = rl.min_curvature_line(track)
        # oracle: brute force over constant-offset circles
        best = math.inf
        for off in np.linspace(-(w - w_veh / 2), w - w_veh / 2, 121):
            _, _, psi, _ = rl._path_geometry(track.xy, True)
            n0 = rl._left_normals(psi)
            _, _, _, kap = rl._path_geometry(track.xy + n0 * off, True)
            best = min(best, float(np.sum(kap ** 2)))
        assert line.sum_kappa_sq() <= best * 1.001
        # per-sample curvature inside the geometric band
        assert np.all(np.abs(line.kappa) <= 1.0 / r + 1e-6)
        assert np.all(np.abs(line.kappa) >= 1.0 / (r + w) - 1e-6)

    def test_corner_reduction(self):
        track = rl.load_track(TRACKS / "corner90.csv", spacing=2.0)
        line = rl.min_curvature_line(track)
        base = rl.centerline(track)
        assert line.sum_kappa_sq() <= 0.8 * base.sum_kappa_sq()

    @pytest.mark.parametrize("name", ["straight.csv", "oval.csv", "corner90.csv"])
    def test_never_worse_than_centerline_and_bounds(self, name):
        track = rl.load_track(TRACKS / name, spacing=2.0)
        line = rl.min_curvature_line(track)
        assert line.sum_kappa_sq() <= rl.centerline(track).sum_kappa_sq() + 1e-12
        bound = track.half_width - track.w_veh / 2.0
        assert np.all(np.abs(line.alpha) <= bound + 1e-12)

    def test_too_few_samples(self):
        track = rl.load_track(TRACKS / "square.csv", spacing=None)
        with pytest.raises(rl.TrackError, match=">= 10"):
            rl.min_curvature_line(track)


class TestVelocityProfile:
    def line(self):
        track = rl.load_track(TRACKS / "oval.csv", spacing=2.0)
        return rl.min_curvature_line(track)

    def test_straight_hits_cap(self):
        track = rl.load_track(TRACKS / "straight.csv", spacing=5.0)
        line = rl.velocity_profile(rl.min_curvature_line(track), 6.0, 3.0, 5.0,
                                   v_max=15.0)
        mid = slice(10, -10)
        assert np.allclose(line.vx[mid], 15.0)

    def test_constant_curvature_speed(self):
        track = circle_track(r=20.0, w=4.0)
        line = rl.centerline(track)
        out = rl.velocity_profile(line, a_lat_max=5.0, a_acc_max=50.0,
                                  a_brake_max=50.0, v_max=50.0)
        # kappa = 0.05 -> v = sqrt(5 / 0.05) = 10
        assert np.allclose(out.vx, 10.0, atol=0.05)

    def test_pointwise_limits(self):
        a_lat, a_acc, a_brake = 6.0, 3.0, 5.0
        line = rl.velocity_profile(self.line(), a_lat, a_acc, a_brake, v_max=18.0)
        v = line.vx
        kappa = np.abs(line.kappa)
        assert np.all(v ** 2 * kappa <= a_lat + 1e-6)
        ds = np.diff(np.concatenate([line.s, [line.length]]))
        nxt = np.roll(v, -1)
        acc = (nxt ** 2 - v ** 2) / (2 * ds)
        assert np.all(acc <= a_acc + 1e-6)
        assert np.all(acc >= -a_brake - 1e-6)

    def test_fixed_point(self):
        line = rl.velocity_profile(self.line(), 6.0, 3.0, 5.0, v_max=18.0)
        again = rl.velocity_profile(line, 6.0, 3.0, 5.0, v_max=18.0)
        assert np.max(np.abs(again.vx - line.vx)) <= 1e-9


class TestFrenetProject:
    def line(self):
        track = rl.load_track(TRACKS / "oval.csv", spacing=2.0)
        return rl.min_curvature_line(track)

    def test_point_on_line(self):
        line = self.line()
        p = line.xy[10]
        s, d, c = rl.frenet_project(p, line)
        assert abs(d) < 1e-9
        assert s == pytest.approx(line.s[10], abs=1e-6)

    def test_left_positive_sign(self):
        track = rl.load_track(TRACKS / "straight.csv", spacing=5.0)
        line = rl.min_curvature_line(track)
        s, d, c = rl.frenet_project((50.0, 1.0), line)
        assert d == pytest.approx(1.0, abs=1e-9)
        assert s == pytest.approx(50.0, abs=1e-9)

    def test_exhaustive_search_oracle(self):
        line = self.line()
        rng = np.random.default_rng(4)
        dense_s = np.linspace(0, line.length, 20000, endpoint=False)
        dense_pts = line.point_at(dense_s)
        for _ in range(30):
            p = rl.frenet_to_world(line, rng.uniform(0, line.length),
                                   rng.uniform(-3, 3))
            s, d, c = rl.frenet_project(p, line)
            foot = rl.frenet_to_world(line, s, 0.0)
            brute = dense_pts[np.argmin(np.linalg.norm(dense_pts - p, axis=1))]
            assert np.linalg.norm(foot - brute) <= 1e-3 + line.length / 20000 * 2

    def test_seeded_search_continuity(self):
        line = self.line()
        p = rl.frenet_to_world(line, 100.0, 1.0)
        s1, d1, _ = rl.frenet_project(p, line)
        s2, d2, _ = rl.frenet_project(p, line, s_guess=99.0)
        assert s1 == pytest.approx(s2, abs=1e-9)
        assert d1 == pytest.approx(d2, abs=1e-9)

    def test_too_far_raises(self):
        line = self.line()
        with pytest.raises(rl.ProjectionError):
            rl.frenet_project((500.0, 500.0), line)

    def test_curvature_interpolated(self):
        line = self.line()
        s, d, c = rl.frenet_project(line.xy[20], line)
        assert c == pytest.approx(line.kappa[20], abs=1e-6)


class TestRacelineLookups:
    def test_wraparound(self):
        track = rl.load_track(TRACKS / "oval.csv", spacing=2.0)
        line = rl.min_curvature_line(track)
        assert line.curvature_at(line.length + 5.0) == pytest.approx(
            line.curvature_at(5.0))
        p1 = line.point_at(line.length + 5.0)
        p2 = line.point_at(5.0)
        assert np.allclose(p1, p2)

    def test_lane_bounds_shrink_with_alpha(self):
        track = rl.load_track(TRACKS / "oval.csv", spacing=2.0)
        line = rl.min_curvature_line(track)
        lo, hi = line.lane_bounds_at(line.s)
        assert np.all(hi >= -1e-9)
        assert np.all(lo <= 1e-9)
        # edges sum to the full corridor minus the vehicle width
        assert np.allclose(hi - lo, 2 * line.half_width - line.w_veh, atol=1e-9)
