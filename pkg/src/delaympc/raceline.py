"""Track ingestion, minimum-curvature line, velocity profile and Frenet-frame
projection services.

Conventions: lateral offsets are left-positive, heading is counterclockwise
positive. Track files are comma-separated "x,y,w" rows (meters, w = corridor
half-width), '#' comments and an optional header allowed.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import qp

log = logging.getLogger(__name__)


class TrackError(ValueError):
    pass


class ProjectionError(ValueError):
    pass


def wrap_angle(a):
    return (a + np.pi) % (2.0 * np.pi) - np.pi


@dataclass(eq=False)
class Track:
    xy: np.ndarray            # (n, 2)
    half_width: np.ndarray    # (n,)
    closed: bool
    w_veh: float = 2.0

    def __post_init__(self):
        self.xy = np.asarray(self.xy, dtype=float).reshape(-1, 2)
        self.half_width = np.asarray(self.half_width, dtype=float)
        if self.half_width.size != len(self.xy):
            raise TrackError("width column length mismatch")
        seg = np.linalg.norm(np.diff(self.xy, axis=0), axis=1)
        if np.any(seg < 1e-9):
            raise TrackError("consecutive track samples must be distinct")
        bad = np.where(self.half_width <= self.w_veh / 2.0)[0]
        if bad.size:
            raise TrackError(
                f"sample {bad[0]}: half-width {self.half_width[bad[0]]:.3f} "
                f"<= w_veh/2 = {self.w_veh / 2.0:.3f}")

    @property
    def n_samples(self) -> int:
        return len(self.xy)

    def validate_for_optimization(self):
        if self.n_samples < 10:
            raise TrackError(f"need >= 10 samples, got {self.n_samples}")


def parse_track(path, w_veh: float = 2.0, closed: bool | None = None) -> Track:
    """Read raw samples without resampling."""
    rows = []
    path = Path(path)
    if not path.exists():
        raise TrackError(f"track file not found: {path}")
    with open(path) as fh:
        for lineno, raw in enumerate(fh, start=1):
            text = raw.split("#", 1)[0].strip()
            if not text:
                continue
            parts = [p.strip() for p in text.split(",")]
            try:
                vals = [float(p) for p in parts]
            except ValueError:
                if lineno == 1 or not rows:
                    continue  # header line
                raise TrackError(f"{path}:{lineno}: cannot parse row {text!r}")
            if len(vals) != 3:
                raise TrackError(f"{path}:{lineno}: expected 3 columns, got {len(vals)}")
            rows.append(vals)
    if len(rows) < 3:
        raise TrackError(f"{path}: need at least 3 samples, got {len(rows)}")
    arr = np.asarray(rows)
    xy, w = arr[:, :2], arr[:, 2]
    if closed is None:
        # endpoints within ~one sample spacing mean the loop closes
        spacing = np.median(np.linalg.norm(np.diff(xy, axis=0), axis=1))
        closed = np.linalg.norm(xy[0] - xy[-1]) < 1.5 * spacing
    if closed and np.linalg.norm(xy[0] - xy[-1]) < 1e-9:
        xy, w = xy[:-1], w[:-1]
    bad = np.where(w <= w_veh / 2.0)[0]
    if bad.size:
        raise TrackError(f"{path}: sample {bad[0]}: half-width {w[bad[0]]:.3f} "
                         f"<= w_veh/2 = {w_veh / 2.0:.3f}")
    return Track(xy, w, bool(closed), w_veh)


def resample_track(track: Track, spacing: float = 2.0) -> Track:
    """Uniform arc-length resampling of the centerline through a cubic spline
    (periodic for closed tracks)."""
    from scipy.interpolate import CubicSpline

    xy = track.xy
    w = track.half_width
    if track.closed:
        xy = np.vstack([xy, xy[:1]])
        w = np.concatenate([w, w[:1]])
    seg = np.linalg.norm(np.diff(xy, axis=0), axis=1)
    s = np.concatenate([[0.0], np.cumsum(seg)])
    length = s[-1]
    bc = "periodic" if track.closed else "natural"
    spline = CubicSpline(s, xy, bc_type=bc)
    # refine the arc-length parameterization on the spline itself
    dense = spline(np.linspace(0.0, length, max(len(xy) * 20, 2000)))
    seg_d = np.linalg.norm(np.diff(dense, axis=0), axis=1)
    s_d = np.concatenate([[0.0], np.cumsum(seg_d)])
    length_d = s_d[-1]
    n = max(int(round(length_d / spacing)), 10)
    if track.closed:
        grid = np.linspace(0.0, length_d, n, endpoint=False)
    else:
        grid = np.linspace(0.0, length_d, n + 1)
    u = np.interp(grid, s_d, np.linspace(0.0, length, len(dense)))
    new_xy = spline(u)
    new_w = np.interp(u, s, w)
    return Track(new_xy, new_w, track.closed, track.w_veh)


def load_track(path, spacing: float | None = 2.0, w_veh: float = 2.0,
               closed: bool | None = None) -> Track:
    track = parse_track(path, w_veh=w_veh, closed=closed)
    if spacing is not None:
        track = resample_track(track, spacing)
    return track


def _path_geometry(xy: np.ndarray, closed: bool):
    """Arc length, heading and signed curvature of a sampled path."""
    n = len(xy)
    if closed:
        prv = np.roll(xy, 1, axis=0)
        nxt = np.roll(xy, -1, axis=0)
        seg = np.linalg.norm(xy - prv, axis=1)
        s = np.concatenate([[0.0], np.cumsum(np.linalg.norm(np.diff(xy, axis=0), axis=1))])
        length = s[-1] + np.linalg.norm(xy[0] - xy[-1])
        ds = np.linalg.norm(nxt - prv, axis=1)
        d1 = (nxt - prv) / ds[:, None]
        d2 = (nxt - 2.0 * xy + prv) / (0.5 * ds[:, None]) ** 2
    else:
        seg = np.linalg.norm(np.diff(xy, axis=0), axis=1)
        s = np.concatenate([[0.0], np.cumsum(seg)])
        length = s[-1]
        d1 = np.gradient(xy, s, axis=0)
        d2_x = np.gradient(d1[:, 0], s)
        d2_y = np.gradient(d1[:, 1], s)
        d2 = np.column_stack([d2_x, d2_y])
    psi = np.arctan2(d1[:, 1], d1[:, 0])
    speed2 = (d1 ** 2).sum(axis=1)
    kappa = (d1[:, 0] * d2[:, 1] - d1[:, 1] * d2[:, 0]) / np.maximum(speed2, 1e-12) ** 1.5
    return s, length, psi, kappa


def _left_normals(psi: np.ndarray) -> np.ndarray:
    return np.column_stack([-np.sin(psi), np.cos(psi)])


@dataclass(eq=False)
class Raceline:
    x: np.ndarray
    y: np.ndarray
    s: np.ndarray
    vx: np.ndarray
    ax: np.ndarray
    psi: np.ndarray
    kappa: np.ndarray
    alpha: np.ndarray        # lateral offset from the input centerline [m]
    half_width: np.ndarray   # corridor half-width at each sample [m]
    closed: bool
    length: float
    w_veh: float = 2.0
    _psi_u: np.ndarray = field(default=None, repr=False)

    def __post_init__(self):
        if self._psi_u is None:
            self._psi_u = np.unwrap(self.psi)

    @property
    def xy(self) -> np.ndarray:
        return np.column_stack([self.x, self.y])

    def _wrap_s(self, s):
        if self.closed:
            return np.mod(s, self.length)
        return np.clip(s, 0.0, self.length)

    def _interp(self, s, values, angular=False):
        sq = self._wrap_s(s)
        if self.closed:
            grid = np.concatenate([self.s, [self.length]])
            if angular:
                close = values[0] + 2.0 * np.pi * round((values[-1] - values[0]) / (2.0 * np.pi))
                vals = np.concatenate([values, [close]])
            else:
                vals = np.concatenate([values, [values[0]]])
        else:
            grid, vals = self.s, values
        return np.interp(sq, grid, vals)

    def curvature_at(self, s):
        return self._interp(s, self.kappa)

    def speed_at(self, s):
        return self._interp(s, self.vx)

    def accel_at(self, s):
        return self._interp(s, self.ax)

    def heading_at(self, s):
        return self._interp(s, self._psi_u, angular=True)

    def alpha_at(self, s):
        return self._interp(s, self.alpha)

    def width_at(self, s):
        return self._interp(s, self.half_width)

    def point_at(self, s):
        return np.stack([self._interp(s, self.x), self._interp(s, self.y)], axis=-1)

    def lane_bounds_at(self, s, w_veh: float | None = None):
        """Allowed lateral offset range (lo, hi) from the raceline, keeping the
        vehicle body inside the corridor."""
        half = (w_veh if w_veh is not None else self.w_veh) / 2.0
        w = self.width_at(s)
        a = self.alpha_at(s)
        return -(w + a) + half, (w - a) - half

    def sum_kappa_sq(self) -> float:
        return float(np.sum(self.kappa ** 2))


def _geometry_line(xy, alpha, half_width, closed, w_veh) -> Raceline:
    s, length, psi, kappa = _path_geometry(xy, closed)
    return Raceline(xy[:, 0], xy[:, 1], s, np.zeros(len(xy)), np.zeros(len(xy)),
                    psi, kappa, alpha, half_width, closed, length, w_veh)


def centerline(track: Track) -> Raceline:
    return _geometry_line(track.xy, np.zeros(track.n_samples), track.half_width,
                          track.closed, track.w_veh)


def _diff_matrices(n: int, closed: bool):
    """Central first/second difference operators in the sample index."""
    d1 = np.zeros((n, n))
    d2 = np.zeros((n, n))
    idx = np.arange(n)
    if closed:
        d1[idx, (idx + 1) % n] = 0.5
        d1[idx, (idx - 1) % n] = -0.5
        d2[idx, idx] = -2.0
        d2[idx, (idx + 1) % n] = 1.0
        d2[idx, (idx - 1) % n] = 1.0
    else:
        for i in range(1, n - 1):
            d1[i, i + 1] = 0.5
            d1[i, i - 1] = -0.5
            d2[i, i - 1] = 1.0
            d2[i, i] = -2.0
            d2[i, i + 1] = 1.0
        d1[0, :2] = [-1.0, 1.0]
        d1[-1, -2:] = [-1.0, 1.0]
    return d1, d2


def _kappa_and_jacobian(xy, nrm, closed):
    """Discrete curvature kappa(alpha) at alpha = 0 and its exact Jacobian in
    the lateral offsets along `nrm`."""
    n = len(xy)
    d1, d2 = _diff_matrices(n, closed)
    xp = d1 @ xy[:, 0]
    yp = d1 @ xy[:, 1]
    xpp = d2 @ xy[:, 0]
    ypp = d2 @ xy[:, 1]
    t1x = d1 @ np.diag(nrm[:, 0])
    t1y = d1 @ np.diag(nrm[:, 1])
    t2x = d2 @ np.diag(nrm[:, 0])
    t2y = d2 @ np.diag(nrm[:, 1])
    num = xp * ypp - yp * xpp
    speed2 = np.maximum(xp ** 2 + yp ** 2, 1e-12)
    den = speed2 ** 1.5
    kappa = num / den
    dnum = (np.diag(ypp) @ t1x + np.diag(xp) @ t2y
            - np.diag(xpp) @ t1y - np.diag(yp) @ t2x)
    dden = 3.0 * np.diag(np.sqrt(speed2)) @ (np.diag(xp) @ t1x + np.diag(yp) @ t1y)
    jac = np.diag(1.0 / den) @ dnum - np.diag(num / den ** 2) @ dden
    return kappa, jac


def min_curvature_line(track: Track, iterations: int = 3) -> Raceline:
    """Minimize the sum of squared curvature over lateral offsets inside the
    corridor.

    The discrete curvature is linearized in the offsets around the current
    line, giving a box-constrained QP; the linearize-solve loop runs a few
    times since the exact cost is nonlinear. Velocity fields stay zero until
    `velocity_profile` fills them.
    """
    track.validate_for_optimization()
    xy0 = track.xy
    n = track.n_samples
    _, _, psi0, _ = _path_geometry(xy0, track.closed)
    n0 = _left_normals(psi0)
    bound = track.half_width - track.w_veh / 2.0

    alpha = np.zeros(n)
    for _ in range(max(iterations, 1)):
        xy = xy0 + n0 * alpha[:, None]
        _, _, psi, _ = _path_geometry(xy, track.closed)
        nrm = _left_normals(psi)
        kappa0, jac = _kappa_and_jacobian(xy, nrm, track.closed)
        p = 2.0 * (jac.T @ jac) + 1e-9 * np.eye(n)
        q_vec = 2.0 * (jac.T @ kappa0)
        lo = -bound - alpha
        hi = bound - alpha
        if not track.closed:
            lo[0] = hi[0] = 0.0
            lo[-1] = hi[-1] = 0.0
        sol = qp.solve(qp.QpProblem(p, q_vec, lb=lo, ub=hi, assume_psd=True),
                       tol=1e-8, max_iter=8000)
        if sol.status == "infeasible":
            raise TrackError("minimum-curvature QP infeasible (degenerate widths)")
        # accumulate along the original normal bundle and clip to the corridor
        delta_xy = nrm * sol.x[:, None]
        alpha = alpha + (delta_xy * n0).sum(axis=1)
        alpha = np.clip(alpha, -bound, bound)

    line = _geometry_line(xy0 + n0 * alpha[:, None], alpha, track.half_width.copy(),
                          track.closed, track.w_veh)
    base = centerline(track)
    if line.sum_kappa_sq() > base.sum_kappa_sq():
        log.warning("min-curvature iteration did not improve on the centerline; "
                    "returning the centerline")
        return base
    return line


def velocity_profile(line: Raceline, a_lat_max: float, a_acc_max: float,
                     a_brake_max: float, v_max: float = 30.0,
                     v_min: float = 0.1) -> Raceline:
    """Three-pass speed profile: lateral-acceleration cap, then forward
    acceleration and backward braking passes (wraparound for closed lines)."""
    kappa = np.abs(line.kappa)
    v = np.minimum(v_max, np.sqrt(a_lat_max / np.maximum(kappa, 1e-9)))
    v = np.maximum(v, v_min)
    n = len(v)
    if line.closed:
        ds = np.diff(np.concatenate([line.s, [line.length]]))
    else:
        ds = np.diff(line.s)

    for _ in range(12 if line.closed else 2):
        changed = False
        rng = range(n) if line.closed else range(n - 1)
        for i in rng:
            j = (i + 1) % n
            cap = math.sqrt(v[i] ** 2 + 2.0 * a_acc_max * ds[i if i < ds.size else -1])
            if v[j] > cap + 1e-12:
                v[j] = cap
                changed = True
        for i in reversed(rng):
            j = (i + 1) % n
            cap = math.sqrt(v[j] ** 2 + 2.0 * a_brake_max * ds[i if i < ds.size else -1])
            if v[i] > cap + 1e-12:
                v[i] = cap
                changed = True
        if not changed:
            break

    if line.closed:
        nxt = np.roll(v, -1)
        prv = np.roll(v, 1)
        ax = v * (nxt - prv) / (2.0 * np.mean(ds))
    else:
        ax = v * np.gradient(v, line.s)
    return replace(line, vx=v, ax=ax)


def frenet_project(point, line: Raceline, s_guess: float | None = None):
    """Nearest-point projection onto the raceline.

    Returns (s, d, c) with d signed left-positive and c the interpolated
    curvature at the foot point. A previous s seeds a local search window.
    """
    p = np.asarray(point, dtype=float)
    pts = line.xy
    n = len(pts)
    if line.closed:
        seg_i = np.arange(n)
        seg_j = (seg_i + 1) % n
    else:
        seg_i = np.arange(n - 1)
        seg_j = seg_i + 1

    if s_guess is not None:
        centre = int(np.searchsorted(line.s, line._wrap_s(s_guess)))
        window = max(int(30), 5)
        idx = (centre + np.arange(-window, window + 1))
        idx = np.mod(idx, seg_i.size) if line.closed else np.clip(idx, 0, seg_i.size - 1)
        idx = np.unique(idx)
        seg_i, seg_j = seg_i[idx], seg_j[idx]

    a = pts[seg_i]
    b = pts[seg_j]
    ab = b - a
    denom = np.maximum((ab ** 2).sum(axis=1), 1e-12)
    t = np.clip(((p - a) * ab).sum(axis=1) / denom, 0.0, 1.0)
    feet = a + ab * t[:, None]
    dist = np.linalg.norm(feet - p, axis=1)
    k = int(np.argmin(dist))

    max_dist = 4.0 * float(np.max(line.half_width))
    if dist[k] > max_dist:
        raise ProjectionError(f"point {p} is {dist[k]:.1f} m from the line "
                              f"(limit {max_dist:.1f})")
    seg_len = math.sqrt(denom[k])
    s_here = line.s[seg_i[k]] + t[k] * seg_len
    if line.closed:
        s_here = s_here % line.length
    tangent = ab[k] / seg_len
    normal = np.array([-tangent[1], tangent[0]])
    d = float((p - feet[k]) @ normal)
    return float(s_here), d, float(line.curvature_at(s_here))


def frenet_to_world(line: Raceline, s: float, d: float):
    base = line.point_at(s)
    psi = line.heading_at(s)
    return base + d * np.array([-math.sin(psi), math.cos(psi)])
