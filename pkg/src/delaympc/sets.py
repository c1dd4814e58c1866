"""Zonotope / H-polytope algebra: disturbance sets, invariant tubes, constraint
tightening and convex free-space regions in the (s, e1) plane."""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import linprog


class EmptySetError(ValueError):
    """A tightening removed the whole interior of a constraint set."""


class DivergentTubeError(ValueError):
    """Closed-loop matrix is not contractive; the disturbance tube diverges."""


class SeedInfeasibleError(ValueError):
    """Region seed violates the lane bounds or sits on an obstacle point."""


@dataclass(eq=False)
class Zonotope:
    """center + sum_i [-1, 1] * generators[:, i]"""

    center: np.ndarray
    generators: np.ndarray  # (n, m), columns are generators

    def __post_init__(self):
        self.center = np.atleast_1d(np.asarray(self.center, dtype=float))
        g = np.asarray(self.generators, dtype=float)
        if g.size == 0:
            g = np.zeros((self.center.size, 0))
        if g.ndim == 1:
            g = g.reshape(self.center.size, -1)
        if g.shape[0] != self.center.size:
            raise ValueError("generator rows must match center dimension")
        self.generators = g

    @classmethod
    def box(cls, radii, center=None) -> "Zonotope":
        radii = np.atleast_1d(np.asarray(radii, dtype=float))
        if center is None:
            center = np.zeros_like(radii)
        keep = np.abs(radii) > 0.0
        gens = np.diag(radii)[:, keep]
        return cls(np.asarray(center, dtype=float), gens)

    @classmethod
    def origin(cls, dim: int) -> "Zonotope":
        return cls(np.zeros(dim), np.zeros((dim, 0)))

    @property
    def dim(self) -> int:
        return self.center.size

    @property
    def n_generators(self) -> int:
        return self.generators.shape[1]

    def support(self, direction) -> float:
        """h(d) = d.c + sum_i |d.g_i|"""
        d = np.asarray(direction, dtype=float)
        nrm = np.linalg.norm(d)
        if nrm == 0.0:
            raise ValueError("support direction must be nonzero")
        return float(d @ self.center + np.abs(d @ self.generators).sum())

    def box_radius(self) -> np.ndarray:
        """Componentwise interval-hull radius."""
        return np.abs(self.generators).sum(axis=1)

    def interval_hull(self) -> "Zonotope":
        return Zonotope.box(self.box_radius(), self.center)

    def linear_map(self, mat) -> "Zonotope":
        mat = np.asarray(mat, dtype=float)
        return Zonotope(mat @ self.center, mat @ self.generators)

    def contains(self, point, tol: float = 1e-9) -> bool:
        """Membership via LP over generator coefficients (cheap pre-checks first)."""
        d = np.asarray(point, dtype=float) - self.center
        g = self.generators
        if g.shape[1] == 0:
            return bool(np.all(np.abs(d) <= tol))
        # outer box reject
        if np.any(np.abs(d) > self.box_radius() + tol):
            return False
        # least-norm quick accept
        eta, *_ = np.linalg.lstsq(g, d, rcond=None)
        if np.allclose(g @ eta, d, atol=tol) and np.max(np.abs(eta)) <= 1.0 + tol:
            return True
        res = linprog(
            c=np.zeros(g.shape[1]),
            A_eq=g,
            b_eq=d,
            bounds=[(-1.0 - tol, 1.0 + tol)] * g.shape[1],
            method="highs",
        )
        return bool(res.status == 0)

    def vertices_2d(self) -> np.ndarray:
        """Exact vertex list for 2-D zonotopes (hull of signed generator sums)."""
        if self.dim != 2:
            raise ValueError("vertex enumeration only implemented for dim 2")
        g = self.generators
        if g.shape[1] == 0:
            return self.center.reshape(1, 2)
        # sort generators by angle, walk the boundary
        gs = np.where(g[1] < 0, -g, g).T
        order = np.argsort(np.arctan2(gs[:, 1], gs[:, 0]))
        gs = gs[order]
        v = self.center - gs.sum(axis=0)
        verts = [v]
        for gen in gs:
            v = v + 2 * gen
            verts.append(v)
        for gen in gs[:-1]:
            v = v - 2 * gen
            verts.append(v)
        return np.array(verts)


def minkowski_sum(z1: Zonotope, z2: Zonotope) -> Zonotope:
    if z1.dim != z2.dim:
        raise ValueError(f"dimension mismatch: {z1.dim} vs {z2.dim}")
    return Zonotope(z1.center + z2.center, np.hstack([z1.generators, z2.generators]))


def support(z: Zonotope, direction) -> float:
    return z.support(direction)


@dataclass(eq=False)
class HPolytope:
    """Intersection of halfspaces a_i . x <= b_i with unit-normalized rows."""

    a: np.ndarray  # (m, n)
    b: np.ndarray  # (m,)

    def __post_init__(self):
        a = np.atleast_2d(np.asarray(self.a, dtype=float))
        b = np.atleast_1d(np.asarray(self.b, dtype=float))
        if a.shape[0] != b.size:
            raise ValueError("row count mismatch between normals and offsets")
        norms = np.linalg.norm(a, axis=1)
        if np.any(norms == 0.0):
            raise ValueError("zero normal row in polytope")
        self.a = a / norms[:, None]
        self.b = b / norms

    @classmethod
    def from_box(cls, lo, hi) -> "HPolytope":
        lo = np.atleast_1d(np.asarray(lo, dtype=float))
        hi = np.atleast_1d(np.asarray(hi, dtype=float))
        n = lo.size
        eye = np.eye(n)
        return cls(np.vstack([eye, -eye]), np.concatenate([hi, -lo]))

    @property
    def dim(self) -> int:
        return self.a.shape[1]

    @property
    def n_rows(self) -> int:
        return self.a.shape[0]

    def contains(self, x, tol: float = 1e-9) -> bool:
        return bool(np.all(self.a @ np.asarray(x, dtype=float) <= self.b + tol))

    def margins(self, x) -> np.ndarray:
        """b - A x, nonnegative inside."""
        return self.b - self.a @ np.asarray(x, dtype=float)

    def intersect(self, other: "HPolytope") -> "HPolytope":
        if self.dim != other.dim:
            raise ValueError("dimension mismatch")
        return HPolytope(np.vstack([self.a, other.a]), np.concatenate([self.b, other.b]))

    def chebyshev_radius(self) -> float:
        """max r with a_i.x + r <= b_i; negative means empty."""
        n = self.dim
        c = np.zeros(n + 1)
        c[-1] = -1.0
        a_ub = np.hstack([self.a, np.ones((self.n_rows, 1))])
        res = linprog(
            c, A_ub=a_ub, b_ub=self.b, bounds=[(None, None)] * (n + 1), method="highs"
        )
        if res.status == 3:  # unbounded radius: nonempty for sure
            return np.inf
        if res.status != 0:
            return -np.inf
        return float(res.x[-1])

    def is_empty(self, tol: float = 1e-12) -> bool:
        return self.chebyshev_radius() < -tol


def pontryagin_diff(p: HPolytope, z: Zonotope) -> HPolytope:
    """P minus Z: offsets shrink by the support of Z along each row normal.

    Exact for an H-polytope minus a convex set. Raises EmptySetError when the
    tightened set has no interior left.
    """
    if p.dim != z.dim:
        raise ValueError(f"dimension mismatch: {p.dim} vs {z.dim}")
    new_b = p.b - np.array([z.support(row) for row in p.a])
    out = HPolytope(p.a.copy(), new_b)
    if out.is_empty():
        raise EmptySetError("Pontryagin difference is empty")
    return out


def tube_terms(a_cl, w: Zonotope, tol: float = 1e-6, max_terms: int = 200) -> list[Zonotope]:
    """Terms A^i W of the disturbance-invariant series, truncated when the next
    term's largest generator norm falls below tol."""
    a_cl = np.asarray(a_cl, dtype=float)
    rho = max(np.abs(np.linalg.eigvals(a_cl)))
    if rho >= 1.0 - 1e-12:
        raise DivergentTubeError(f"closed-loop spectral radius {rho:.6f} >= 1")
    terms = [w]
    mat = a_cl
    for _ in range(max_terms - 1):
        term = w.linear_map(mat)
        size = max(
            np.max(np.linalg.norm(term.generators, axis=0)) if term.n_generators else 0.0,
            np.linalg.norm(term.center),
        )
        if size < tol:
            break
        terms.append(term)
        mat = a_cl @ mat
    return terms


def invariant_tube(a_cl, w: Zonotope, n_terms: int | None = None,
                   tol: float = 1e-6, max_terms: int = 200) -> Zonotope:
    """Z = W + A W + ... + A^{N-1} W, a truncated over-approximation of the
    minimal disturbance-invariant set for x+ = A x + w."""
    if n_terms is not None:
        a_cl = np.asarray(a_cl, dtype=float)
        rho = max(np.abs(np.linalg.eigvals(a_cl)))
        if rho >= 1.0 - 1e-12:
            raise DivergentTubeError(f"closed-loop spectral radius {rho:.6f} >= 1")
        terms = [w]
        mat = a_cl
        for _ in range(n_terms - 1):
            terms.append(w.linear_map(mat))
            mat = a_cl @ mat
    else:
        terms = tube_terms(a_cl, w, tol=tol, max_terms=max_terms)
    z = terms[0]
    for t in terms[1:]:
        z = minkowski_sum(z, t)
    return z


def envelope(z_prev: Zonotope, z_new: Zonotope) -> Zonotope:
    """Axis-aligned hull covering both inputs; keeps the tube monotone across
    relinearizations."""
    if z_prev.dim != z_new.dim:
        raise ValueError("dimension mismatch")
    lo = np.minimum(z_prev.center - z_prev.box_radius(), z_new.center - z_new.box_radius())
    hi = np.maximum(z_prev.center + z_prev.box_radius(), z_new.center + z_new.box_radius())
    return Zonotope.box((hi - lo) / 2.0, (hi + lo) / 2.0)


@dataclass(eq=False)
class ConvexRegion:
    """Convex free-space polytope in the (s, e1) plane around a seed point.

    Rows double as safety functions h_i(s, e1) = c_i - a_i s - b_i e1 >= 0
    inside, matching the linear-CBF reading of the state constraints.
    """

    polytope: HPolytope
    seed: np.ndarray = field(default_factory=lambda: np.zeros(2))

    def __post_init__(self):
        self.seed = np.asarray(self.seed, dtype=float)

    @property
    def n_sides(self) -> int:
        return self.polytope.n_rows

    def h_values(self, s: float, e1: float) -> np.ndarray:
        return self.polytope.margins(np.array([s, e1]))

    def contains(self, s: float, e1: float, tol: float = 1e-9) -> bool:
        return self.polytope.contains(np.array([s, e1]), tol=tol)


def iris_region(seed, obstacle_points, lane_bounds: HPolytope, *,
                aspect: tuple[float, float] = (1.0, 1.0), margin: float = 0.05,
                max_iter: int = 20) -> ConvexRegion:
    """Grow a convex obstacle-free region around `seed` inside the lane.

    Alternates inflating an axis-aligned ellipse at the seed with adding the
    tangent separating plane at the first obstacle point it touches, until no
    obstacle point remains strictly inside. The seed always stays strictly
    interior; planes back off from the touched point by `margin` when the gap
    to the seed allows it.
    """
    seed = np.asarray(seed, dtype=float)
    if lane_bounds.dim != 2:
        raise ValueError("lane bounds must live in the (s, e1) plane")
    if np.any(lane_bounds.margins(seed) <= 0.0):
        raise SeedInfeasibleError("seed is not strictly inside the lane bounds")

    pts = np.asarray(obstacle_points, dtype=float).reshape(-1, 2)
    if pts.size and np.min(np.linalg.norm(pts - seed, axis=1)) < 1e-9:
        raise SeedInfeasibleError("seed coincides with an obstacle point")

    scale = np.asarray(aspect, dtype=float)
    rows_a = [row.copy() for row in lane_bounds.a]
    rows_b = list(lane_bounds.b)

    def inside_mask():
        if pts.size == 0:
            return np.zeros(0, dtype=bool)
        vals = np.asarray(rows_a) @ pts.T - np.asarray(rows_b)[:, None]
        return np.all(vals < -1e-12, axis=0)

    converged = False
    for _ in range(max_iter):
        mask = inside_mask()
        if not mask.any():
            converged = True
            break
        cand = pts[mask]
        # scaled metric distance: the inflating ellipse touches the closest one first
        rho = np.hypot((cand[:, 0] - seed[0]) / scale[0], (cand[:, 1] - seed[1]) / scale[1])
        order = np.lexsort((cand[:, 1], cand[:, 0], rho))
        touch = cand[order[0]]
        normal = np.array([(touch[0] - seed[0]) / scale[0] ** 2,
                           (touch[1] - seed[1]) / scale[1] ** 2])
        normal = normal / np.linalg.norm(normal)
        gap = float(normal @ (touch - seed))
        back = min(margin, 0.5 * gap)
        rows_a.append(normal)
        rows_b.append(float(normal @ touch) - back)
    else:
        converged = not inside_mask().any()

    if not converged:
        warnings.warn("iris_region hit the iteration cap; region may still contain "
                      "obstacle points", RuntimeWarning, stacklevel=2)
    return ConvexRegion(HPolytope(np.asarray(rows_a), np.asarray(rows_b)), seed)
