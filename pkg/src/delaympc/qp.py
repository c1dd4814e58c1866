"""Dense convex QP solver: ADMM operator splitting with over-relaxation and an
active-set polish step.

Convention: minimize 0.5 x'Px + q'x subject to A_ineq x <= b_ineq,
A_eq x = b_eq and box bounds. Internally everything is folded into
l <= Ax <= u.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.linalg


@dataclass(eq=False)
class QpProblem:
    p: np.ndarray
    q: np.ndarray
    a_ineq: np.ndarray | None = None
    b_ineq: np.ndarray | None = None
    a_eq: np.ndarray | None = None
    b_eq: np.ndarray | None = None
    lb: np.ndarray | None = None
    ub: np.ndarray | None = None
    assume_psd: bool = False  # skip the eigenvalue floor (hot paths that build PSD costs)

    def __post_init__(self):
        self.p = np.atleast_2d(np.asarray(self.p, dtype=float))
        self.q = np.atleast_1d(np.asarray(self.q, dtype=float))
        n = self.q.size
        if self.p.shape != (n, n):
            raise ValueError("P must be n x n")
        self.p = 0.5 * (self.p + self.p.T)
        if not self.assume_psd:
            w, v = np.linalg.eigh(self.p)
            if w.min() < 0.0:
                self.p = (v * np.clip(w, 0.0, None)) @ v.T
                self.p = 0.5 * (self.p + self.p.T)
        for name in ("a_ineq", "a_eq"):
            mat = getattr(self, name)
            if mat is not None:
                mat = np.atleast_2d(np.asarray(mat, dtype=float))
                if mat.shape[1] != n:
                    raise ValueError(f"{name} column count must equal n")
                setattr(self, name, mat)
        if (self.a_ineq is None) != (self.b_ineq is None):
            raise ValueError("a_ineq and b_ineq must come together")
        if (self.a_eq is None) != (self.b_eq is None):
            raise ValueError("a_eq and b_eq must come together")
        if self.b_ineq is not None:
            self.b_ineq = np.atleast_1d(np.asarray(self.b_ineq, dtype=float))
            if self.b_ineq.size != self.a_ineq.shape[0]:
                raise ValueError("b_ineq length mismatch")
        if self.b_eq is not None:
            self.b_eq = np.atleast_1d(np.asarray(self.b_eq, dtype=float))
            if self.b_eq.size != self.a_eq.shape[0]:
                raise ValueError("b_eq length mismatch")
        for name in ("lb", "ub"):
            bnd = getattr(self, name)
            if bnd is not None:
                bnd = np.atleast_1d(np.asarray(bnd, dtype=float))
                if bnd.size != n:
                    raise ValueError(f"{name} length must equal n")
                setattr(self, name, bnd)

    @property
    def n(self) -> int:
        return self.q.size

    def canonical(self):
        """Stack everything as l <= Ax <= u."""
        n = self.n
        rows, lo, hi = [], [], []
        if self.a_ineq is not None:
            rows.append(self.a_ineq)
            lo.append(np.full(self.a_ineq.shape[0], -np.inf))
            hi.append(self.b_ineq)
        if self.a_eq is not None:
            rows.append(self.a_eq)
            lo.append(self.b_eq)
            hi.append(self.b_eq)
        if self.lb is not None or self.ub is not None:
            lb = self.lb if self.lb is not None else np.full(n, -np.inf)
            ub = self.ub if self.ub is not None else np.full(n, np.inf)
            bounded = np.isfinite(lb) | np.isfinite(ub)
            if bounded.any():
                rows.append(np.eye(n)[bounded])
                lo.append(lb[bounded])
                hi.append(ub[bounded])
        if not rows:
            return np.zeros((0, n)), np.zeros(0), np.zeros(0)
        return np.vstack(rows), np.concatenate(lo), np.concatenate(hi)


@dataclass
class QpSolution:
    x: np.ndarray
    objective: float
    status: str  # optimal | infeasible | max_iter
    kkt_residual: float
    y: np.ndarray = field(default_factory=lambda: np.zeros(0))
    iterations: int = 0


def _kkt_residuals(p, q, a, lo, hi, x, y):
    ax = a @ x if a.size else np.zeros(0)
    stat = np.max(np.abs(p @ x + q + (a.T @ y if a.size else 0.0)))
    if ax.size:
        prim = float(np.max(np.maximum(ax - hi, 0.0) + np.maximum(lo - ax, 0.0)))
        gap_hi = np.where(np.isfinite(hi), np.abs(hi - ax), np.inf)
        gap_lo = np.where(np.isfinite(lo), np.abs(ax - lo), np.inf)
        comp_arr = np.zeros_like(y)
        pos = y > 0
        neg = y < 0
        comp_arr[pos] = y[pos] * gap_hi[pos]
        comp_arr[neg] = -y[neg] * gap_lo[neg]
        comp = float(np.max(comp_arr)) if comp_arr.size else 0.0
    else:
        prim, comp = 0.0, 0.0
    return float(stat), prim, comp


def _polish(p, q, a, lo, hi, x, y, act_tol):
    ax = a @ x
    low_act = np.isfinite(lo) & ((y < -act_tol) | (np.abs(ax - lo) < act_tol))
    up_act = np.isfinite(hi) & ((y > act_tol) | (np.abs(ax - hi) < act_tol))
    eq = low_act & up_act  # equality rows activate on both sides
    low_act = low_act & ~eq
    up_act = up_act & ~eq
    a_act = np.vstack([a[eq], a[low_act], a[up_act]])
    b_act = np.concatenate([hi[eq], lo[low_act], hi[up_act]])
    n, m = p.shape[0], a_act.shape[0]
    if m == 0:
        try:
            x_new = np.linalg.solve(p + 1e-12 * np.eye(n), -q)
        except np.linalg.LinAlgError:
            return None
        return x_new, np.zeros_like(y)
    kkt = np.block([[p, a_act.T], [a_act, np.zeros((m, m))]])
    rhs = np.concatenate([-q, b_act])
    try:
        sol = np.linalg.solve(kkt + 1e-12 * np.eye(n + m), rhs)
        # one step of iterative refinement
        sol += np.linalg.solve(kkt + 1e-12 * np.eye(n + m), rhs - kkt @ sol)
    except np.linalg.LinAlgError:
        return None
    x_new = sol[:n]
    lam = sol[n:]
    y_new = np.zeros_like(y)
    idx = np.where(eq)[0]
    y_new[idx] = lam[: idx.size]
    off = idx.size
    idx = np.where(low_act)[0]
    y_new[idx] = np.minimum(lam[off: off + idx.size], 0.0)
    off += idx.size
    idx = np.where(up_act)[0]
    y_new[idx] = np.maximum(lam[off: off + idx.size], 0.0)
    return x_new, y_new


def solve(problem: QpProblem, tol: float = 1e-6, max_iter: int = 4000,
          warm_start: tuple[np.ndarray, np.ndarray] | None = None) -> QpSolution:
    """Operator-splitting solve with over-relaxation, rho adaptation and polish.

    Deterministic for identical inputs. status is 'optimal' with KKT residuals
    <= tol, 'infeasible' on a primal infeasibility certificate, 'max_iter'
    otherwise (best iterate returned).
    """
    p, q = problem.p, problem.q
    n = problem.n
    a, lo, hi = problem.canonical()
    m = a.shape[0]

    if m == 0:
        x = np.linalg.lstsq(p + 1e-12 * np.eye(n), -q, rcond=None)[0]
        stat = float(np.max(np.abs(p @ x + q)))
        status = "optimal" if stat <= tol else "max_iter"
        return QpSolution(x, float(0.5 * x @ p @ x + q @ x), status, stat, np.zeros(0), 0)

    sigma = 1e-6
    alpha = 1.6
    rho0 = 0.1
    is_eq = np.isfinite(lo) & np.isfinite(hi) & (hi - lo < 1e-12)
    rho = np.where(is_eq, rho0 * 1e3, rho0)

    def factor(rho_vec):
        kkt = np.block([[p + sigma * np.eye(n), a.T], [a, -np.diag(1.0 / rho_vec)]])
        return scipy.linalg.lu_factor(kkt)

    lu = factor(rho)

    if warm_start is not None:
        x = np.array(warm_start[0], dtype=float)
        y = np.array(warm_start[1], dtype=float) if warm_start[1] is not None else np.zeros(m)
        if y.size != m:
            y = np.zeros(m)
    else:
        x = np.zeros(n)
        y = np.zeros(m)
    z = np.clip(a @ x, lo, hi)

    best = None
    status = "max_iter"
    it = 0
    check_every = 25
    n_refactor = 0
    y_prev_check = y.copy()

    for it in range(1, max_iter + 1):
        rhs = np.concatenate([sigma * x - q, z - y / rho])
        sol = scipy.linalg.lu_solve(lu, rhs)
        x_t, nu = sol[:n], sol[n:]
        z_t = z + (nu - y) / rho
        x = alpha * x_t + (1.0 - alpha) * x
        z_relax = alpha * z_t + (1.0 - alpha) * z
        z_new = np.clip(z_relax + y / rho, lo, hi)
        y = y + rho * (z_relax - z_new)
        z = z_new

        if it % check_every == 0 or it == max_iter:
            ax = a @ x
            r_prim = np.max(np.abs(ax - z)) if m else 0.0
            r_dual = np.max(np.abs(p @ x + q + a.T @ y))
            eps_prim = tol + tol * max(np.max(np.abs(ax)), np.max(np.abs(z)), 1.0)
            eps_dual = tol + tol * max(np.max(np.abs(p @ x)), np.max(np.abs(q)),
                                       np.max(np.abs(a.T @ y)), 1.0)
            if r_prim <= eps_prim and r_dual <= eps_dual:
                status = "optimal"
                break

            dy = y - y_prev_check
            y_prev_check = y.copy()
            dy_norm = np.max(np.abs(dy)) if m else 0.0
            if dy_norm > 1e-12:
                eps_inf = 1e-5 * dy_norm
                at_dy = np.max(np.abs(a.T @ dy))
                up_ok = np.all(dy[~np.isfinite(hi)] <= eps_inf) if (~np.isfinite(hi)).any() else True
                lo_ok = np.all(dy[~np.isfinite(lo)] >= -eps_inf) if (~np.isfinite(lo)).any() else True
                if at_dy <= eps_inf and up_ok and lo_ok:
                    gap = (np.sum(hi[np.isfinite(hi)] * np.maximum(dy[np.isfinite(hi)], 0.0))
                           + np.sum(lo[np.isfinite(lo)] * np.minimum(dy[np.isfinite(lo)], 0.0)))
                    if gap <= -eps_inf:
                        status = "infeasible"
                        break

            # rho adaptation (bounded number of refactorizations)
            if n_refactor < 4 and it % 200 == 0 and r_dual > 1e-16:
                ratio = np.sqrt((r_prim / max(eps_prim, 1e-16))
                                / max(r_dual / max(eps_dual, 1e-16), 1e-16))
                ratio = float(np.clip(ratio, 1e-3, 1e3))
                if ratio > 5.0 or ratio < 0.2:
                    rho = np.clip(rho * ratio, 1e-6, 1e6)
                    lu = factor(rho)
                    n_refactor += 1

    if status == "infeasible":
        return QpSolution(x, float(0.5 * x @ p @ x + q @ x), "infeasible",
                          np.inf, y, it)

    stat, prim, comp = _kkt_residuals(p, q, a, lo, hi, x, y)
    kkt_res = max(stat, prim, comp)
    polished = _polish(p, q, a, lo, hi, x, y, act_tol=max(10 * tol, 1e-5))
    if polished is not None:
        x_p, y_p = polished
        stat_p, prim_p, comp_p = _kkt_residuals(p, q, a, lo, hi, x_p, y_p)
        kkt_p = max(stat_p, prim_p, comp_p)
        if np.isfinite(kkt_p) and kkt_p < kkt_res:
            x, y, kkt_res = x_p, y_p, kkt_p
    if kkt_res <= tol:
        status = "optimal"
    return QpSolution(x, float(0.5 * x @ p @ x + q @ x), status, float(kkt_res), y, it)
