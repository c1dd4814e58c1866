"""Delay-aware robust tube MPC.

The QP optimizes nominal states and controls of an LTV prediction model with
constraints tightened by a disturbance-invariant zonotope: controls by K Z,
state rows by the support of Z. The initial nominal state may deviate from the
shifted measured state within the tube minus the disturbance accumulated over
the delay; that set is represented exactly through auxiliary generator
coefficients of the tail zonotope sum_{j>=s} A^j W. Convex-region rows are
additionally enforced as discrete exponential CBF constraints
h(x_{k+1}) >= (1 - gamma dt) h(x_k).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import qp
from .sets import ConvexRegion, HPolytope, Zonotope, minkowski_sum, tube_terms


class RiccatiError(RuntimeError):
    pass


class MpcInfeasibleError(RuntimeError):
    pass


@dataclass(eq=False)
class MpcConfig:
    n_steps: int = 10
    dt: float = 0.08
    q: np.ndarray = field(default_factory=lambda: np.diag([20.0, 1.0, 10.0, 1.0, 2.0, 0.05, 0.0]))
    r: np.ndarray = field(default_factory=lambda: np.diag([40.0, 10.0]))
    q_n: np.ndarray | None = None
    t_a: float = 0.02
    gamma_cbf: float = 2.0
    lambda_cbf: float = 2.0
    state_set: HPolytope | None = None
    control_set: HPolytope | None = None

    def __post_init__(self):
        self.q = np.asarray(self.q, dtype=float)
        self.r = np.asarray(self.r, dtype=float)
        if self.q_n is None:
            self.q_n = 5.0 * self.q
        self.q_n = np.asarray(self.q_n, dtype=float)
        if self.n_steps < 2:
            raise ValueError("horizon must have at least 2 steps")
        if self.t_a < 0.0 or self.dt <= 0.0:
            raise ValueError("t_a must be >= 0 and dt > 0")
        if self.gamma_cbf <= 0.0 or self.lambda_cbf <= 0.0:
            raise ValueError("CBF rates must be positive")


def feedback_gain(a, b, q, r, tol: float = 1e-9, max_iter: int = 10000) -> np.ndarray:
    """Discrete LQR gain by Riccati fixed-point iteration; u = K x with
    A + B K Schur stable."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    q = np.asarray(q, dtype=float)
    r = np.asarray(r, dtype=float)
    p = q.copy()
    with np.errstate(over="ignore", invalid="ignore"):
        for _ in range(max_iter):
            btp = b.T @ p
            gain = np.linalg.solve(r + btp @ b, btp @ a)
            p_next = q + a.T @ p @ a - a.T @ p @ b @ gain
            p_next = 0.5 * (p_next + p_next.T)
            if not np.all(np.isfinite(p_next)):
                raise RiccatiError("Riccati iteration diverged")
            if np.max(np.abs(p_next - p)) <= tol:
                p = p_next
                break
            p = p_next
        else:
            raise RiccatiError("Riccati iteration did not converge")
    btp = b.T @ p
    k = -np.linalg.solve(r + btp @ b, btp @ a)
    rho = max(np.abs(np.linalg.eigvals(a + b @ k)))
    if rho >= 1.0:
        raise RiccatiError(f"closed loop not contractive (rho = {rho:.4f})")
    return k


def delay_tail(terms: list[Zonotope], delay_steps: int) -> Zonotope:
    """sum_{j >= delay_steps} A^j W from precomputed tube terms; the point
    zonotope when the delay swallows the whole series."""
    dim = terms[0].dim
    tail = terms[delay_steps:]
    if not tail:
        return Zonotope.origin(dim)
    z = tail[0]
    for t in tail[1:]:
        z = minkowski_sum(z, t)
    return z


@dataclass
class MpcSolution:
    x: np.ndarray   # (N+1, n)
    u: np.ndarray   # (N, m)
    objective: float
    qp_solution: qp.QpSolution


def region_rows_nd(region: ConvexRegion, n_dim: int, coords=(5, 0)):
    """Lift (s, e1)-plane region rows to n-dim state rows a . x <= b."""
    rows = np.zeros((region.polytope.n_rows, n_dim))
    rows[:, coords[0]] = region.polytope.a[:, 0]
    rows[:, coords[1]] = region.polytope.a[:, 1]
    return rows, region.polytope.b.copy()


def tube_mpc_solve(x0, x_ref, mats, cfg: MpcConfig, *,
                   gain: np.ndarray | None = None,
                   tube: Zonotope | None = None,
                   tube_term_list: list[Zonotope] | None = None,
                   delay_steps: int = 0,
                   region: ConvexRegion | None = None,
                   region_coords=(5, 0),
                   qp_tol: float = 1e-7,
                   qp_max_iter: int = 4000,
                   warm_start=None) -> MpcSolution:
    """Solve the delay-aware tube MPC QP.

    `mats` is a list of N discrete (A_k, B_k, d_k) triples; `tube_term_list`
    holds the A^j W terms used to build `tube`, needed for the delay
    tightening of the initial-state set.
    """
    x0 = np.asarray(x0, dtype=float)
    x_ref = np.asarray(x_ref, dtype=float)
    n_steps = cfg.n_steps
    if len(mats) != n_steps:
        raise ValueError("need one (A, B, d) triple per step")
    if x_ref.shape[0] != n_steps + 1:
        raise ValueError("reference must have N+1 rows")
    n = x0.size
    m = mats[0][1].shape[1]

    if tube is not None:
        if tube_term_list is None:
            tube_term_list = [tube] if delay_steps == 0 else None
        if tube_term_list is None:
            raise ValueError("delay tightening needs the tube term list")
        tail = delay_tail(tube_term_list, delay_steps)
        g_tail = tail.generators
        n_eta = g_tail.shape[1]
    else:
        tail = None
        g_tail = np.zeros((n, 0))
        n_eta = 0

    nx = n * (n_steps + 1)
    nu = m * n_steps
    nv = nx + nu + n_eta

    def xi(k):
        return slice(k * n, (k + 1) * n)

    def ui(k):
        return slice(nx + k * m, nx + (k + 1) * m)

    # cost
    p_mat = np.zeros((nv, nv))
    q_vec = np.zeros(nv)
    for k in range(n_steps):
        p_mat[xi(k), xi(k)] = 2.0 * cfg.q
        q_vec[xi(k)] = -2.0 * cfg.q @ x_ref[k]
        p_mat[ui(k), ui(k)] = 2.0 * cfg.r
    p_mat[xi(n_steps), xi(n_steps)] = 2.0 * cfg.q_n
    q_vec[xi(n_steps)] = -2.0 * cfg.q_n @ x_ref[n_steps]
    if n_eta:
        p_mat[nx + nu:, nx + nu:] = 1e-8 * np.eye(n_eta)

    # equalities: dynamics + initial state
    a_eq_rows = []
    b_eq_rows = []
    for k, (ak, bk, dk) in enumerate(mats):
        row = np.zeros((n, nv))
        row[:, xi(k + 1)] = np.eye(n)
        row[:, xi(k)] = -ak
        row[:, ui(k)] = -bk
        a_eq_rows.append(row)
        b_eq_rows.append(np.asarray(dk, dtype=float))
    init = np.zeros((n, nv))
    init[:, xi(0)] = np.eye(n)
    if n_eta:
        init[:, nx + nu:] = g_tail
        b_init = x0 - tail.center
    else:
        b_init = x0.copy()
    a_eq_rows.append(init)
    b_eq_rows.append(b_init)
    a_eq = np.vstack(a_eq_rows)
    b_eq = np.concatenate(b_eq_rows)

    # inequalities
    a_in_rows = []
    b_in_rows = []

    if cfg.control_set is not None:
        ua, ub = cfg.control_set.a, cfg.control_set.b.copy()
        if tube is not None:
            if gain is None:
                raise ValueError("control tightening needs the ancillary gain")
            kz = tube.linear_map(np.asarray(gain, dtype=float))
            ub = ub - np.array([kz.support(row) for row in ua])
        for k in range(n_steps):
            row = np.zeros((ua.shape[0], nv))
            row[:, ui(k)] = ua
            a_in_rows.append(row)
            b_in_rows.append(ub)

    state_rows = []
    if cfg.state_set is not None:
        state_rows.append((cfg.state_set.a, cfg.state_set.b.copy()))
    region_lifted = None
    if region is not None:
        ra, rb = region_rows_nd(region, n, region_coords)
        region_lifted = (ra, rb.copy())
        state_rows.append((ra, rb.copy()))
    for ra, rb in state_rows:
        if tube is not None:
            rb = rb - np.array([tube.support(row) for row in ra])
        for k in range(1, n_steps + 1):
            row = np.zeros((ra.shape[0], nv))
            row[:, xi(k)] = ra
            a_in_rows.append(row)
            b_in_rows.append(rb)

    if region_lifted is not None:
        ra, rb = region_lifted
        if tube is not None:
            rb = rb - np.array([tube.support(row) for row in ra])
        decay = 1.0 - cfg.gamma_cbf * cfg.dt
        for k in range(n_steps):
            # h(x_{k+1}) >= decay h(x_k) with h = b - a.x
            row = np.zeros((ra.shape[0], nv))
            row[:, xi(k + 1)] = ra
            row[:, xi(k)] = -decay * ra
            a_in_rows.append(row)
            b_in_rows.append(rb * (1.0 - decay))

    lb = np.full(nv, -np.inf)
    ub_v = np.full(nv, np.inf)
    if n_eta:
        lb[nx + nu:] = -1.0
        ub_v[nx + nu:] = 1.0

    problem = qp.QpProblem(
        p_mat, q_vec,
        a_ineq=np.vstack(a_in_rows) if a_in_rows else None,
        b_ineq=np.concatenate(b_in_rows) if b_in_rows else None,
        a_eq=a_eq, b_eq=b_eq, lb=lb, ub=ub_v, assume_psd=True)
    sol = qp.solve(problem, tol=qp_tol, max_iter=qp_max_iter, warm_start=warm_start)
    if sol.status == "infeasible":
        raise MpcInfeasibleError("tube MPC constraints infeasible")
    x_traj = sol.x[:nx].reshape(n_steps + 1, n)
    u_traj = sol.x[nx:nx + nu].reshape(n_steps, m)
    ref_const = sum(float(x_ref[k] @ cfg.q @ x_ref[k]) for k in range(n_steps))
    ref_const += float(x_ref[n_steps] @ cfg.q_n @ x_ref[n_steps])
    return MpcSolution(x_traj, u_traj, sol.objective + ref_const, sol)
