"""Adaptive scalar Kalman filter for computation-time estimation.

The process model x_n = gamma * x_{n-1} + nu, the process noise variance q and
the measurement noise variance r are all treated as unknown: q and r come from
windowed residual statistics (innovation variance for r, posterior increments
corrected by the variance propagation for q), gamma from a forgetting-factor
recursive least squares fit on consecutive observations. The published upper
bound adds beta times the predicted variance to the predicted mean; a config
switch offers beta times the standard deviation instead.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field


@dataclass(frozen=True)
class FilterConfig:
    n_q: int = 20            # window for process-noise estimation
    n_r: int = 20            # window for measurement-noise estimation
    lambda_f: float = 0.995  # RLS forgetting factor
    learning_scale: float = 20.0  # initial RLS covariance, the learning-rate knob
    beta: float = 2.0        # confidence multiplier for the upper bound
    x0: float = 0.05
    p0: float = 1e-2
    q0: float = 1e-4
    r0: float = 1e-4
    gamma0: float = 1.0
    r_min: float = 1e-8
    q_min: float = 1e-8
    p_min: float = 1e-12
    gamma_clip: tuple = (0.0, 2.0)
    bound_uses_stddev: bool = False

    def __post_init__(self):
        if self.n_q < 2 or self.n_r < 2:
            raise ValueError("windows must hold at least 2 samples")
        if not (0.0 < self.lambda_f <= 1.0):
            raise ValueError("forgetting factor must be in (0, 1]")
        if self.learning_scale <= 0.0 or self.beta < 0.0:
            raise ValueError("learning scale must be > 0 and beta >= 0")


@dataclass
class FilterState:
    x: float
    p: float
    gamma: float
    q: float
    r: float
    rls_cov: float
    innovations: deque = field(default_factory=deque)   # (e, p_pred) pairs
    increments: deque = field(default_factory=deque)    # (d, p, p_prev) triples
    t_prev: float | None = None                         # previous observation
    n: int = 0


@dataclass
class FilterRecord:
    t_obs: float
    x_pred: float
    p_pred: float
    bound: float


class InfluenceFilter:
    """Single-owner filter: `update` once per control cycle with the observed
    computation time; `upper_bound` before the next solve."""

    def __init__(self, cfg: FilterConfig | None = None):
        self.cfg = cfg or FilterConfig()
        c = self.cfg
        self.state = FilterState(
            x=c.x0, p=c.p0, gamma=c.gamma0, q=c.q0, r=c.r0,
            rls_cov=c.learning_scale,
            innovations=deque(maxlen=c.n_r),
            increments=deque(maxlen=c.n_q),
        )
        self.history: list[FilterRecord] = []

    def predict(self) -> tuple[float, float]:
        st = self.state
        return st.gamma * st.x, st.gamma ** 2 * st.p + st.q

    def upper_bound(self) -> float:
        x_pred, p_pred = self.predict()
        if self.cfg.bound_uses_stddev:
            return x_pred + self.cfg.beta * p_pred ** 0.5
        return x_pred + self.cfg.beta * p_pred

    def update(self, t_obs: float) -> FilterState:
        if t_obs < 0.0:
            raise ValueError("computation time observation must be nonnegative")
        cfg = self.cfg
        st = self.state
        x_pred, p_pred = self.predict()
        self.history.append(FilterRecord(t_obs, x_pred, p_pred, self.upper_bound()))

        # Kalman correction
        e = t_obs - x_pred
        gain = p_pred / (p_pred + st.r)
        x_prev, p_prev = st.x, st.p
        st.x = x_pred + gain * e
        st.p = max((1.0 - gain) * p_pred, cfg.p_min)

        # windowed noise adaptation with the current model coefficient;
        # sample variances are centered so a biased residual run reads as
        # state error, not measurement noise
        st.innovations.append((e, p_pred))
        n_r = len(st.innovations)
        e_bar = sum(ej for ej, _ in st.innovations) / n_r
        r_hat = sum((ej - e_bar) ** 2 - pj for ej, pj in st.innovations) / n_r
        st.r = max(r_hat, cfg.r_min)

        d = st.x - st.gamma * x_prev
        st.increments.append((d, st.p, p_prev))
        n_q = len(st.increments)
        d_bar = sum(dj for dj, _, _ in st.increments) / n_q
        q_hat = sum((dj - d_bar) ** 2 + pj - st.gamma ** 2 * pp
                    for dj, pj, pp in st.increments) / n_q
        st.q = max(q_hat, cfg.q_min)

        # forgetting-factor RLS on gamma over consecutive observed times
        # (regressing on the filter's own output can deadlock after a bad
        # initialization; the raw signal carries the model information)
        if st.t_prev is not None:
            reg = st.t_prev
            denom = cfg.lambda_f + reg * st.rls_cov * reg
            k_g = st.rls_cov * reg / denom
            st.gamma = st.gamma + k_g * (t_obs - st.gamma * reg)
            st.gamma = min(max(st.gamma, cfg.gamma_clip[0]), cfg.gamma_clip[1])
            st.rls_cov = (st.rls_cov - k_g * reg * st.rls_cov) / cfg.lambda_f
        st.t_prev = t_obs

        st.n += 1
        return st

    def coverage(self, burn_in: int = 0) -> float:
        """Fraction of recorded steps with t_obs <= bound after burn-in."""
        rec = self.history[burn_in:]
        if not rec:
            return float("nan")
        return sum(1 for r in rec if r.t_obs <= r.bound) / len(rec)
