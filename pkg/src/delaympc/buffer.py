"""Time-indexed command buffer shared between the slow MPC cycle and the fast
pre-compensator, plus the initial-state shift that integrates the nominal model
through the buffered commands.

Slices are half-open [t_start, t_end): reading exactly at a boundary returns
the next slice. A write landing before the read cursor signals an
underestimated delay and is refused.
"""

from __future__ import annotations

import bisect
from dataclasses import dataclass, field

import numpy as np

from .vehicle import Control, VehicleParams, VehicleState, step


class BufferGapError(RuntimeError):
    """Requested time is not covered by any slice."""


class BufferWritePastError(RuntimeError):
    """Write start lies behind the read cursor (delay underestimated)."""


@dataclass
class BufferSlice:
    t_start: float
    t_end: float
    x_nom: np.ndarray  # (7,)
    u_nom: np.ndarray  # (2,)


@dataclass
class CommandBuffer:
    slices: list = field(default_factory=list)
    read_cursor: float = -np.inf
    write_head: float = -np.inf
    last_command: Control | None = None

    def _starts(self):
        return [sl.t_start for sl in self.slices]

    def slice_at(self, t: float) -> BufferSlice | None:
        """Covering slice without touching the read cursor."""
        if not self.slices:
            return None
        i = bisect.bisect_right(self._starts(), t + 1e-12) - 1
        if i < 0:
            return None
        sl = self.slices[i]
        return sl if t < sl.t_end - 1e-12 else None

    def read(self, t: float) -> BufferSlice | None:
        self.read_cursor = max(self.read_cursor, t)
        return self.slice_at(t)

    def covers(self, t0: float, t1: float) -> bool:
        """True when [t0, t1] is contiguously covered."""
        t = t0
        guard = 0
        while t < t1 - 1e-12:
            sl = self.slice_at(t)
            if sl is None:
                return False
            t = sl.t_end
            guard += 1
            if guard > 100000:
                return False
        return True


def update_buffer(buf: CommandBuffer, t_cycle_start: float, t_c_hat: float,
                  x_nom, u_nom, dt: float) -> None:
    """Atomically replace buffer content on [t + t_c_hat, t + t_c_hat + N dt].

    `x_nom` has N+1 rows (slice k stores the state at its start), `u_nom` N
    rows. Earlier slices are only trimmed, never altered.
    """
    x_nom = np.asarray(x_nom, dtype=float)
    u_nom = np.asarray(u_nom, dtype=float)
    n = len(u_nom)
    if len(x_nom) not in (n, n + 1):
        raise ValueError("x_nom must have N or N+1 rows for N controls")
    w0 = t_cycle_start + t_c_hat
    if w0 < buf.read_cursor - 1e-12:
        raise BufferWritePastError(
            f"write start {w0:.4f} behind read cursor {buf.read_cursor:.4f}")
    w1 = w0 + n * dt

    kept = []
    for sl in buf.slices:
        if sl.t_end <= w0 + 1e-12:
            kept.append(sl)
        elif sl.t_start < w0 - 1e-12:
            kept.append(BufferSlice(sl.t_start, w0, sl.x_nom, sl.u_nom))
        elif sl.t_start >= w1 - 1e-12:
            kept.append(sl)
        elif sl.t_end > w1 + 1e-12:
            kept.append(BufferSlice(w1, sl.t_end, sl.x_nom, sl.u_nom))
    for k in range(n):
        kept.append(BufferSlice(w0 + k * dt, w0 + (k + 1) * dt,
                                np.array(x_nom[k], dtype=float),
                                np.array(u_nom[k], dtype=float)))
    kept.sort(key=lambda sl: sl.t_start)
    buf.slices = kept
    buf.write_head = max(buf.write_head, w1)


def ancillary_control(buf: CommandBuffer, t_now: float, x_obs: VehicleState,
                      k_gain: np.ndarray, params: VehicleParams):
    """u = u_nom + K (x - x_nom), clamped to the actuation limits.

    On a buffer gap the previously issued command is held and the underrun
    flag raised.
    """
    sl = buf.read(t_now)
    if sl is None:
        held = buf.last_command if buf.last_command is not None else Control(0.0, 0.0)
        return held, True
    dev = x_obs.as_array() - sl.x_nom
    u = sl.u_nom + np.asarray(k_gain, dtype=float) @ dev
    cmd = Control(float(u[0]), float(u[1])).clamp(params)
    buf.last_command = cmd
    return cmd, False


def shift_initial_state(buf: CommandBuffer, x_now: VehicleState, t_now: float,
                        t_d_hat: float, params: VehicleParams, curvature,
                        dt_sub: float = 1e-3) -> VehicleState:
    """Integrate the nominal model forward t_d_hat seconds from x_now, applying
    the buffered nominal commands with zero disturbance."""
    if t_d_hat < 0.0:
        raise ValueError("t_d_hat must be nonnegative")
    if t_d_hat == 0.0:
        return VehicleState.from_array(x_now.as_array())
    t_end = t_now + t_d_hat
    if not buf.covers(t_now, t_end):
        raise BufferGapError(f"buffer does not cover [{t_now:.4f}, {t_end:.4f}]")
    x = x_now
    t = t_now
    while t < t_end - 1e-12:
        sl = buf.slice_at(t)
        span = min(sl.t_end, t_end) - t
        u = Control(float(sl.u_nom[0]), float(sl.u_nom[1]))
        n_sub = max(1, int(round(span / dt_sub)))
        h = span / n_sub
        for _ in range(n_sub):
            x = step(x, u, params, h, w=None, curvature=curvature)
        t += span
    return x
