"""Synthetic computation-delay processes for controlled filter evaluation.

Kinds: constant, gaussian_ar1 (mean-reverting with optional spikes), and
measured_wallclock which defers to the harness's measured solve times.
Samples are truncated at zero.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

KINDS = ("constant", "gaussian_ar1", "measured_wallclock")


@dataclass(frozen=True)
class DelayProcess:
    kind: str = "constant"
    mean: float = 0.05
    persistence: float = 0.0
    noise_std: float = 0.0
    spike_prob: float = 0.0
    spike_magnitude: float = 0.0
    start: float = 0.0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown delay kind {self.kind!r}")
        if self.mean < 0.0 or self.noise_std < 0.0:
            raise ValueError("mean and noise_std must be nonnegative")
        if not (0.0 <= self.spike_prob <= 1.0):
            raise ValueError("spike_prob must be a probability")
        if not (-1.0 < self.persistence < 1.0):
            raise ValueError("persistence must lie in (-1, 1)")


class DelaySampler:
    """Stateful sampler; deterministic given the rng seed."""

    def __init__(self, proc: DelayProcess, rng: np.random.Generator):
        self.proc = proc
        self.rng = rng
        self.prev = proc.start if proc.kind == "gaussian_ar1" else proc.mean
        self.n = 0

    def sample(self) -> float:
        p = self.proc
        if p.kind == "constant":
            value = p.mean
        elif p.kind == "gaussian_ar1":
            value = p.mean + p.persistence * (self.prev - p.mean)
            if p.noise_std > 0.0:
                value += p.noise_std * self.rng.standard_normal()
            value = max(value, 0.0)
            self.prev = value
            # spikes are transient outliers; they do not feed the recursion
            if p.spike_prob > 0.0 and self.rng.random() < p.spike_prob:
                value = max(value + p.spike_magnitude, 0.0)
        else:
            raise RuntimeError("measured_wallclock delays are produced by the harness")
        self.n += 1
        return float(value)


def delay_sample(proc: DelayProcess, prev: float, rng: np.random.Generator) -> float:
    """One next sample given the previous value (functional form of the
    sampler's recursion)."""
    sampler = DelaySampler(proc, rng)
    sampler.prev = prev
    return sampler.sample()


def sample_sequence(proc: DelayProcess, n: int, rng: np.random.Generator) -> np.ndarray:
    sampler = DelaySampler(proc, rng)
    return np.array([sampler.sample() for _ in range(n)])
