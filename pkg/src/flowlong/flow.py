"""Rectified-flow primitives: interpolant, posterior estimates, Euler steps.

Time runs from t = 1 (pure noise) to t = 0 (clean data) along the straight
interpolant x_t = (1 - t) x0 + t x1. All operations are elementwise over
float64 arrays of shape (..., F, d); leading axes broadcast, so a batch of
chunks is handled by the same code as a single chunk.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

# A chunk is a plain (..., F, d) float array; no wrapper type is needed.
Chunk = np.ndarray


def _check_time(t: float, name: str = "t") -> None:
    if not 0.0 <= t <= 1.0:
        raise ValueError(f"{name} = {t} outside [0, 1]")


def _check_shapes(a: np.ndarray, b: np.ndarray) -> None:
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")


def interpolant(x0: Chunk, x1: Chunk, t: float) -> Chunk:
    """Straight-line interpolant (1 - t) x0 + t x1."""
    _check_shapes(x0, x1)
    _check_time(t)
    return (1.0 - t) * x0 + t * x1


def denoised_estimate(x_t: Chunk, v: Chunk, t: float) -> Chunk:
    """Posterior mean of the clean sample: x0_hat = x_t - t v."""
    _check_shapes(x_t, v)
    _check_time(t)
    return x_t - t * v


def noisy_estimate(x_t: Chunk, v: Chunk, t: float) -> Chunk:
    """Posterior mean of the noise sample: x1_hat = x_t + (1 - t) v."""
    _check_shapes(x_t, v)
    _check_time(t)
    return x_t + (1.0 - t) * v


def euler_step(x_t: Chunk, v: Chunk, t: float, s: float) -> Chunk:
    """One Euler step of the sampling ODE from time t down to s < t."""
    _check_shapes(x_t, v)
    _check_time(t)
    _check_time(s, "s")
    if s >= t:
        raise ValueError(f"step must go backward in time: s = {s} >= t = {t}")
    return x_t + (s - t) * v


@dataclass(frozen=True)
class ChunkEstimates:
    """Denoised and noisy posterior estimates of one chunk at time t.

    Whenever t > 0 the two are linked by x1_hat = (x_t - (1 - t) x0_hat) / t,
    so (1 - t) x0_hat + t x1_hat reconstructs x_t.
    """

    x0_hat: Chunk
    x1_hat: Chunk
    t: float

    def __post_init__(self) -> None:
        _check_shapes(self.x0_hat, self.x1_hat)
        _check_time(self.t)

    @classmethod
    def from_velocity(cls, x_t: Chunk, v: Chunk, t: float) -> "ChunkEstimates":
        return cls(
            x0_hat=denoised_estimate(x_t, v, t),
            x1_hat=noisy_estimate(x_t, v, t),
            t=t,
        )

    def reconstruct(self) -> Chunk:
        """Recombine the estimates into the state they were formed from."""
        return (1.0 - self.t) * self.x0_hat + self.t * self.x1_hat


def interp_step(est: ChunkEstimates, s: float) -> Chunk:
    """Euler step written as an interpolation of the two estimates.

    Algebraically identical to euler_step: (1 - s) x0_hat + s x1_hat.
    """
    _check_time(s, "s")
    if s >= est.t:
        raise ValueError(f"step must go backward in time: s = {s} >= t = {est.t}")
    return (1.0 - s) * est.x0_hat + s * est.x1_hat


@dataclass(frozen=True)
class Condition:
    """A conditioning vector, either shared globally or specific to one chunk."""

    vector: np.ndarray
    role: str = "per_chunk"

    def __post_init__(self) -> None:
        if self.role not in ("global", "per_chunk"):
            raise ValueError(f"unknown condition role: {self.role!r}")
        vec = np.asarray(self.vector, dtype=float)
        if not np.all(np.isfinite(vec)):
            raise ValueError("condition vector must be finite")
        object.__setattr__(self, "vector", vec)
