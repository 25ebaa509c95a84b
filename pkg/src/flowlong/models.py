"""Analytic conditional velocity fields with closed-form posterior means.

Each backend defines a synthetic clean-data law whose exact flow-matching
velocity is available in closed form, standing in for a trained network at
desk scale:

  * GaussianVelocityModel: frames i.i.d. N(mu(c), Sigma).
  * GaussianProcessVelocityModel: an AR(1)-style stationary Gaussian process
    over frames with kernel rho^|delta|, so every length-F window shares one
    chunk marginal.
  * MixtureVelocityModel: a Gaussian mixture, exercising multimodal
    trajectory divergence.

For a clean sample x0 with per-row covariance Sigma and noise x1 ~ N(0, I),
the joint law of (x0, x_t) under x_t = (1 - t) x0 + t x1 gives

    E[x0 | x_t] = mu + (1 - t) Sigma M_t^{-1} (x_t - (1 - t) mu)
    E[x1 | x_t] =            t       M_t^{-1} (x_t - (1 - t) mu)

with M_t = (1 - t)^2 Sigma + t^2 I, which is positive definite for every
t in [0, 1]. The velocity is the difference of the two conditional means,
which stays finite at t = 0 where the ratio form (x_t - x0_hat) / t would
be singular. Conditioning acts as an affine mean shift mu(c) = mu + B c.

All operations broadcast over leading axes and are deterministic, so models
may be evaluated concurrently on distinct chunks.
"""

from __future__ import annotations

from abc import ABC, abstractmethod

import numpy as np

from .flow import Chunk, ChunkEstimates


def _as_cov(sigma, d: int) -> np.ndarray:
    """Accept a scalar, a diagonal, or a full matrix; return (d, d) SPD."""
    arr = np.asarray(sigma, dtype=float)
    if arr.ndim == 0:
        cov = np.eye(d) * float(arr)
    elif arr.ndim == 1:
        if arr.shape[0] != d:
            raise ValueError(f"diagonal covariance length {arr.shape[0]} != d = {d}")
        cov = np.diag(arr)
    elif arr.ndim == 2:
        if arr.shape != (d, d):
            raise ValueError(f"covariance shape {arr.shape} != ({d}, {d})")
        cov = 0.5 * (arr + arr.T)
    else:
        raise ValueError("covariance must be scalar, diagonal, or matrix")
    if np.linalg.eigvalsh(cov).min() <= 0:
        raise ValueError("covariance is not positive definite")
    return cov


class _EigPosterior:
    """Shared eigendecomposition machinery for one Gaussian block.

    Holds Sigma = Q diag(lam) Q^T once; per-time coefficients are formed on
    the eigenvalues, so each evaluation is two small matmuls.
    """

    def __init__(self, mean: np.ndarray, cov: np.ndarray):
        self.mean = np.asarray(mean, dtype=float)
        self.cov = cov
        self.lam, self.q = np.linalg.eigh(cov)
        if self.lam.min() <= 0:
            raise ValueError("covariance is not positive definite")

    def _den(self, t: float) -> np.ndarray:
        return (1.0 - t) ** 2 * self.lam + t * t

    def posterior_mean(self, x: np.ndarray, t: float, mean: np.ndarray) -> np.ndarray:
        coef = (1.0 - t) * self.lam / self._den(t)
        y = (x - (1.0 - t) * mean) @ self.q
        return mean + (y * coef) @ self.q.T

    def noise_mean(self, x: np.ndarray, t: float, mean: np.ndarray) -> np.ndarray:
        coef = t / self._den(t)
        y = (x - (1.0 - t) * mean) @ self.q
        return (y * coef) @ self.q.T

    def log_marginal(self, x: np.ndarray, t: float, mean: np.ndarray) -> np.ndarray:
        """log N(x; (1 - t) mean, (1 - t)^2 Sigma + t^2 I) over the last axis."""
        den = self._den(t)
        y = (x - (1.0 - t) * mean) @ self.q
        maha = np.sum(y * y / den, axis=-1)
        logdet = np.sum(np.log(den))
        dim = self.lam.shape[0]
        return -0.5 * (dim * np.log(2.0 * np.pi) + logdet + maha)


class VelocityModel(ABC):
    """Conditional velocity field v(x_t, t, c) over (..., F, d) chunks.

    Implementations expose the denoised posterior mean directly so tests can
    target it without round-tripping through the velocity.
    """

    @property
    @abstractmethod
    def dim(self) -> int:
        """Latent dimension d."""

    @property
    def frames(self) -> int | None:
        """Required chunk length, or None when any length is accepted."""
        return None

    @abstractmethod
    def posterior_mean(self, x: Chunk, t: float, cond=None) -> Chunk:
        """E[x0 | x_t] under this backend's data law."""

    @abstractmethod
    def noise_mean(self, x: Chunk, t: float, cond=None) -> Chunk:
        """E[x1 | x_t] under this backend's data law."""

    def velocity(self, x: Chunk, t: float, cond=None) -> Chunk:
        """Exact marginal velocity, finite on all of t in [0, 1]."""
        return self.noise_mean(x, t, cond) - self.posterior_mean(x, t, cond)

    def estimates(self, x: Chunk, t: float, cond=None) -> ChunkEstimates:
        return ChunkEstimates(
            x0_hat=self.posterior_mean(x, t, cond),
            x1_hat=self.noise_mean(x, t, cond),
            t=t,
        )

    def _check_input(self, x: Chunk) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        if x.shape[-1] != self.dim:
            raise ValueError(f"latent dimension {x.shape[-1]} != {self.dim}")
        if self.frames is not None and x.shape[-2] != self.frames:
            raise ValueError(f"chunk length {x.shape[-2]} != {self.frames}")
        return x

    def _shift(self, cond) -> np.ndarray:
        """Affine mean shift B c for the effective condition vector."""
        B = getattr(self, "conditioning", None)
        if cond is None:
            return np.zeros(self.dim)
        if B is None:
            raise ValueError("model has no conditioning matrix but got a condition")
        c = np.asarray(cond, dtype=float)
        if c.shape != (B.shape[1],):
            raise ValueError(
                f"condition length {c.shape} incompatible with matrix {B.shape}"
            )
        return B @ c


class GaussianVelocityModel(VelocityModel):
    """Frames i.i.d. Gaussian: x0 row ~ N(mu + B c, Sigma), x1 row ~ N(0, I)."""

    def __init__(self, mu, sigma=1.0, conditioning=None):
        mu = np.atleast_1d(np.asarray(mu, dtype=float))
        self._d = mu.shape[0]
        self.mu = mu
        self.sigma = _as_cov(sigma, self._d)
        self.conditioning = (
            None if conditioning is None else np.asarray(conditioning, dtype=float)
        )
        if self.conditioning is not None and self.conditioning.shape[0] != self._d:
            raise ValueError("conditioning matrix must have d rows")
        self._post = _EigPosterior(mu, self.sigma)

    @property
    def dim(self) -> int:
        return self._d

    def target_mean(self, cond=None) -> np.ndarray:
        return self.mu + self._shift(cond)

    def target_cov(self) -> np.ndarray:
        return self.sigma

    def posterior_mean(self, x: Chunk, t: float, cond=None) -> Chunk:
        x = self._check_input(x)
        return self._post.posterior_mean(x, t, self.target_mean(cond))

    def noise_mean(self, x: Chunk, t: float, cond=None) -> Chunk:
        x = self._check_input(x)
        return self._post.noise_mean(x, t, self.target_mean(cond))


class GaussianProcessVelocityModel(VelocityModel):
    """Stationary Gaussian process over frames with kernel rho^|delta|.

    The clean law over a chunk is the F*d Gaussian with mean tile(mu + B c)
    and covariance kron(T, Sigma), T[a, b] = rho^|a - b|. Stationarity makes
    every chunk see the same marginal, which is what lets one pretrained
    window model serve all chunk positions.
    """

    def __init__(self, frames: int, rho: float, mu, sigma=1.0, conditioning=None):
        if not -1.0 < rho < 1.0:
            raise ValueError("|rho| must be < 1")
        mu = np.atleast_1d(np.asarray(mu, dtype=float))
        self._d = mu.shape[0]
        self._frames = int(frames)
        self.rho = float(rho)
        self.mu = mu
        self.sigma = _as_cov(sigma, self._d)
        self.conditioning = (
            None if conditioning is None else np.asarray(conditioning, dtype=float)
        )
        if self.conditioning is not None and self.conditioning.shape[0] != self._d:
            raise ValueError("conditioning matrix must have d rows")
        cov = np.kron(self.frame_kernel(self._frames), self.sigma)
        self._post = _EigPosterior(np.tile(mu, self._frames), cov)

    @property
    def dim(self) -> int:
        return self._d

    @property
    def frames(self) -> int:
        return self._frames

    def frame_kernel(self, n: int) -> np.ndarray:
        idx = np.arange(n)
        return self.rho ** np.abs(idx[:, None] - idx[None, :])

    def target_mean(self, cond=None) -> np.ndarray:
        """Per-frame mean; the condition shifts every frame identically."""
        return self.mu + self._shift(cond)

    def chunk_mean(self, cond=None) -> np.ndarray:
        return np.tile(self.target_mean(cond), self._frames)

    def chunk_cov(self) -> np.ndarray:
        return self._post.cov

    def sample_sequence(
        self, n_frames: int, size: int, rng: np.random.Generator, cond=None
    ) -> np.ndarray:
        """Exact draws (size, n_frames, d) from the true process law."""
        cov = np.kron(self.frame_kernel(n_frames), self.sigma)
        chol = np.linalg.cholesky(cov)
        z = rng.standard_normal((size, n_frames * self._d))
        flat = z @ chol.T + np.tile(self.target_mean(cond), n_frames)
        return flat.reshape(size, n_frames, self._d)

    def _stacked(self, x: Chunk) -> np.ndarray:
        x = self._check_input(x)
        return x.reshape(x.shape[:-2] + (self._frames * self._d,))

    def posterior_mean(self, x: Chunk, t: float, cond=None) -> Chunk:
        shape = np.asarray(x).shape
        flat = self._post.posterior_mean(self._stacked(x), t, self.chunk_mean(cond))
        return flat.reshape(shape)

    def noise_mean(self, x: Chunk, t: float, cond=None) -> Chunk:
        shape = np.asarray(x).shape
        flat = self._post.noise_mean(self._stacked(x), t, self.chunk_mean(cond))
        return flat.reshape(shape)


class MixtureVelocityModel(VelocityModel):
    """Gaussian mixture target: x0 row ~ sum_i w_i N(mu_i + B c, Sigma_i).

    The posterior mean is the responsibility-weighted combination of the
    per-component Gaussian posterior means, with responsibilities

        r_i(x_t, t) propto w_i N(x_t; (1 - t) mu_i, (1 - t)^2 Sigma_i + t^2 I)

    normalized in the log domain to avoid underflow far from the modes.
    """

    def __init__(self, weights, mus, sigmas, conditioning=None):
        w = np.asarray(weights, dtype=float)
        if w.ndim != 1 or w.size == 0:
            raise ValueError("weights must be a nonempty vector")
        if np.any(w < 0) or not np.isclose(w.sum(), 1.0):
            raise ValueError("weights must be nonnegative and sum to 1")
        self.weights = w / w.sum()
        mus = [np.atleast_1d(np.asarray(m, dtype=float)) for m in mus]
        self._d = mus[0].shape[0]
        if len(mus) != w.size or len(sigmas) != w.size:
            raise ValueError("weights, mus and sigmas must have equal length")
        self.mus = mus
        self.sigmas = [_as_cov(s, self._d) for s in sigmas]
        self.conditioning = (
            None if conditioning is None else np.asarray(conditioning, dtype=float)
        )
        if self.conditioning is not None and self.conditioning.shape[0] != self._d:
            raise ValueError("conditioning matrix must have d rows")
        self._posts = [
            _EigPosterior(m, s) for m, s in zip(self.mus, self.sigmas)
        ]

    @property
    def dim(self) -> int:
        return self._d

    def target_mean(self, cond=None) -> np.ndarray:
        base = sum(w * m for w, m in zip(self.weights, self.mus))
        return base + self._shift(cond)

    def target_cov(self) -> np.ndarray:
        mbar = sum(w * m for w, m in zip(self.weights, self.mus))
        cov = np.zeros((self._d, self._d))
        for w, m, s in zip(self.weights, self.mus, self.sigmas):
            dm = m - mbar
            cov += w * (s + np.outer(dm, dm))
        return cov

    def _responsibilities(self, x: np.ndarray, t: float, shift: np.ndarray):
        logs = np.stack(
            [
                np.log(w) + post.log_marginal(x, t, m + shift)
                for w, m, post in zip(self.weights, self.mus, self._posts)
            ],
            axis=-1,
        )
        logs -= logs.max(axis=-1, keepdims=True)
        r = np.exp(logs)
        r /= r.sum(axis=-1, keepdims=True)
        return r

    def posterior_mean(self, x: Chunk, t: float, cond=None) -> Chunk:
        x = self._check_input(x)
        shift = self._shift(cond)
        r = self._responsibilities(x, t, shift)
        out = np.zeros_like(x)
        for i, (m, post) in enumerate(zip(self.mus, self._posts)):
            out += r[..., i : i + 1] * post.posterior_mean(x, t, m + shift)
        return out

    def noise_mean(self, x: Chunk, t: float, cond=None) -> Chunk:
        x = self._check_input(x)
        shift = self._shift(cond)
        r = self._responsibilities(x, t, shift)
        out = np.zeros_like(x)
        for i, (m, post) in enumerate(zip(self.mus, self._posts)):
            out += r[..., i : i + 1] * post.noise_mean(x, t, m + shift)
        return out


class InstrumentedModel(VelocityModel):
    """Counting wrapper used to audit the per-step evaluation contract.

    Records one entry per velocity call: the evaluation time and the number
    of frames the call saw. Delegates all math to the wrapped model.
    """

    def __init__(self, inner: VelocityModel):
        self.inner = inner
        self.calls: list[tuple[float, int]] = []

    @property
    def dim(self) -> int:
        return self.inner.dim

    @property
    def frames(self) -> int | None:
        return self.inner.frames

    @property
    def n_calls(self) -> int:
        return len(self.calls)

    @property
    def max_frames(self) -> int:
        return max((frames for _, frames in self.calls), default=0)

    def velocity(self, x: Chunk, t: float, cond=None) -> Chunk:
        self.calls.append((t, np.asarray(x).shape[-2]))
        return self.inner.velocity(x, t, cond)

    def posterior_mean(self, x: Chunk, t: float, cond=None) -> Chunk:
        return self.inner.posterior_mean(x, t, cond)

    def noise_mean(self, x: Chunk, t: float, cond=None) -> Chunk:
        return self.inner.noise_mean(x, t, cond)
