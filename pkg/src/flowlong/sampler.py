"""The long-sequence sampling loop over overlapping chunks.

Each step slices the shared global buffer into K overlapping windows,
evaluates the velocity model independently per window (never on the full
sequence), forms the posterior estimates, blends them back into the buffer
via the matching pass, and renoises: stochastically in the early high-noise
phase (t >= t_star) to break per-window trajectory inertia, then
deterministically to preserve fidelity. Overlap frames are stored once in
the buffer and shared by both adjacent windows.

Noise is drawn from per-modality sub-streams of one seeded source, once per
step for the whole buffer, so output is deterministic in (config, seed,
model) no matter how chunk evaluations are scheduled. Deterministic steps
consume no randomness, which makes the forced-eta modes bitwise reductions
of the hybrid mode.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .flow import (
    Chunk,
    ChunkEstimates,
    Condition,
    denoised_estimate,
    interp_step,
    noisy_estimate,
)
from .geometry import ChunkGeometry, validate_geometry
from .matching import BlendSchedule, aggregate, lambda_schedule
from .models import VelocityModel

MODES = ("hybrid", "full_ode", "full_sde", "xt_match", "independent")
BUFFER_MODES = ("hybrid", "full_ode", "full_sde", "xt_match")

VIDEO = "video"
AUDIO = "audio"


class SamplerError(RuntimeError):
    """Raised when the run produces non-finite values (fail fast)."""


class NoiseSource:
    """Seeded standard-normal source with independent per-modality streams."""

    def __init__(self, seed: int):
        self.seed = int(seed)
        children = np.random.SeedSequence(self.seed).spawn(2)
        self._streams = {
            VIDEO: np.random.default_rng(children[0]),
            AUDIO: np.random.default_rng(children[1]),
        }

    def normal(self, shape, modality: str = VIDEO) -> np.ndarray:
        return self._streams[modality].standard_normal(shape)


@dataclass
class SamplerConfig:
    """Knobs of one sampling run.

    The time grid descends strictly from 1 to 0; by default it is uniform
    with ``steps`` intervals. ``t_star`` is the threshold of the binary
    stochasticity schedule; values above 1 or at/below 0 degenerate to the
    always-deterministic / always-stochastic regimes. ``eta_schedule`` is a
    reserved slot, only "binary" is defined. ``lambda_scale`` multiplies the
    blend schedule for ablations, default 1.
    """

    steps: int = 50
    t_star: float = 0.5
    mode: str = "hybrid"
    seed: int = 0
    lambda_scale: float = 1.0
    eta_schedule: str = "binary"
    time_grid: np.ndarray | None = None

    def __post_init__(self) -> None:
        if self.steps < 1:
            raise ValueError("steps must be >= 1")
        if self.mode not in MODES:
            raise ValueError(f"mode {self.mode!r} not one of {MODES}")
        if self.eta_schedule != "binary":
            raise ValueError("only the binary eta schedule is defined")
        if not math.isfinite(self.t_star):
            raise ValueError("t_star must be finite")
        if self.time_grid is None:
            self.time_grid = np.linspace(1.0, 0.0, self.steps + 1)
        else:
            self.time_grid = np.asarray(self.time_grid, dtype=float)
        grid = self.time_grid
        if grid.ndim != 1 or grid.shape[0] != self.steps + 1:
            raise ValueError("time grid must have steps + 1 points")
        if grid[0] != 1.0 or grid[-1] != 0.0:
            raise ValueError("time grid must run from 1 to 0")
        if np.any(np.diff(grid) >= 0):
            raise ValueError("time grid must be strictly descending")


@dataclass(frozen=True)
class LongBuffer:
    """The N x d latent sequence shared by all chunks (single storage)."""

    values: np.ndarray
    geometry: ChunkGeometry

    def __post_init__(self) -> None:
        vals = np.asarray(self.values, dtype=float)
        if vals.shape[-2] != self.geometry.N:
            raise ValueError(
                f"buffer has {vals.shape[-2]} frames, geometry says {self.geometry.N}"
            )
        if not np.all(np.isfinite(vals)):
            raise ValueError("buffer contains non-finite values")
        object.__setattr__(self, "values", vals)


@dataclass
class RunRecorder:
    """Collects the per-step mean overlap disagreement of the estimates.

    One entry per sampling step: the mean over adjacent pairs of the
    guidance loss on the pre-aggregation denoised estimates, normalized by
    overlap entry count. Empty for single-chunk runs.
    """

    overlap_mse: list[float] = field(default_factory=list)

    def record(
        self, step_index: int, t: float, x0_hats: Sequence[Chunk], geom: ChunkGeometry
    ) -> None:
        if geom.K < 2:
            return
        F, O = geom.F, geom.O
        vals = []
        for k in range(geom.K - 1):
            a = x0_hats[k][..., F - O :, :]
            b = x0_hats[k + 1][..., :O, :]
            vals.append(0.5 * float(np.mean((a - b) ** 2)))
        self.overlap_mse.append(float(np.mean(vals)))


def eta(t: float, t_star: float, mode: str = "hybrid") -> float:
    """Binary stochasticity schedule: 1 in the early phase (t >= t_star).

    The forced modes override the threshold: full_sde is always 1 and
    full_ode always 0.
    """
    if mode == "full_sde":
        return 1.0
    if mode == "full_ode":
        return 0.0
    return 1.0 if t >= t_star else 0.0


def stochastic_renoise(
    bar0: Chunk,
    bar1: Chunk,
    s: float,
    t: float,
    eta_val: float,
    noise: NoiseSource | None = None,
    *,
    eps: np.ndarray | None = None,
    modality: str = VIDEO,
) -> Chunk:
    """Advance matched estimates to time s, mixing in fresh noise.

    With kappa = s * sqrt(eta_val) the update is

        x_s = (1 - s) bar0 + sqrt(s^2 - kappa^2) bar1 + kappa * eps

    which splits the renoising into a deterministic component along bar1 and
    a stochastic perturbation of magnitude kappa. At eta_val = 0 this is
    exactly the deterministic interpolation step and no randomness is
    consumed.
    """
    if not 0.0 <= s < t:
        raise ValueError(f"require 0 <= s < t, got s = {s}, t = {t}")
    if not 0.0 <= eta_val <= 1.0:
        raise ValueError(f"eta_val = {eta_val} outside [0, 1]")
    kappa = s * math.sqrt(eta_val)
    if kappa == 0.0:
        return interp_step(ChunkEstimates(bar0, bar1, t), s)
    if eps is None:
        if noise is None:
            raise ValueError("stochastic step needs a noise source or eps")
        eps = noise.normal(np.asarray(bar0).shape, modality)
    det = max(s * s - kappa * kappa, 0.0)
    return (1.0 - s) * bar0 + math.sqrt(det) * bar1 + kappa * eps


def slice_chunks(values: np.ndarray, geom: ChunkGeometry) -> list[np.ndarray]:
    """The K overlapping window views of the buffer; rows are shared."""
    return [
        values[..., (k - 1) * geom.S : (k - 1) * geom.S + geom.F, :]
        for k in range(1, geom.K + 1)
    ]


def _unwrap(cond) -> np.ndarray | None:
    if cond is None:
        return None
    if isinstance(cond, Condition):
        return cond.vector
    return np.asarray(cond, dtype=float)


def effective_conditions(
    global_condition, conditions, K: int
) -> list[np.ndarray | None]:
    """Combine the shared global condition with each chunk's own.

    The effective vector is the global vector concatenated with the
    per-chunk vector; a missing side passes the other one through.
    """
    g = _unwrap(global_condition)
    if conditions is None:
        per: list[np.ndarray | None] = [None] * K
    else:
        if len(conditions) != K:
            raise ValueError(f"got {len(conditions)} conditions for K = {K}")
        per = [_unwrap(c) for c in conditions]
    out: list[np.ndarray | None] = []
    for c in per:
        if g is None:
            out.append(c)
        elif c is None:
            out.append(g)
        else:
            out.append(np.concatenate([g, c]))
    return out


def _chunk_estimates(
    values: np.ndarray,
    model: VelocityModel,
    conds: Sequence[np.ndarray | None],
    t: float,
    geom: ChunkGeometry,
) -> tuple[list[Chunk], list[Chunk]]:
    x0s, x1s = [], []
    for k, chunk in enumerate(slice_chunks(values, geom)):
        v = model.velocity(chunk, t, conds[k])
        x0s.append(denoised_estimate(chunk, v, t))
        x1s.append(noisy_estimate(chunk, v, t))
    return x0s, x1s


def flowlong_step(
    buffer: LongBuffer,
    model: VelocityModel,
    conditions: Sequence[np.ndarray | None],
    t: float,
    s: float,
    config: SamplerConfig,
    noise: NoiseSource,
    *,
    schedule: BlendSchedule | None = None,
    recorder: RunRecorder | None = None,
    step_index: int = 0,
    modality: str = VIDEO,
) -> LongBuffer:
    """One sampling step t -> s on the shared buffer.

    Slices into K windows, evaluates the model once per window, blends the
    denoised estimates back into the buffer (or, in xt_match mode, blends
    the per-window next noisy states instead), and renoises per global
    frame. The independent mode keeps separate per-window trajectories and
    is handled inside run().
    """
    geom = buffer.geometry
    if config.mode not in BUFFER_MODES:
        raise ValueError(
            f"mode {config.mode!r} does not step on a shared buffer; use run()"
        )
    if schedule is None:
        schedule = lambda_schedule(geom.F, geom.O)
    values = buffer.values

    x0s, x1s = _chunk_estimates(values, model, conditions, t, geom)
    if recorder is not None:
        recorder.record(step_index, t, x0s, geom)

    eta_val = eta(t, config.t_star, config.mode)
    kappa = s * math.sqrt(eta_val)
    if config.mode == "xt_match":
        field = noise.normal(values.shape, modality) if kappa > 0.0 else None
        rows = [((k - 1) * geom.S, (k - 1) * geom.S + geom.F) for k in range(1, geom.K + 1)]
        cands = []
        for k in range(geom.K):
            eps_k = None if field is None else field[..., rows[k][0] : rows[k][1], :]
            cands.append(
                stochastic_renoise(x0s[k], x1s[k], s, t, eta_val, eps=eps_k)
            )
        new = aggregate(cands, geom, schedule, config.lambda_scale)
    else:
        bar0 = aggregate(x0s, geom, schedule, config.lambda_scale)
        bar1 = (values - (1.0 - t) * bar0) / t
        new = stochastic_renoise(
            bar0, bar1, s, t, eta_val, noise, modality=modality
        )

    if not np.all(np.isfinite(new)):
        raise SamplerError(f"non-finite values after step {step_index} (t = {t})")
    return LongBuffer(new, geom)


def _run_independent(
    config: SamplerConfig,
    model: VelocityModel,
    geom: ChunkGeometry,
    conds: Sequence[np.ndarray | None],
    init: np.ndarray,
    noise: NoiseSource,
    recorder: RunRecorder | None,
    modality: str,
) -> np.ndarray:
    """Per-window trajectories with no matching; stitched at the end.

    Every window keeps its own state from its initial slice of the shared
    noise buffer. The final buffer assigns each global frame to the last
    window covering it, which leaves the hard seams this mode is the
    baseline for.
    """
    F, S, K = geom.F, geom.S, geom.K
    rows = [((k - 1) * S, (k - 1) * S + F) for k in range(1, K + 1)]
    states = [init[..., a:b, :].copy() for a, b in rows]
    grid = config.time_grid
    for i in range(config.steps):
        t, s = float(grid[i]), float(grid[i + 1])
        x0s, x1s = [], []
        for k in range(K):
            v = model.velocity(states[k], t, conds[k])
            x0s.append(denoised_estimate(states[k], v, t))
            x1s.append(noisy_estimate(states[k], v, t))
        if recorder is not None:
            recorder.record(i, t, x0s, geom)
        eta_val = eta(t, config.t_star, config.mode)
        kappa = s * math.sqrt(eta_val)
        field = noise.normal(init.shape, modality) if kappa > 0.0 else None
        for k in range(K):
            eps_k = None if field is None else field[..., rows[k][0] : rows[k][1], :]
            states[k] = stochastic_renoise(x0s[k], x1s[k], s, t, eta_val, eps=eps_k)
            if not np.all(np.isfinite(states[k])):
                raise SamplerError(f"non-finite values after step {i} (t = {t})")
    out = np.empty_like(init)
    for k in range(K):
        out[..., rows[k][0] : rows[k][1], :] = states[k]
    return out


def run(
    config: SamplerConfig,
    model: VelocityModel,
    geom: ChunkGeometry,
    *,
    conditions=None,
    global_condition=None,
    noise: NoiseSource | None = None,
    batch: int | None = None,
    recorder: RunRecorder | None = None,
) -> LongBuffer:
    """Sample a full long buffer from noise down to t = 0.

    Args:
        config: sampler knobs (steps, mode, t_star, seed, lambda_scale).
        model: conditional velocity field; evaluated per window only.
        geom: validated chunk layout.
        conditions: optional list of K per-chunk condition vectors.
        global_condition: optional condition shared by every chunk,
            concatenated with the per-chunk vectors.
        noise: noise source; a fresh one is seeded from the config when
            omitted.
        batch: when given, runs that many independent samples at once and
            returns a (batch, N, d) buffer.
        recorder: optional per-step overlap disagreement collector.

    The buffer is initialized with i.i.d. standard normal draws, so window
    contents start independent up to the shared overlap rows.
    """
    validate_geometry(geom)
    conds = effective_conditions(global_condition, conditions, geom.K)
    if noise is None:
        noise = NoiseSource(config.seed)
    shape = (geom.N, model.dim) if batch is None else (batch, geom.N, model.dim)
    init = noise.normal(shape, VIDEO)

    if config.mode == "independent":
        final = _run_independent(
            config, model, geom, conds, init, noise, recorder, VIDEO
        )
        return LongBuffer(final, geom)

    schedule = lambda_schedule(geom.F, geom.O)
    buffer = LongBuffer(init, geom)
    grid = config.time_grid
    for i in range(config.steps):
        buffer = flowlong_step(
            buffer,
            model,
            conds,
            float(grid[i]),
            float(grid[i + 1]),
            config,
            noise,
            schedule=schedule,
            recorder=recorder,
            step_index=i,
        )
    return buffer


def dual_stream_run(
    config: SamplerConfig,
    video_model: VelocityModel,
    video_geom: ChunkGeometry,
    audio_model: VelocityModel,
    audio_geom: ChunkGeometry,
    *,
    video_conditions=None,
    audio_conditions=None,
    global_condition=None,
    noise: NoiseSource | None = None,
    batch: int | None = None,
    recorders: tuple[RunRecorder | None, RunRecorder | None] = (None, None),
) -> tuple[LongBuffer, LongBuffer]:
    """Lock-step sampling of a video and an audio buffer over one grid.

    Both streams share the chunk count and the time grid; matching runs
    independently per stream with its own layout and blend schedule, and
    renoising draws from independent per-modality noise streams.
    """
    validate_geometry(video_geom)
    validate_geometry(audio_geom)
    if video_geom.K != audio_geom.K:
        raise ValueError(
            f"geometry K mismatch: video {video_geom.K} vs audio {audio_geom.K}"
        )
    if config.mode == "independent":
        raise ValueError("dual-stream sampling requires a buffer mode")
    v_conds = effective_conditions(global_condition, video_conditions, video_geom.K)
    a_conds = effective_conditions(global_condition, audio_conditions, audio_geom.K)
    if noise is None:
        noise = NoiseSource(config.seed)

    def _shape(geom, model):
        base = (geom.N, model.dim)
        return base if batch is None else (batch,) + base

    video = LongBuffer(noise.normal(_shape(video_geom, video_model), VIDEO), video_geom)
    audio = LongBuffer(noise.normal(_shape(audio_geom, audio_model), AUDIO), audio_geom)
    v_sched = lambda_schedule(video_geom.F, video_geom.O)
    a_sched = lambda_schedule(audio_geom.F, audio_geom.O)

    grid = config.time_grid
    for i in range(config.steps):
        t, s = float(grid[i]), float(grid[i + 1])
        video = flowlong_step(
            video, video_model, v_conds, t, s, config, noise,
            schedule=v_sched, recorder=recorders[0], step_index=i, modality=VIDEO,
        )
        audio = flowlong_step(
            audio, audio_model, a_conds, t, s, config, noise,
            schedule=a_sched, recorder=recorders[1], step_index=i, modality=AUDIO,
        )
    return video, audio
