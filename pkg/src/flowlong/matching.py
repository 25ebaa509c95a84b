"""Blending of adjacent chunks' posterior estimates across overlap frames.

Adjacent chunks k and k+1 are asked to agree on a shared overlap window: the
last O frames of chunk k against the first O frames of chunk k+1, local
frames j in [F-O, F) pairing with j' = j - (F - O). The quadratic penalty on
their disagreement has a one-step gradient correction that reduces to a
per-frame convex combination with weights lambda, and under the linear
symmetric schedule the per-pair updates collapse into a single pass that
writes every global buffer index exactly once. ``aggregate`` is that single
pass; ``pairwise_iteration_oracle`` is the literal pair iteration kept as a
reference implementation for the equivalence, off the hot path.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .flow import Chunk, ChunkEstimates, Condition
from .geometry import ChunkGeometry, partition


@dataclass(frozen=True)
class BlendSchedule:
    """Per-frame blend weights over the overlap, indexed by local position.

    lambdas[0] = 0 and lambdas[-1] = 1 exactly, and mirrored positions sum
    to 1, so the same convex combination is produced no matter which side of
    a pair computes it.
    """

    lambdas: np.ndarray

    def __len__(self) -> int:
        return self.lambdas.shape[0]

    def weights(self, scale: float = 1.0) -> np.ndarray:
        """Effective weights; scale != 1 is an ablation knob, default 1."""
        return self.lambdas if scale == 1.0 else scale * self.lambdas


def lambda_schedule(F: int, O: int) -> BlendSchedule:
    """Linear blend schedule: weight i / (O - 1) at overlap position i."""
    if O < 2:
        raise ValueError(f"O = {O} < 2: blend schedule divides by O - 1")
    if O > F:
        raise ValueError(f"O = {O} exceeds chunk length F = {F}")
    return BlendSchedule(lambdas=np.arange(O, dtype=float) / (O - 1))


def _overlap_views(est_k: Chunk, est_k1: Chunk, geom: ChunkGeometry):
    est_k = np.asarray(est_k, dtype=float)
    est_k1 = np.asarray(est_k1, dtype=float)
    if est_k.shape != est_k1.shape:
        raise ValueError(f"shape mismatch: {est_k.shape} vs {est_k1.shape}")
    if est_k.shape[-2] != geom.F:
        raise ValueError(f"chunk length {est_k.shape[-2]} != F = {geom.F}")
    a = est_k[..., geom.F - geom.O :, :]
    b = est_k1[..., : geom.O, :]
    return a, b


def guidance_loss(est_k: Chunk, est_k1: Chunk, geom: ChunkGeometry) -> float:
    """Half squared disagreement of the pair on their overlap frames."""
    a, b = _overlap_views(est_k, est_k1, geom)
    diff = a - b
    return 0.5 * float(np.sum(diff * diff))


def guidance_gradient(est_k: Chunk, est_k1: Chunk, geom: ChunkGeometry) -> Chunk:
    """Gradient of guidance_loss with respect to est_k.

    Supported only on the overlap frames; zero everywhere else.
    """
    a, b = _overlap_views(est_k, est_k1, geom)
    grad = np.zeros_like(np.asarray(est_k, dtype=float))
    grad[..., geom.F - geom.O :, :] = a - b
    return grad


def tweedie_match_pair(
    est_k: Chunk,
    est_k1: Chunk,
    schedule: BlendSchedule,
    geom: ChunkGeometry,
    lambda_scale: float = 1.0,
) -> tuple[Chunk, Chunk]:
    """One-step gradient correction of an adjacent pair toward agreement.

    Overlap frame j of chunk k becomes (1 - lam) est_k[j] + lam est_k1[j'],
    and the symmetric update puts weight (1 - lam) on est_k at the mirrored
    position, so at full strength both chunks end up holding the identical
    convex combination on every shared frame. Non-overlap frames are
    untouched.
    """
    a, b = _overlap_views(est_k, est_k1, geom)
    if len(schedule) != geom.O:
        raise ValueError(f"schedule length {len(schedule)} != O = {geom.O}")
    lam = schedule.weights(lambda_scale)[:, None]
    bar_k = np.array(est_k, dtype=float, copy=True)
    bar_k1 = np.array(est_k1, dtype=float, copy=True)
    if lambda_scale == 1.0:
        blended = (1.0 - lam) * a + lam * b
        bar_k[..., geom.F - geom.O :, :] = blended
        bar_k1[..., : geom.O, :] = blended
    else:
        bar_k[..., geom.F - geom.O :, :] = a - lam * (a - b)
        bar_k1[..., : geom.O, :] = b - (lambda_scale - lam) * (b - a)
    return bar_k, bar_k1


def _check_chunk_set(
    chunks: Sequence[Chunk], geom: ChunkGeometry
) -> list[np.ndarray]:
    if len(chunks) != geom.K:
        raise ValueError(f"got {len(chunks)} chunks for K = {geom.K}")
    arrs = [np.asarray(c, dtype=float) for c in chunks]
    for c in arrs:
        if c.shape != arrs[0].shape:
            raise ValueError("all chunks must share one shape")
        if c.shape[-2] != geom.F:
            raise ValueError(f"chunk length {c.shape[-2]} != F = {geom.F}")
    return arrs


def aggregate(
    chunks: Sequence[Chunk],
    geom: ChunkGeometry,
    schedule: BlendSchedule,
    lambda_scale: float = 1.0,
) -> np.ndarray:
    """Single-pass write of all chunks into one (..., N, d) buffer.

    Writes, in order: the leading prefix from chunk 1; for each adjacent
    pair k the blending zone as the lambda-weighted combination of the two
    chunks' overlap frames, plus (when S > O) the interior gap copied from
    chunk k+1; finally the trailing suffix from chunk K. Writes are direct
    assignments, so where consecutive blending zones overlap (S < O) the
    later pair simply overwrites the earlier one: last-writer-wins, with no
    weight accumulation or renormalization.
    """
    arrs = _check_chunk_set(chunks, geom)
    F, O, S, K, N = geom.F, geom.O, geom.S, geom.K, geom.N
    lam = schedule.weights(lambda_scale)[:, None]
    if len(schedule) != O:
        raise ValueError(f"schedule length {len(schedule)} != O = {geom.O}")

    out = np.empty(arrs[0].shape[:-2] + (N, arrs[0].shape[-1]), dtype=float)
    out[..., : F - O, :] = arrs[0][..., : F - O, :]
    for k in range(1, K):
        left, right = arrs[k - 1], arrs[k]
        start = (k - 1) * S + F - O
        out[..., start : start + O, :] = (1.0 - lam) * left[
            ..., F - O :, :
        ] + lam * right[..., :O, :]
        if S > O:
            gap_start = (k - 1) * S + F
            gap_stop = k * S + F - O
            out[..., gap_start:gap_stop, :] = right[..., F - S : F - O, :]
    out[..., (K - 1) * S + F - O :, :] = arrs[-1][..., F - O :, :]
    return out


def pairwise_iteration_oracle(
    chunks: Sequence[Chunk],
    geom: ChunkGeometry,
    schedule: BlendSchedule,
    lambda_scale: float = 1.0,
) -> np.ndarray:
    """Reference aggregation: iterate the pair update, then read by owner.

    Applies tweedie_match_pair to every adjacent pair of the original
    chunks, resolves contested frames in favor of the rightmost pair via the
    resolved partition, and reads each global frame from its owning chunk or
    pair. Kept as an independent route for the single-pass equivalence;
    not used during sampling.
    """
    arrs = _check_chunk_set(chunks, geom)
    F, O, S, K = geom.F, geom.O, geom.S, geom.K
    bars = {
        k: tweedie_match_pair(arrs[k - 1], arrs[k], schedule, geom, lambda_scale)
        for k in range(1, K)
    }
    out = np.empty(arrs[0].shape[:-2] + (geom.N, arrs[0].shape[-1]), dtype=float)
    for region in partition(geom).resolved:
        sel = slice(region.start, region.stop)
        if region.kind == "blend":
            k = region.pair
            local = slice(region.start - (k - 1) * S, region.stop - (k - 1) * S)
            out[..., sel, :] = bars[k][0][..., local, :]
        else:
            c = region.chunk
            local = slice(region.start - (c - 1) * S, region.stop - (c - 1) * S)
            out[..., sel, :] = arrs[c - 1][..., local, :]
    return out


@dataclass(frozen=True)
class ChunkEstimateSet:
    """The K per-chunk posterior estimates formed at one time step."""

    estimates: tuple[ChunkEstimates, ...]
    conditions: tuple[Condition, ...] | None = None

    def __post_init__(self) -> None:
        if not self.estimates:
            raise ValueError("estimate set is empty")
        t0 = self.estimates[0].t
        if any(e.t != t0 for e in self.estimates):
            raise ValueError("all estimates must share one time")
        if self.conditions is not None and len(self.conditions) != len(
            self.estimates
        ):
            raise ValueError("conditions must match the number of chunks")

    @property
    def t(self) -> float:
        return self.estimates[0].t

    @property
    def denoised(self) -> list[Chunk]:
        return [e.x0_hat for e in self.estimates]

    @property
    def noisy(self) -> list[Chunk]:
        return [e.x1_hat for e in self.estimates]
