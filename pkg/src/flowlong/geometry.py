"""Window-layout arithmetic for overlapping-chunk generation.

Everything here is integer index bookkeeping: converting pixel-space window
parameters to latent-space (F, O, S), validating layouts, mapping local chunk
frames to global buffer positions, and partitioning the global buffer into
prefix / blending zones / gaps / suffix with last-writer-wins conflict
resolution. All objects are immutable and safe to share across workers.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field


class GeometryError(ValueError):
    """Raised when a window layout violates one of its constraints."""


def _round_half_away(x: float) -> int:
    """Round half away from zero (deterministic, locale-independent)."""
    return int(math.floor(x + 0.5)) if x >= 0 else -int(math.floor(-x + 0.5))


@dataclass(frozen=True)
class PixelWindowSpec:
    """Pixel-space description of one generation window.

    W: pixel frames per window; w: pixel index where the overlap region
    begins inside a window; r: temporal stride of the latent representation
    (one latent frame per r pixel frames, plus the leading frame).
    """

    W: int
    w: int
    r: int

    def __post_init__(self) -> None:
        problems = []
        if self.W < 1:
            problems.append("W < 1")
        if not 0 <= self.w < self.W:
            problems.append("w outside [0, W)")
        if self.r < 1:
            problems.append("r < 1")
        elif self.W >= 1 and (self.W - 1) % self.r != 0:
            problems.append("(W - 1) not divisible by r")
        if problems:
            raise GeometryError("invalid pixel window spec: " + "; ".join(problems))


@dataclass(frozen=True)
class ChunkGeometry:
    """Latent-space window layout shared by every chunk.

    F: latent frames per chunk; O: frames in the blending zone (the last O
    frames of each chunk); S: stride between chunk start indices; K: chunk
    count; N: total latent frames, N = F + (K - 1) * S.
    """

    F: int
    O: int
    S: int
    K: int
    N: int

    @classmethod
    def create(cls, F: int, O: int, S: int, K: int) -> "ChunkGeometry":
        """Build a geometry with N derived, then validate it."""
        return validate_geometry(cls(F=F, O=O, S=S, K=K, N=F + (K - 1) * S))

    @classmethod
    def from_pixel(cls, spec: PixelWindowSpec, K: int) -> "ChunkGeometry":
        F, O, S = pixel_to_latent(spec)
        return cls.create(F, O, S, K)


@dataclass(frozen=True)
class AudioGeometry:
    """Dual-rate layout for the audio stream of a joint audio/video run.

    The audio blending zone is pinned to the geometric window overlap
    (O_a = F_a - S_a), which zeroes out the sub-latent rounding offset
    between the two streams.
    """

    F_a: int
    O_a: int
    S_a: int
    N_a: int
    rho_a: float
    fps_v: float

    @classmethod
    def from_pixel(
        cls, W: int, w: int, fps_v: float, rho_a: float, K: int
    ) -> "AudioGeometry":
        F_a, O_a, S_a = audio_geometry(W, w, fps_v, rho_a)
        return cls(
            F_a=F_a,
            O_a=O_a,
            S_a=S_a,
            N_a=F_a + (K - 1) * S_a,
            rho_a=rho_a,
            fps_v=fps_v,
        )

    def to_chunk_geometry(self, K: int) -> ChunkGeometry:
        """Audio stream as a plain chunk layout, so one code path serves both."""
        return ChunkGeometry.create(self.F_a, self.O_a, self.S_a, K)


def pixel_to_latent(spec: PixelWindowSpec) -> tuple[int, int, int]:
    """Convert a pixel window spec to latent (F, O, S).

    F = (W - 1) / r + 1, S = floor((W - w) / r), O = F - floor(w / r).
    Raises GeometryError if the resulting overlap is shorter than the stride.
    """
    F = (spec.W - 1) // spec.r + 1
    S = (spec.W - spec.w) // spec.r
    O = F - spec.w // spec.r
    if O < S:
        raise GeometryError(f"O < S: derived overlap {O} shorter than stride {S}")
    return F, O, S


def audio_geometry(W: int, w: int, fps_v: float, rho_a: float) -> tuple[int, int, int]:
    """Audio-latent chunk length, overlap and stride matching a video window.

    F_a = round(W / fps_v * rho_a), S_a = round((W - w) / fps_v * rho_a),
    O_a = F_a - S_a, with round = half away from zero.
    """
    if fps_v <= 0 or rho_a <= 0:
        raise GeometryError("fps_v and rho_a must be positive")
    F_a = _round_half_away(W / fps_v * rho_a)
    S_a = _round_half_away((W - w) / fps_v * rho_a)
    O_a = F_a - S_a
    if O_a < S_a:
        raise GeometryError(
            f"O_a < S_a: audio overlap {O_a} shorter than stride {S_a}"
        )
    return F_a, O_a, S_a


def validate_geometry(g: ChunkGeometry) -> ChunkGeometry:
    """Check every layout constraint, reporting all violated clauses by name.

    Accepts iff O >= S, 2 <= O <= F, S >= 1, K >= 1 and N = F + (K - 1) * S.
    O = 1 is rejected because the blend schedule divides by O - 1.
    """
    problems = []
    if g.O < g.S:
        problems.append("O < S")
    if g.O < 2:
        problems.append("O < 2")
    if g.O > g.F:
        problems.append("O > F")
    if g.S < 1:
        problems.append("S < 1")
    if g.K < 1:
        problems.append("K < 1")
    if g.N != g.F + (g.K - 1) * g.S:
        problems.append("N != F + (K - 1) * S")
    if problems:
        raise GeometryError("invalid chunk geometry: " + "; ".join(problems))
    return g


def local_to_global(g: ChunkGeometry, k: int, j: int) -> int:
    """Global buffer index of local frame j in chunk k (1-based chunks)."""
    if not 1 <= k <= g.K:
        raise IndexError(f"chunk index {k} outside 1..{g.K}")
    if not 0 <= j < g.F:
        raise IndexError(f"local frame {j} outside 0..{g.F - 1}")
    return (k - 1) * g.S + j


@dataclass(frozen=True)
class Region:
    """One resolved stretch of the global buffer.

    kind is one of {"prefix", "blend", "gap", "suffix"}. Solely-owned regions
    carry the owning chunk (1-based); blend regions carry the pair index k,
    meaning the values are blended between chunks k and k+1.
    """

    kind: str
    start: int
    stop: int
    chunk: int | None = None
    pair: int | None = None

    def __len__(self) -> int:
        return self.stop - self.start


@dataclass(frozen=True)
class BufferPartition:
    """Partition of global indices {0..N-1} induced by a chunk layout.

    Raw fields keep the unresolved ranges: blending zone B_k spans
    [(k-1)S + F - O, (k-1)S + F) for each adjacent pair k = 1..K-1, gaps
    appear only when S > O, and an empty prefix/suffix is an empty range.
    ``conflicts`` lists each nonempty B_k intersect B_{k+1} (present when
    S < O) as (k, range); those frames belong to the later pair. ``resolved``
    is the last-writer-wins outcome: disjoint regions covering 0..N-1 once,
    in write order prefix, zones with gaps ascending, suffix.
    """

    prefix: range
    blend_zones: tuple[range, ...]
    gaps: tuple[range, ...]
    suffix: range
    conflicts: tuple[tuple[int, range], ...] = field(default=())
    resolved: tuple[Region, ...] = field(default=())


def partition(g: ChunkGeometry) -> BufferPartition:
    """Partition the global buffer and resolve zone overlaps.

    Supports the S > O gap layout for completeness even though run-level
    validation enforces O >= S; only the structural constraints are checked
    here (1 <= O <= F, S >= 1, K >= 1, N consistent).
    """
    problems = []
    if not 1 <= g.O <= g.F:
        problems.append("O outside 1..F")
    if g.S < 1:
        problems.append("S < 1")
    if g.K < 1:
        problems.append("K < 1")
    if g.N != g.F + (g.K - 1) * g.S:
        problems.append("N != F + (K - 1) * S")
    if problems:
        raise GeometryError("cannot partition: " + "; ".join(problems))

    F, O, S, K, N = g.F, g.O, g.S, g.K, g.N
    prefix = range(0, F - O)
    zones = tuple(range((k - 1) * S + F - O, (k - 1) * S + F) for k in range(1, K))
    suffix = range((K - 1) * S + F - O, N)
    gaps = ()
    if S > O:
        gaps = tuple(range((k - 1) * S + F, k * S + F - O) for k in range(1, K))

    conflicts = []
    for k in range(1, K - 1):
        lo = max(zones[k - 1].start, zones[k].start)
        hi = min(zones[k - 1].stop, zones[k].stop)
        if lo < hi:
            conflicts.append((k, range(lo, hi)))

    # Replay the writes; whatever survives is the resolved ownership map.
    regions: list[Region] = []
    if len(prefix):
        regions.append(Region("prefix", prefix.start, prefix.stop, chunk=1))
    for k in range(1, K):
        z = zones[k - 1]
        regions.append(Region("blend", z.start, z.stop, pair=k))
        if S > O:
            gp = gaps[k - 1]
            if len(gp):
                regions.append(Region("gap", gp.start, gp.stop, chunk=k + 1))
    regions.append(Region("suffix", suffix.start, suffix.stop, chunk=K))

    owner = [-1] * N
    for idx, reg in enumerate(regions):
        for i in range(reg.start, reg.stop):
            owner[i] = idx
    if min(owner) < 0:
        raise GeometryError("partition does not cover the buffer")  # unreachable

    resolved: list[Region] = []
    start = 0
    for i in range(1, N + 1):
        if i == N or owner[i] != owner[start]:
            src = regions[owner[start]]
            resolved.append(
                Region(src.kind, start, i, chunk=src.chunk, pair=src.pair)
            )
            start = i

    return BufferPartition(
        prefix=prefix,
        blend_zones=zones,
        gaps=gaps,
        suffix=suffix,
        conflicts=tuple(conflicts),
        resolved=tuple(resolved),
    )
