"""Interval arithmetic for segments, sentences and instance partitions.

Everything here is half-open: a segment spans [start, end).  Sentences are
assigned to a segment only on positive-measure overlap, so spans touching
exactly at a boundary belong to one side only.
"""

from __future__ import annotations

from dataclasses import dataclass


@dataclass(frozen=True)
class SegmentLayout:
    """N contiguous equal-length intervals tiling [0, duration)."""

    duration_s: float
    boundaries: tuple[tuple[float, float], ...]

    @property
    def n_segments(self) -> int:
        return len(self.boundaries)


@dataclass(frozen=True)
class InstancePartition:
    """K consecutive, equal-size groups of segment indices."""

    n_segments: int
    groups: tuple[tuple[int, ...], ...]

    @property
    def k(self) -> int:
        return len(self.groups)

    @property
    def segments_per_instance(self) -> int:
        return self.n_segments // self.k


def segment_boundaries(duration_s: float, n: int) -> SegmentLayout:
    """Cut [0, duration) into n equal half-open intervals."""
    if not duration_s > 0:
        raise ValueError(f"duration must be positive, got {duration_s}")
    if n < 1:
        raise ValueError(f"segment count must be >= 1, got {n}")
    edges = [i * duration_s / n for i in range(n)]
    edges.append(duration_s)  # force an exact cover of [0, duration)
    bounds = tuple((edges[i], edges[i + 1]) for i in range(n))
    return SegmentLayout(duration_s=duration_s, boundaries=bounds)


def overlaps(a: tuple[float, float], b: tuple[float, float]) -> bool:
    """True iff the two half-open intervals share positive measure."""
    return max(a[0], b[0]) < min(a[1], b[1])


def assign_sentences(sentences, layout: SegmentLayout) -> list[list[int]]:
    """Per-segment lists of the sentence indices whose spans overlap it."""
    for j, (start, end) in enumerate(sentences):
        if start > end:
            raise ValueError(f"sentence {j} has start {start} > end {end}")
    assigned: list[list[int]] = [[] for _ in layout.boundaries]
    for i, seg in enumerate(layout.boundaries):
        for j, span in enumerate(sentences):
            if overlaps(seg, span):
                assigned[i].append(j)
    return assigned


def instance_partition(n: int, k: int) -> InstancePartition:
    """Split segments 0..n-1 into k consecutive groups of n/k each."""
    if k < 1:
        raise ValueError(f"instance count must be >= 1, got {k}")
    if n < 1:
        raise ValueError(f"segment count must be >= 1, got {n}")
    if n % k != 0:
        raise ValueError(f"instance count {k} does not divide segment count {n}")
    size = n // k
    groups = tuple(tuple(range(i * size, (i + 1) * size)) for i in range(k))
    return InstancePartition(n_segments=n, groups=groups)
