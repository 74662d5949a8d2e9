"""Flat prunable-weight vector with named layer segments."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass(frozen=True)
class Segment:
    name: str
    start: int
    stop: int

    @property
    def size(self) -> int:
        return self.stop - self.start


@dataclass
class WeightStore:
    """Prunable weights flattened in layer order.

    ``segments`` partition ``[0, len(values))`` into contiguous, named,
    non-overlapping ranges (one per weight matrix).
    """

    values: np.ndarray
    segments: list[Segment] = field(default_factory=list)

    def __post_init__(self):
        self.values = np.asarray(self.values)
        if self.values.ndim != 1:
            raise ValueError("WeightStore values must be a flat vector")
        if not self.segments:
            self.segments = [Segment("all", 0, self.values.size)]
        pos = 0
        for seg in self.segments:
            if seg.start != pos or seg.stop <= seg.start:
                raise ValueError(f"segments must tile the vector contiguously; bad segment {seg}")
            pos = seg.stop
        if pos != self.values.size:
            raise ValueError(f"segments cover {pos} entries, vector has {self.values.size}")

    @property
    def d(self) -> int:
        return self.values.size

    def segment_of(self, index: int) -> Segment:
        for seg in self.segments:
            if seg.start <= index < seg.stop:
                return seg
        raise IndexError(index)

    def segment_ids(self) -> np.ndarray:
        """Segment number of every coordinate."""
        out = np.empty(self.d, dtype=np.int64)
        for k, seg in enumerate(self.segments):
            out[seg.start:seg.stop] = k
        return out

    def boundaries(self) -> list[int]:
        return [seg.start for seg in self.segments] + [self.d]

    def copy(self, values=None) -> WeightStore:
        vals = self.values.copy() if values is None else np.asarray(values)
        return WeightStore(vals, list(self.segments))
