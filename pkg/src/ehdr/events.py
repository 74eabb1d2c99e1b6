"""Event streams, fixed-duration chunking and voxel-grid rasterization.

Events live in a packed numpy structured array (``EVENT_DTYPE``) so a stream
of millions of events stays cheap to slice and sort.
"""

from __future__ import annotations

from dataclasses import dataclass, field
import math
from typing import NamedTuple

import numpy as np

EVENT_DTYPE = np.dtype([("t", "<u8"), ("x", "<u2"), ("y", "<u2"), ("p", "i1")])
NUM_BINS = 5


class Event(NamedTuple):
    t: int
    x: int
    y: int
    p: int


def make_events(t, x, y, p) -> np.ndarray:
    """Build a structured event array from column arrays."""
    t = np.asarray(t)
    ev = np.zeros(t.shape[0], dtype=EVENT_DTYPE)
    ev["t"] = t
    ev["x"] = x
    ev["y"] = y
    ev["p"] = p
    return ev


def sort_events(ev: np.ndarray) -> np.ndarray:
    """Order by time, then y, x, polarity."""
    order = np.lexsort((ev["p"], ev["x"], ev["y"], ev["t"]))
    return ev[order]


@dataclass
class EventStream:
    """Time-sorted events from a ``width`` x ``height`` sensor."""

    events: np.ndarray
    width: int
    height: int

    def __post_init__(self):
        ev = np.asarray(self.events)
        if ev.dtype != EVENT_DTYPE:
            ev = ev.astype(EVENT_DTYPE)
        self.events = ev
        if ev.size:
            if np.any(np.diff(ev["t"].astype(np.int64)) < 0):
                raise ValueError("event timestamps must be non-decreasing")
            if ev["x"].max() >= self.width or ev["y"].max() >= self.height:
                raise ValueError("event coordinates outside the sensor")
            if not np.all(np.abs(ev["p"]) == 1):
                raise ValueError("polarity must be -1 or +1")

    @classmethod
    def empty(cls, width: int, height: int) -> "EventStream":
        return cls(np.zeros(0, dtype=EVENT_DTYPE), width, height)

    def __len__(self):
        return self.events.size

    def __iter__(self):
        for e in self.events:
            yield Event(int(e["t"]), int(e["x"]), int(e["y"]), int(e["p"]))

    def window(self, t0: int, t1: int) -> np.ndarray:
        """Events with ``t0 <= t < t1``."""
        t = self.events["t"]
        lo = np.searchsorted(t, t0, side="left")
        hi = np.searchsorted(t, t1, side="left")
        return self.events[lo:hi]


@dataclass
class EventChunk:
    """Events in ``[t_start, t_start + duration)`` on the chunk's own timeline.

    For chunks produced in the backward direction the timeline is mirrored
    (see :func:`chunk_stream`) so that ``t_start`` is a mirrored time too.
    """

    events: np.ndarray
    t_start: int
    duration: int
    width: int
    height: int
    reversed: bool = False

    def __len__(self):
        return self.events.size


@dataclass
class VoxelGrid:
    """Polarity-signed event mass in ``(bins, height, width)``."""

    bins: np.ndarray = field(repr=False)

    @property
    def num_bins(self):
        return self.bins.shape[0]

    def total_mass(self) -> float:
        return float(self.bins.sum(dtype=np.float64))


def chunk_stream(stream: EventStream, t0: int, t1: int, tau: int, direction: str | None = None) -> list[EventChunk]:
    """Split the window between ``t0`` and ``t1`` into chunks of ``tau`` us.

    Chunks are ordered from ``t0`` toward ``t1``. Forward (``t1 > t0``) chunk
    ``k`` holds events with ``t0 + k*tau <= t < t0 + (k+1)*tau`` (last chunk
    truncated at ``t1``).

    Backward (``t1 < t0``) chunk ``k`` holds the events with
    ``t0 - (k+1)*tau <= t < t0 - k*tau`` (and ``t >= t1``), played in reverse:
    each event is mapped to ``t' = 2*t0 - 1 - t`` with polarity negated, so
    the chunk covers ``[t0 + k*tau, t0 + (k+1)*tau)`` in mirrored time.
    """
    t0, t1, tau = int(t0), int(t1), int(tau)
    if t0 == t1:
        raise ValueError("empty window: t0 == t1")
    if tau <= 0:
        raise ValueError(f"chunk duration must be positive, got {tau}")
    inferred = "forward" if t1 > t0 else "backward"
    if direction is None:
        direction = inferred
    if direction != inferred:
        raise ValueError(f"direction {direction!r} inconsistent with t0={t0}, t1={t1}")

    span = abs(t1 - t0)
    n = math.ceil(span / tau)
    chunks = []
    for k in range(n):
        length = min(tau, span - k * tau)
        if direction == "forward":
            start = t0 + k * tau
            ev = stream.window(start, start + length).copy()
            chunks.append(EventChunk(ev, start, length, stream.width, stream.height))
        else:
            hi = t0 - k * tau
            lo = hi - length
            ev = stream.window(lo, hi).copy()
            if ev.size:
                ev["t"] = np.uint64(2 * t0 - 1) - ev["t"]
                ev["p"] = -ev["p"]
                ev = sort_events(ev)
            chunks.append(EventChunk(ev, t0 + k * tau, length, stream.width, stream.height, reversed=True))
    return chunks


def voxelize(chunk: EventChunk, num_bins: int = NUM_BINS) -> VoxelGrid:
    """Rasterize a chunk with a linear (tent) kernel in time.

    With ``t* = (t - t_start) / duration * (num_bins - 1)``, bin ``b``
    receives ``p * max(0, 1 - |b - t*|)``, so every event deposits exactly
    its polarity in total.
    """
    grid = np.zeros(num_bins * chunk.height * chunk.width, dtype=np.float64)
    ev = chunk.events
    if ev.size:
        ts = (ev["t"].astype(np.float64) - float(chunk.t_start)) / float(chunk.duration) * (num_bins - 1)
        ts = np.clip(ts, 0.0, num_bins - 1)
        b0 = np.minimum(np.floor(ts).astype(np.int64), num_bins - 2) if num_bins > 1 else np.zeros(ts.shape, np.int64)
        frac = ts - b0
        pol = ev["p"].astype(np.float64)
        pix = ev["y"].astype(np.int64) * chunk.width + ev["x"].astype(np.int64)
        hw = chunk.height * chunk.width
        grid += np.bincount(b0 * hw + pix, weights=pol * (1.0 - frac), minlength=grid.size)
        if num_bins > 1:
            grid += np.bincount((b0 + 1) * hw + pix, weights=pol * frac, minlength=grid.size)
    return VoxelGrid(grid.reshape(num_bins, chunk.height, chunk.width).astype(np.float32))


def event_rate(stream: EventStream, t0: int, t1: int, frame_interval: float) -> float:
    """Events in ``[t0, t1)`` per frame interval."""
    if t1 <= t0:
        raise ValueError("event_rate needs t1 > t0")
    n_intervals = (t1 - t0) / float(frame_interval)
    return len(stream.window(t0, t1)) / n_intervals
