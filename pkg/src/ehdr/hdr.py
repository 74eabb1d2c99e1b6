"""Camera response, exposure compensation, triangle-weighted merging and
mu-law tonemapping."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .tensor import Tensor, clamp, log

GAMMA = 2.2
MU = 5000.0
REC709 = np.array([0.2126, 0.7152, 0.0722])


@dataclass
class LdrImage:
    """Gamma-encoded bracket, ``pixels`` is ``(H, W, 3)`` in [0, 1].

    ``exposure_time`` is relative to the shortest bracket of its stack.
    """

    pixels: np.ndarray
    exposure_time: float
    fstop: int = 0
    timestamp: int | None = None

    def __post_init__(self):
        self.pixels = np.asarray(self.pixels, dtype=np.float32)
        if self.exposure_time <= 0:
            raise ValueError(f"exposure time must be positive, got {self.exposure_time}")

    @property
    def shape(self):
        return self.pixels.shape


@dataclass
class HdrImage:
    """Linear radiance, ``(H, W, 3)``, non-negative."""

    pixels: np.ndarray

    def __post_init__(self):
        self.pixels = np.asarray(self.pixels, dtype=np.float32)

    @property
    def shape(self):
        return self.pixels.shape

    def validate(self) -> "HdrImage":
        if not np.isfinite(self.pixels).all():
            raise ValueError("HDR image contains non-finite values")
        if (self.pixels < 0).any():
            raise ValueError("HDR image contains negative values")
        return self


def _pixels(img) -> np.ndarray:
    if isinstance(img, (LdrImage, HdrImage)):
        return img.pixels
    return np.asarray(img)


def luminance(rgb) -> np.ndarray:
    """Rec. 709 luma of an ``(..., 3)`` linear image."""
    rgb = _pixels(rgb)
    return rgb @ REC709.astype(rgb.dtype)


def linearize(ldr, gamma: float = GAMMA) -> np.ndarray:
    """Invert the gamma camera response: ``v ** gamma``."""
    return np.power(_pixels(ldr), gamma)


def delinearize(x, gamma: float = GAMMA) -> np.ndarray:
    return np.power(np.clip(_pixels(x), 0, None), 1.0 / gamma)


def exposure_compensate(ldr: LdrImage, gamma: float = GAMMA) -> np.ndarray:
    """Linearize and divide by the relative exposure time."""
    if ldr.exposure_time <= 0:
        raise ValueError(f"exposure time must be positive, got {ldr.exposure_time}")
    return linearize(ldr, gamma) / np.float32(ldr.exposure_time)


@dataclass(frozen=True)
class TriangleWeights:
    """Piecewise-linear blending weights over LDR intensity.

    The shortest exposure is trusted for bright values (ramp up to 1 at
    ``knee``), the longest for dark values, the rest peak at ``knee``.
    """

    knee: float = 0.5

    def __call__(self, v, rank: str):
        return triangle_weight(v, rank, self.knee)

    @staticmethod
    def ranks(exposure_times: Sequence[float]) -> list:
        lo, hi = min(exposure_times), max(exposure_times)
        out = []
        for t in exposure_times:
            if lo == hi:
                out.append("middle")
            elif t == lo:
                out.append("shortest")
            elif t == hi:
                out.append("longest")
            else:
                out.append("middle")
        return out


def triangle_weight(v, rank: str, knee: float = 0.5):
    v = np.asarray(v, dtype=np.float64)
    if rank == "shortest":
        w = v / knee
    elif rank == "longest":
        w = (1.0 - v) / (1.0 - knee)
    elif rank == "middle":
        w = np.where(v <= knee, v / knee, (1.0 - v) / (1.0 - knee))
    else:
        raise ValueError(f"unknown exposure rank {rank!r}")
    return np.clip(w, 0.0, 1.0)


def merge_hdr(brackets: Sequence[LdrImage], weights: TriangleWeights | None = None,
              gamma: float = GAMMA) -> HdrImage:
    """Per-pixel, per-channel weighted average of exposure-compensated brackets.

    Where every weight is zero the bracket whose value lies furthest from
    both 0 and 1 is used alone.
    """
    if len(brackets) < 2:
        raise ValueError("merge needs at least two brackets")
    shape = brackets[0].shape
    for b in brackets:
        if b.shape != shape:
            raise ValueError(f"bracket shapes differ: {b.shape} vs {shape}")
    weights = weights or TriangleWeights()
    ranks = weights.ranks([b.exposure_time for b in brackets])

    num = np.zeros(shape, dtype=np.float64)
    den = np.zeros(shape, dtype=np.float64)
    comp = []
    for b, rank in zip(brackets, ranks):
        c = linearize(b.pixels.astype(np.float64), gamma) / b.exposure_time
        a = weights(b.pixels, rank)
        num += a * c
        den += a
        comp.append(c)
    out = np.divide(num, den, out=np.zeros_like(num), where=den > 0)
    if not (den > 0).all():
        conf = np.stack([np.minimum(b.pixels, 1.0 - b.pixels) for b in brackets])
        best = np.take_along_axis(np.stack(comp), conf.argmax(axis=0)[None], axis=0)[0]
        out = np.where(den > 0, out, best)
    return HdrImage(out.astype(np.float32))


def mu_law(h, mu: float = MU) -> np.ndarray:
    """``log(1 + mu*H) / log(1 + mu)`` with ``H`` clamped to at most 1."""
    h = np.asarray(_pixels(h), dtype=np.float64)
    if (h < 0).any():
        raise ValueError("mu-law input must be non-negative")
    return np.log1p(mu * np.minimum(h, 1.0)) / np.log1p(mu)


def mu_law_tensor(h: Tensor, mu: float = MU) -> Tensor:
    """Differentiable mu-law on a tensor (values clamped to [0, 1])."""
    hc = clamp(h, 0.0, 1.0)
    return log(hc * mu + 1.0) * (1.0 / np.log1p(mu))
