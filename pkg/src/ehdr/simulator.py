"""Event and LDR-bracket synthesis from HDR frame sequences.

Events follow the ideal log-intensity crossing model: each pixel keeps a
reference level and fires one event every time its log luminance moves a
full contrast threshold away from it, with timestamps interpolated linearly
between frames. Brackets are instantaneous exposures with read and shot
noise, a gamma 2.2 response and 8-bit quantization.
"""

from __future__ import annotations

from dataclasses import dataclass, field
import logging

import numpy as np

from . import kernels
from .events import EventStream, make_events, sort_events
from .hdr import GAMMA, HdrImage, LdrImage, REC709, luminance

log = logging.getLogger(__name__)

FRAME_INTERVAL_US = 1000


class CalibrationError(RuntimeError):
    """The requested event rate cannot be bracketed by the threshold range."""


@dataclass(frozen=True)
class SimulatorConfig:
    contrast_threshold: float = 0.2
    log_eps: float = 1e-3
    frame_skip: int = 2

    def __post_init__(self):
        if not self.contrast_threshold > 0:
            raise ValueError(f"contrast threshold must be positive, got {self.contrast_threshold}")
        if not self.log_eps > 0:
            raise ValueError(f"log_eps must be positive, got {self.log_eps}")
        if self.frame_skip < 0:
            raise ValueError("frame_skip must be >= 0")


@dataclass(frozen=True)
class NoiseModel:
    read_noise_sigma: float = 0.01
    shot_noise_scale: float = 0.005
    quantization_bits: int = 8

    def __post_init__(self):
        if min(self.read_noise_sigma, self.shot_noise_scale) < 0 or self.quantization_bits < 1:
            raise ValueError("noise parameters must be non-negative")

    @classmethod
    def noiseless(cls, bits: int = 8) -> "NoiseModel":
        return cls(0.0, 0.0, bits)

    @property
    def levels(self) -> int:
        return 2 ** self.quantization_bits - 1


@dataclass(frozen=True)
class BracketSpec:
    """Exposure stack layout.

    ``exposure_scale`` maps scene radiance to the reference bracket's
    linear sensor value; when ``None`` it is chosen per image so the median
    luminance lands at 0.18.
    """

    fstops: tuple = (-3, 0, 3)
    exposure_scale: float | None = None

    def __post_init__(self):
        object.__setattr__(self, "fstops", tuple(int(f) for f in self.fstops))
        if sum(f == 0 for f in self.fstops) != 1:
            raise ValueError(f"exactly one 0 f-stop reference bracket required, got {self.fstops}")

    @property
    def reference(self) -> int:
        return self.fstops.index(0)

    def exposure_time(self, fstop: int) -> float:
        """Exposure relative to the shortest bracket of the stack."""
        return float(2.0 ** (fstop - min(self.fstops)))

    def scale_for(self, hdr) -> float:
        if self.exposure_scale is not None:
            return float(self.exposure_scale)
        return reference_exposure_scale(hdr)

    def normalize(self, hdr, scale: float | None = None) -> HdrImage:
        """Radiance in units of the shortest bracket's saturation level.

        A value of 1 is the brightest radiance the stack can record; the
        merged exposure-compensated brackets live in the same units.
        """
        px = hdr.pixels if isinstance(hdr, HdrImage) else np.asarray(hdr)
        k = self.scale_for(px) if scale is None else scale
        return HdrImage(px * np.float32(k * 2.0 ** min(self.fstops)))


def reference_exposure_scale(hdr, anchor: float = 0.18) -> float:
    """Scale that maps the median luminance of ``hdr`` to ``anchor``."""
    med = float(np.median(luminance(hdr)))
    if med <= 0:
        raise ValueError("median luminance is zero; cannot anchor the exposure")
    return anchor / med


def synthesize_bracket(hdr, fstop: int, spec: BracketSpec, noise: NoiseModel,
                       rng_seed=None, scale: float | None = None,
                       timestamp: int | None = None) -> LdrImage:
    """Render one LDR exposure of ``hdr``.

    The linear value is ``radiance * scale * 2**fstop``; noise is added, the
    result clipped to [0, 1], gamma encoded and quantized.
    """
    px = hdr.pixels if isinstance(hdr, HdrImage) else np.asarray(hdr, dtype=np.float32)
    if (px < 0).any():
        raise ValueError("HDR input must be non-negative")
    k = spec.scale_for(px) if scale is None else scale
    lin = px.astype(np.float64) * (k * 2.0 ** fstop)
    rng = np.random.default_rng(rng_seed)
    if noise.shot_noise_scale > 0 or noise.read_noise_sigma > 0:
        var = noise.shot_noise_scale * lin + noise.read_noise_sigma ** 2
        lin = lin + rng.standard_normal(lin.shape) * np.sqrt(var)
    v = np.clip(lin, 0.0, 1.0) ** (1.0 / GAMMA)
    q = np.round(v * noise.levels) / noise.levels
    return LdrImage(q.astype(np.float32), spec.exposure_time(fstop), fstop, timestamp)


def _frame_stack(frames, timestamps):
    arr = np.stack([f.pixels if isinstance(f, HdrImage) else np.asarray(f) for f in frames])
    ts = np.asarray(timestamps, dtype=np.float64)
    if arr.shape[0] < 2:
        raise ValueError("need at least two frames")
    if ts.shape != (arr.shape[0],):
        raise ValueError("one timestamp per frame required")
    if np.any(np.diff(ts) <= 0):
        raise ValueError("timestamps must be strictly increasing")
    if not np.isfinite(arr).all():
        raise ValueError("frames contain non-finite values")
    return arr, ts


def simulate_events(frames, timestamps, cfg: SimulatorConfig = SimulatorConfig()) -> EventStream:
    """Ideal event camera driven by a sequence of HDR frames.

    Args:
        frames: sequence of ``HdrImage`` or ``(H, W, 3)`` arrays, or a stacked
            ``(T, H, W, 3)`` array, in normalized intensity units.
        timestamps: ``T`` strictly increasing times in microseconds.
        cfg: threshold and log stabilizer.
    """
    arr, ts = _frame_stack(list(frames), timestamps)
    _, h, w = arr.shape[:3]
    lum = arr.astype(np.float64) @ REC709 if arr.ndim == 4 else arr.astype(np.float64)
    logs = np.log(np.maximum(lum, 0.0) + cfg.log_eps).reshape(len(ts), h * w)
    t, pix, pol = kernels.simulate_pixels(logs, ts, cfg.contrast_threshold)
    ev = make_events(t.astype(np.uint64), pix % w, pix // w, pol)
    return EventStream(sort_events(ev), w, h)


def count_events(frames, timestamps, cfg: SimulatorConfig) -> int:
    return len(simulate_events(frames, timestamps, cfg))


def calibrate_threshold(frames, timestamps, target_rate: float, lo: float, hi: float,
                        log_eps: float = 1e-3, frame_interval: float = FRAME_INTERVAL_US,
                        rel_tol: float = 0.05, max_iter: int = 32,
                        history: list | None = None) -> float:
    """Bisect the contrast threshold until the event rate matches ``target_rate``.

    The rate is events per ``frame_interval`` over the whole sequence.
    Bisection is geometric since the rate falls off roughly like ``1/C``.
    ``history``, when given, receives one ``(C, rate)`` pair per evaluation.
    """
    arr, ts = _frame_stack(list(frames), timestamps)
    n_int = (ts[-1] - ts[0]) / frame_interval
    if not 0 < lo < hi:
        raise ValueError("need 0 < lo < hi")

    def rate(c):
        r = count_events(arr, ts, SimulatorConfig(c, log_eps)) / n_int
        if history is not None:
            history.append((c, r))
        return r

    if target_rate <= 0:
        raise CalibrationError("target rate must be positive")
    r_lo, r_hi = rate(lo), rate(hi)
    if not r_lo >= target_rate >= r_hi:
        raise CalibrationError(
            f"target {target_rate:g} outside achievable range [{r_hi:g}, {r_lo:g}] for C in [{lo}, {hi}]"
        )
    for c, r in ((lo, r_lo), (hi, r_hi)):
        if abs(r - target_rate) <= rel_tol * target_rate:
            return c
    mid = lo
    for _ in range(max_iter):
        mid = float(np.sqrt(lo * hi))
        r = rate(mid)
        if abs(r - target_rate) <= rel_tol * target_rate:
            return mid
        if r > target_rate:
            lo = mid
        else:
            hi = mid
    log.warning("calibration stopped after %d iterations at C=%.5f", max_iter, mid)
    return mid


# ---------------------------------------------------------------------------
# procedural dynamic scene
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SceneMotion:
    """Per-frame translations in pixels (x, y).

    The camera motion shifts the whole image; object motion is added on top.
    """

    camera: tuple = (1.0, 0.0)
    disc: tuple = (1.0, 0.5)
    square: tuple = (-0.5, 1.0)

    @classmethod
    def static(cls) -> "SceneMotion":
        return cls((0.0, 0.0), (0.0, 0.0), (0.0, 0.0))


@dataclass
class DynamicScene:
    """Analytic HDR scene with moving objects.

    ``frames`` are renders at ``timestamps``; ``gt`` is the render at the
    reference bracket time. Brackets are taken at ``bracket_indices`` in
    time order (short, reference, long).
    """

    frames: np.ndarray
    timestamps: np.ndarray
    bracket_indices: tuple
    reference_index: int
    gt: HdrImage
    params: dict = field(repr=False, default_factory=dict)

    @property
    def bracket_times(self) -> np.ndarray:
        return self.timestamps[list(self.bracket_indices)]

    def render(self, t_us: float) -> np.ndarray:
        """Render at an arbitrary time (e.g. for denser event simulation)."""
        return _render(self.params, t_us)

    def dense_frames(self, substeps: int) -> tuple[np.ndarray, np.ndarray]:
        """Renders at ``substeps`` times per frame interval across the sequence."""
        t0, t1 = int(self.timestamps[0]), int(self.timestamps[-1])
        n = (len(self.timestamps) - 1) * substeps
        ts = np.round(np.linspace(t0, t1, n + 1)).astype(np.int64)
        return np.stack([self.render(t) for t in ts]), ts


def _smoothstep_edge(d, width=0.75):
    """Soft inside indicator for a signed distance ``d`` (negative inside)."""
    return 1.0 / (1.0 + np.exp(np.clip(d / width, -50, 50)))


def _render(p: dict, t_us: float) -> np.ndarray:
    h, w = p["size"]
    frame = (t_us - p["t_ref"]) / p["frame_interval"]
    v, u = np.mgrid[0:h, 0:w].astype(np.float64) + 0.5
    cam = np.asarray(p["camera"]) * frame
    # background scrolls with the camera
    bu, bv = u - cam[0], v - cam[1]
    proj = (bu * np.cos(p["theta"]) + bv * np.sin(p["theta"]) - p["proj_min"]) / p["proj_span"]
    tex = 1.0 + 0.35 * np.sin(2 * np.pi * bu / p["lam"][0] + p["phi"][0]) * np.sin(2 * np.pi * bv / p["lam"][1] + p["phi"][1])
    bg = 10.0 ** (p["log_lo"] + p["decades"] * proj) * tex
    img = bg[..., None] * p["bg_tint"]

    dc = np.asarray(p["disc_center"]) + cam + np.asarray(p["disc"]) * frame
    r = np.hypot(u - dc[0], v - dc[1])
    rings = 1.0 + 0.3 * np.cos(2 * np.pi * r / p["ring_period"])
    a = _smoothstep_edge(r - p["radius"])[..., None]
    img = img * (1 - a) + a * (p["disc_level"] * rings)[..., None] * p["disc_tint"]

    sc = np.asarray(p["square_center"]) + cam + np.asarray(p["square"]) * frame
    dsq = np.maximum(np.abs(u - sc[0]), np.abs(v - sc[1])) - p["half_side"]
    checker = 1.0 + 0.5 * np.sin(2 * np.pi * (u - sc[0]) / 5.0) * np.sin(2 * np.pi * (v - sc[1]) / 5.0)
    a = _smoothstep_edge(dsq)[..., None]
    img = img * (1 - a) + a * (p["square_level"] * checker)[..., None] * p["square_tint"]
    return img.astype(np.float32)


def make_dynamic_scene(seed: int, size=(64, 64), motion: SceneMotion | None = None,
                       frame_skip: int = 2, frame_interval_us: int = FRAME_INTERVAL_US,
                       decades: float = 4.4) -> DynamicScene:
    """Procedural HDR scene: log-gradient background, a bright textured disc
    and a dark textured square, all translating at constant velocity.

    Three brackets are placed ``frame_skip + 1`` frames apart; the middle
    one is the reference and ``gt`` is its exact render.
    """
    if isinstance(size, int):
        size = (size, size)
    h, w = size
    if h < 32 or w < 32:
        raise ValueError(f"scene must be at least 32x32, got {size}")
    motion = motion or SceneMotion()
    rng = np.random.default_rng(seed)
    step = frame_skip + 1
    n_frames = 2 * step + 1
    ref = step
    theta = rng.uniform(0, 2 * np.pi)
    corners = np.array([[0, 0], [w, 0], [0, h], [w, h]], dtype=np.float64)
    proj = corners @ np.array([np.cos(theta), np.sin(theta)])
    p = {
        "size": (h, w),
        "t_ref": ref * frame_interval_us,
        "frame_interval": float(frame_interval_us),
        "camera": tuple(motion.camera),
        "disc": tuple(motion.disc),
        "square": tuple(motion.square),
        "theta": theta,
        "proj_min": proj.min(),
        "proj_span": proj.max() - proj.min(),
        "lam": rng.uniform(6.0, 12.0, 2),
        "phi": rng.uniform(0, 2 * np.pi, 2),
        "log_lo": -decades,
        "decades": decades,
        "bg_tint": rng.uniform(0.7, 1.0, 3),
        "radius": rng.uniform(0.12, 0.18) * min(h, w),
        "ring_period": rng.uniform(4.0, 7.0),
        "disc_tint": np.array([1.0, rng.uniform(0.75, 0.95), rng.uniform(0.5, 0.8)]),
        "half_side": rng.uniform(0.1, 0.14) * min(h, w),
        "square_tint": rng.uniform(0.6, 1.0, 3),
    }
    p["disc_center"] = (rng.uniform(0.3, 0.7) * w, rng.uniform(0.3, 0.7) * h)
    p["square_center"] = (rng.uniform(0.2, 0.8) * w, rng.uniform(0.2, 0.8) * h)
    # object radiance relative to the median-anchored exposure: the disc
    # saturates the reference but not the shortest bracket, the square sits
    # near the noise floor of the reference
    median_bg = 10.0 ** (-decades + decades * 0.5)
    unit = median_bg / 0.18
    p["disc_level"] = unit * 8.0 * rng.uniform(0.3, 0.6)
    p["square_level"] = unit * rng.uniform(0.002, 0.004)

    timestamps = np.arange(n_frames, dtype=np.int64) * frame_interval_us
    frames = np.stack([_render(p, t) for t in timestamps])
    brackets = (0, ref, 2 * step)
    return DynamicScene(frames, timestamps, brackets, ref, HdrImage(frames[ref]), p)
