"""Training/evaluation samples: synthesis from procedural scenes and
on-disk sample directories.

A sample directory holds ``bracket_0.png`` .. ``bracket_2.png`` (each with
a ``.txt`` sidecar, time order -1, 0, +1), ``events.ehev`` and, when
available, ``gt.pfm`` with the normalized ground truth.
"""

from __future__ import annotations

from dataclasses import dataclass, field
import logging
from pathlib import Path

import numpy as np

from .events import EventStream
from .hdr import HdrImage, LdrImage
from .model import prepare_inputs
from .simulator import (
    BracketSpec,
    DynamicScene,
    NoiseModel,
    SceneMotion,
    SimulatorConfig,
    calibrate_threshold,
    make_dynamic_scene,
    simulate_events,
    synthesize_bracket,
)

log = logging.getLogger(__name__)


@dataclass
class Sample:
    """Network-ready arrays plus the raw data they came from.

    ``images`` is ``(3, 6, H, W)``, ``voxels`` ``(2, K, bins, H, W)`` and
    ``gt`` ``(3, H, W)`` normalized radiance (or ``None``).
    """

    images: np.ndarray
    voxels: np.ndarray
    gt: np.ndarray | None = None
    name: str = ""
    brackets: list | None = field(default=None, repr=False)
    events: EventStream | None = field(default=None, repr=False)
    bracket_times: tuple | None = None

    @property
    def gt_image(self) -> HdrImage | None:
        return None if self.gt is None else HdrImage(self.gt.transpose(1, 2, 0))

    def without_events(self) -> "Sample":
        return Sample(self.images, np.zeros_like(self.voxels), self.gt, self.name,
                      self.brackets, None, self.bracket_times)


@dataclass(frozen=True)
class SynthConfig:
    """How a procedural scene becomes a sample.

    With ``contrast_threshold=None`` the threshold is calibrated per scene
    so the simulator fires ``target_rate`` events per pixel per frame.
    """

    size: int = 64
    fstops: tuple = (-3, 0, 3)
    frame_skip: int = 2
    substeps: int = 4
    contrast_threshold: float | None = None
    target_rate: float = 0.25
    threshold_range: tuple = (0.02, 4.0)
    log_eps: float = 1e-3
    chunks_per_window: int = 4
    voxel_bins: int = 5
    noise: NoiseModel = NoiseModel()


def scene_events(scene: DynamicScene, norm: float, cfg: SynthConfig) -> tuple[EventStream, float]:
    """Simulate events on densely resampled, normalized renders of ``scene``."""
    frames, ts = scene.dense_frames(cfg.substeps)
    frames = frames * np.float32(norm)
    c = cfg.contrast_threshold
    if c is None:
        h, w = frames.shape[1:3]
        c = calibrate_threshold(frames, ts, cfg.target_rate * h * w, *cfg.threshold_range,
                                log_eps=cfg.log_eps,
                                frame_interval=float(scene.timestamps[1] - scene.timestamps[0]))
    return simulate_events(frames, ts, SimulatorConfig(c, cfg.log_eps, cfg.frame_skip)), c


def sample_from_scene(scene: DynamicScene, cfg: SynthConfig = SynthConfig(), seed: int = 0,
                      name: str = "") -> Sample:
    spec = BracketSpec(cfg.fstops)
    if len(spec.fstops) != 3 or spec.reference != 1:
        raise ValueError("samples need three brackets with the reference in the middle")
    k = spec.scale_for(scene.gt)
    norm = k * 2.0 ** min(spec.fstops)
    events, _ = scene_events(scene, norm, cfg)
    times = tuple(int(t) for t in scene.bracket_times)
    rng = np.random.default_rng(seed)
    brackets = [
        synthesize_bracket(scene.frames[i], f, spec, cfg.noise, rng.integers(2 ** 31), scale=k, timestamp=t)
        for i, f, t in zip(scene.bracket_indices, spec.fstops, times)
    ]
    images, voxels = prepare_inputs(brackets, events, times, cfg.chunks_per_window, cfg.voxel_bins)
    gt = spec.normalize(scene.gt, k).pixels.transpose(2, 0, 1).copy()
    return Sample(images, voxels, gt, name, brackets, events, times)


def synthetic_sample(seed: int, cfg: SynthConfig = SynthConfig(), motion: SceneMotion | None = None) -> Sample:
    """Procedural scene ``seed`` turned into a sample."""
    scene = make_dynamic_scene(seed, cfg.size, motion, cfg.frame_skip)
    return sample_from_scene(scene, cfg, seed, name=f"scene{seed:04d}")


def save_sample(sample: Sample, directory) -> Path:
    from .io import write_events, write_ldr, write_pfm

    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    if sample.brackets is None:
        raise ValueError("sample has no raw brackets to save")
    for i, b in enumerate(sample.brackets):
        write_ldr(d / f"bracket_{i}.png", b)
    h, w = sample.images.shape[-2:]
    write_events(d / "events.ehev", sample.events if sample.events is not None else EventStream.empty(w, h))
    if sample.gt is not None:
        write_pfm(d / "gt.pfm", sample.gt.transpose(1, 2, 0))
    return d


def load_sample(directory, chunks: int = 4, bins: int = 5) -> Sample:
    from .io import read_events, read_ldr, read_pfm

    d = Path(directory)
    brackets: list[LdrImage] = [read_ldr(d / f"bracket_{i}.png") for i in range(3)]
    ev_path = d / "events.ehev"
    if not ev_path.exists() and (d / "events.csv").exists():
        ev_path = d / "events.csv"
    events = read_events(ev_path) if ev_path.exists() else None
    times = tuple(b.timestamp for b in brackets)
    images, voxels = prepare_inputs(brackets, events, times, chunks, bins)
    gt = None
    if (d / "gt.pfm").exists():
        gt = read_pfm(d / "gt.pfm").transpose(2, 0, 1).copy()
    return Sample(images, voxels, gt, d.name, brackets, events, times)


def load_dataset(root, chunks: int = 4, bins: int = 5) -> list[Sample]:
    """Every sub-directory of ``root`` containing ``bracket_0.png``, sorted by name."""
    root = Path(root)
    dirs = sorted(p for p in root.iterdir() if (p / "bracket_0.png").exists()) if root.is_dir() else []
    if (root / "bracket_0.png").exists():
        dirs = [root]
    return [load_sample(p, chunks, bins) for p in dirs]
