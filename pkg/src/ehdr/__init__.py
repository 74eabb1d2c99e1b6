"""Event-guided multi-bracket HDR imaging.

Event and bracket synthesis, a deformable-alignment fusion network on a small
numpy autodiff engine, training and evaluation.
"""

from .data import Sample, SynthConfig, load_dataset, synthetic_sample
from .events import EventStream, VoxelGrid, chunk_stream, voxelize
from .hdr import HdrImage, LdrImage, merge_hdr, mu_law
from .metrics import evaluate, psnr_mu, ssim_mu
from .model import EhdrConfig, EhdrModel
from .simulator import BracketSpec, NoiseModel, SimulatorConfig, calibrate_threshold, simulate_events
from .tensor import Tensor, shadow64
from .training import TrainConfig, train

__version__ = "0.1.0"

__all__ = [
    "BracketSpec",
    "EhdrConfig",
    "EhdrModel",
    "EventStream",
    "HdrImage",
    "LdrImage",
    "NoiseModel",
    "Sample",
    "SimulatorConfig",
    "SynthConfig",
    "Tensor",
    "TrainConfig",
    "VoxelGrid",
    "calibrate_threshold",
    "chunk_stream",
    "evaluate",
    "load_dataset",
    "merge_hdr",
    "mu_law",
    "psnr_mu",
    "shadow64",
    "simulate_events",
    "ssim_mu",
    "synthetic_sample",
    "train",
    "voxelize",
]
