"""Loss, Adam, data augmentation and the training loop."""

from __future__ import annotations

import csv
from dataclasses import asdict, dataclass, field, replace
import logging
import math
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .data import Sample
from .hdr import mu_law_tensor
from .ops import ShapeError, resize_array
from .tensor import Tensor, as_tensor

log = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    """Training diverged (non-finite loss or activations)."""


# ---------------------------------------------------------------------------
# loss and optimizer
# ---------------------------------------------------------------------------

def mu_l1_loss(pred: Tensor, gt) -> Tensor:
    """Mean absolute difference between mu-law tonemapped images."""
    gt = gt if isinstance(gt, Tensor) else as_tensor(np.asarray(gt, dtype=pred.dtype))
    if pred.shape != gt.shape:
        raise ShapeError(f"prediction {pred.shape} and ground truth {gt.shape} differ")
    return (mu_law_tensor(pred) - mu_law_tensor(gt)).abs().mean()


@dataclass
class AdamState:
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params: Sequence[Tensor], grads: Sequence[np.ndarray | None], state: AdamState,
              lr: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> AdamState:
    """In-place Adam update with bias correction. ``None`` gradients count as zero."""
    state.step += 1
    t = state.step
    c1 = 1.0 - beta1 ** t
    c2 = 1.0 - beta2 ** t
    for i, (p, g) in enumerate(zip(params, grads)):
        if g is None:
            g = np.zeros_like(p.data)
        if g.shape != p.shape:
            raise ShapeError(f"gradient {g.shape} does not match parameter {p.shape}")
        m = state.m.get(i)
        if m is None:
            m = state.m[i] = np.zeros_like(p.data, dtype=np.float64)
            state.v[i] = np.zeros_like(p.data, dtype=np.float64)
        v = state.v[i]
        m *= beta1
        m += (1 - beta1) * g
        v *= beta2
        v += (1 - beta2) * np.square(g, dtype=np.float64)
        p.data = (p.data - lr * (m / c1) / (np.sqrt(v / c2) + eps)).astype(p.dtype)
    return state


class Adam:
    def __init__(self, params: Sequence[Tensor], lr: float = 1e-4, betas=(0.9, 0.999), eps: float = 1e-8):
        self.params = list(params)
        self.lr = lr
        self.betas = betas
        self.eps = eps
        self.state = AdamState()

    def step(self) -> None:
        adam_step(self.params, [p.grad for p in self.params], self.state, self.lr, *self.betas, self.eps)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None


# ---------------------------------------------------------------------------
# augmentation
# ---------------------------------------------------------------------------

SCALES = (1.0, 0.75, 0.5)


def _spatial(sample: Sample, fn: Callable[[np.ndarray], np.ndarray]) -> Sample:
    """Apply ``fn`` over the trailing (H, W) axes of every spatial array."""
    gt = None if sample.gt is None else np.ascontiguousarray(fn(sample.gt))
    return replace(sample, images=np.ascontiguousarray(fn(sample.images)),
                   voxels=np.ascontiguousarray(fn(sample.voxels)), gt=gt)


def hflip(sample: Sample) -> Sample:
    return _spatial(sample, lambda a: a[..., ::-1])


def vflip(sample: Sample) -> Sample:
    return _spatial(sample, lambda a: a[..., ::-1, :])


def rot90(sample: Sample) -> Sample:
    """Rotate clockwise: pixel ``(x, y)`` moves to ``(H - 1 - y, x)``."""
    return _spatial(sample, lambda a: np.rot90(a, k=-1, axes=(-2, -1)))


def crop(sample: Sample, top: int, left: int, size: int) -> Sample:
    h, w = sample.images.shape[-2:]
    if size > h or size > w:
        raise ValueError(f"crop {size} larger than image {h}x{w}")
    return _spatial(sample, lambda a: a[..., top:top + size, left:left + size])


def rescale(sample: Sample, factor: float) -> Sample:
    h, w = sample.images.shape[-2:]
    oh, ow = int(round(h * factor)), int(round(w * factor))
    return _spatial(sample, lambda a: resize_array(a.astype(np.float32), oh, ow))


def swap_channels(sample: Sample, perm) -> Sample:
    """Permute RGB in the brackets (gamma and linear halves alike) and the ground truth."""
    perm = list(perm)
    images = sample.images[:, perm + [3 + p for p in perm]]
    gt = None if sample.gt is None else sample.gt[perm]
    return replace(sample, images=np.ascontiguousarray(images), gt=gt)


def augment(sample: Sample, seed, crop_size: int | None = None, scales=SCALES) -> Sample:
    """Random scale, crop, clockwise rotation, flips and RGB permutation.

    The same geometric transform is applied to brackets, every voxel-grid
    bin and the ground truth. ``seed=None`` returns the sample unchanged.
    """
    if seed is None:
        return sample
    rng = np.random.default_rng(seed)
    h, w = sample.images.shape[-2:]
    size = crop_size or min(h, w)
    if size > h or size > w:
        raise ValueError(f"crop {size} larger than image {h}x{w}")
    usable = [s for s in scales if round(h * s) >= size and round(w * s) >= size]
    s = usable[rng.integers(len(usable))]
    if s != 1.0:
        sample = rescale(sample, s)
        h, w = sample.images.shape[-2:]
    top = int(rng.integers(h - size + 1))
    left = int(rng.integers(w - size + 1))
    sample = crop(sample, top, left, size)
    if rng.random() < 0.5:
        sample = rot90(sample)
    if rng.random() < 0.5:
        sample = hflip(sample)
    if rng.random() < 0.5:
        sample = vflip(sample)
    perm = rng.permutation(3)
    if (perm != np.arange(3)).any():
        sample = swap_channels(sample, perm)
    return sample


# ---------------------------------------------------------------------------
# training loop
# ---------------------------------------------------------------------------

@dataclass
class TrainConfig:
    lr: float = 1e-4
    lr_halving_period: int = 15
    batch_size: int = 2
    epochs: int = 60
    crop_size: int = 64
    seed: int = 0
    l1_weight: float = 1.0
    steps: int | None = None
    augment: bool = True

    def __post_init__(self):
        if not self.lr > 0:
            raise ValueError("lr must be positive")
        if self.crop_size % 4:
            raise ValueError("crop size must be divisible by 4")
        if self.batch_size < 1 or self.lr_halving_period < 1:
            raise ValueError("batch size and halving period must be >= 1")

    @classmethod
    def full_hdm(cls) -> "TrainConfig":
        """Schedule used for the synthetic-event HDR video benchmark."""
        return cls(lr=1e-4, lr_halving_period=15, batch_size=4, epochs=60, crop_size=256)

    @classmethod
    def full_ergb(cls) -> "TrainConfig":
        """Schedule used for the real bracket+event dataset."""
        return cls(lr=1e-4, lr_halving_period=300, batch_size=4, epochs=1500, crop_size=256)

    @classmethod
    def desk(cls, **kw) -> "TrainConfig":
        """Single-scene overfit protocol at 64x64."""
        base = dict(lr=1e-3, lr_halving_period=800, batch_size=1, epochs=2000, crop_size=64, augment=True)
        base.update(kw)
        return cls(**base)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        conv = {"lr": float, "l1_weight": float, "augment": lambda v: str(v).lower() in ("1", "true", "yes"),
                "steps": lambda v: None if str(v).lower() in ("", "none") else int(v)}
        names = set(cls.__dataclass_fields__)
        return cls(**{k: conv.get(k, int)(v) for k, v in d.items() if k in names})


def learning_rate(cfg: TrainConfig, epoch: int) -> float:
    """Initial rate halved once per completed ``lr_halving_period`` epochs."""
    return cfg.lr * 0.5 ** (epoch // cfg.lr_halving_period)


@dataclass
class TrainResult:
    losses: list
    lrs: list
    steps: int
    checkpoint: Path | None = None
    log_path: Path | None = None


def _dump_batch(out_dir, images, voxels, gt, step):
    path = Path(out_dir or ".") / f"nan_batch_step{step}.npz"
    np.savez_compressed(path, images=images, voxels=voxels, gt=gt)
    return path


def train(dataset: Sequence[Sample], model, cfg: TrainConfig, out_dir=None,
          callback: Callable | None = None) -> TrainResult:
    """Optimize ``model`` on ``dataset`` with mu-law L1 and Adam.

    One epoch is one pass over the shuffled dataset. The run length is
    ``cfg.steps`` if set, otherwise ``cfg.epochs`` epochs. With ``out_dir``
    the loss log (``loss.csv``) and final checkpoint (``model.ckpt``) are
    written there. ``callback(step, loss, model)`` runs after each step.
    """
    from .io import save_checkpoint

    if not dataset:
        raise ValueError("training needs at least one sample")
    rng = np.random.default_rng(cfg.seed)
    batch = min(cfg.batch_size, len(dataset))
    per_epoch = math.ceil(len(dataset) / batch)
    total = cfg.steps if cfg.steps is not None else cfg.epochs * per_epoch
    params = model.parameters()
    opt = Adam(params, cfg.lr)
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    log_fh = open(out / "loss.csv", "w", newline="") if out is not None else None
    writer = csv.writer(log_fh) if log_fh else None
    if writer:
        writer.writerow(["step", "epoch", "lr", "loss"])

    losses, lrs = [], []
    order = []
    try:
        for step in range(total):
            epoch = step // per_epoch
            if step % per_epoch == 0:
                order = list(rng.permutation(len(dataset)))
            idx = order[(step % per_epoch) * batch:(step % per_epoch + 1) * batch]
            items = []
            for i in idx:
                seed = int(rng.integers(2 ** 31)) if cfg.augment else None
                items.append(augment(dataset[i], seed, cfg.crop_size if cfg.augment else None))
            images = np.stack([s.images for s in items])
            voxels = np.stack([s.voxels for s in items])
            gt = np.stack([s.gt for s in items])

            opt.lr = learning_rate(cfg, epoch)
            try:
                pred = model.forward_arrays(images, voxels)
                loss = mu_l1_loss(pred, gt) * cfg.l1_weight
            except FloatingPointError as exc:
                path = _dump_batch(out, images, voxels, gt, step)
                raise TrainingError(f"non-finite activations at step {step} ({exc}); batch saved to {path}") from exc
            value = loss.item()
            if not math.isfinite(value):
                path = _dump_batch(out, images, voxels, gt, step)
                raise TrainingError(f"loss is {value} at step {step}; batch saved to {path}")
            opt.zero_grad()
            loss.backward()
            opt.step()
            losses.append(value)
            lrs.append(opt.lr)
            if writer:
                writer.writerow([step, epoch, repr(opt.lr), repr(value)])
            if callback is not None:
                callback(step, value, model)
            if step % 100 == 0:
                log.info("step %d epoch %d lr %.2e loss %.5f", step, epoch, opt.lr, value)
    finally:
        if log_fh:
            log_fh.close()
    ckpt = None
    if out is not None:
        ckpt = out / "model.ckpt"
        save_checkpoint(ckpt, model, {"steps": total, "train_seed": cfg.seed})
    return TrainResult(losses, lrs, total, ckpt, out / "loss.csv" if out is not None else None)
