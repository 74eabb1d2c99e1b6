"""PSNR and SSIM on mu-law tonemapped images, and the evaluation harness."""

from __future__ import annotations

from dataclasses import dataclass, field
import csv
import logging
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
from scipy.ndimage import correlate1d

from .hdr import HdrImage, REC709, merge_hdr, mu_law

log = logging.getLogger(__name__)

PSNR_CAP = 99.0


def _hwc(img) -> np.ndarray:
    arr = img.pixels if isinstance(img, HdrImage) else np.asarray(img)
    return arr.astype(np.float64)


def _pair(pred, gt):
    p, g = _hwc(pred), _hwc(gt)
    if p.shape != g.shape:
        raise ValueError(f"shape mismatch: {p.shape} vs {g.shape}")
    return p, g


def psnr_mu(pred, gt) -> float:
    """PSNR of the mu-law images with peak 1; identical images give 99 dB."""
    p, g = _pair(pred, gt)
    mse = float(np.mean((mu_law(p) - mu_law(g)) ** 2))
    if mse == 0:
        return PSNR_CAP
    return min(PSNR_CAP, -10.0 * np.log10(mse))


def gaussian_window(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    x = np.arange(size) - (size - 1) / 2.0
    g = np.exp(-(x ** 2) / (2 * sigma ** 2))
    return g / g.sum()


def ssim_map(a: np.ndarray, b: np.ndarray, window: int = 11, sigma: float = 1.5,
             k1: float = 0.01, k2: float = 0.03, data_range: float = 1.0) -> np.ndarray:
    """Local SSIM of two single-channel images over the valid region."""
    if min(a.shape) < window:
        raise ValueError(f"image {a.shape} smaller than the {window}x{window} window")
    g = gaussian_window(window, sigma)
    r = window // 2

    def blur(x):
        y = correlate1d(correlate1d(x, g, axis=0, mode="constant"), g, axis=1, mode="constant")
        return y[r:x.shape[0] - r, r:x.shape[1] - r]

    c1, c2 = (k1 * data_range) ** 2, (k2 * data_range) ** 2
    mu_a, mu_b = blur(a), blur(b)
    var_a = blur(a * a) - mu_a ** 2
    var_b = blur(b * b) - mu_b ** 2
    cov = blur(a * b) - mu_a * mu_b
    return ((2 * mu_a * mu_b + c1) * (2 * cov + c2)) / ((mu_a ** 2 + mu_b ** 2 + c1) * (var_a + var_b + c2))


def ssim_mu(pred, gt, window: int = 11, sigma: float = 1.5, k1: float = 0.01, k2: float = 0.03) -> float:
    """Mean SSIM of the Rec. 709 luminance of the mu-law images."""
    p, g = _pair(pred, gt)
    tp, tg = mu_law(p), mu_law(g)
    if tp.ndim == 3:
        tp, tg = tp @ REC709, tg @ REC709
    return float(ssim_map(tp, tg, window, sigma, k1, k2).mean())


def crop_border(img, border: int) -> np.ndarray:
    arr = _hwc(img)
    if border <= 0:
        return arr
    if 2 * border >= min(arr.shape[:2]):
        raise ValueError(f"border {border} leaves nothing of a {arr.shape[:2]} image")
    return arr[border:-border, border:-border]


@dataclass
class EvalReport:
    rows: list = field(default_factory=list)  # (name, psnr, ssim)

    @property
    def mean_psnr(self) -> float:
        return float(np.mean([r[1] for r in self.rows])) if self.rows else float("nan")

    @property
    def mean_ssim(self) -> float:
        return float(np.mean([r[2] for r in self.rows])) if self.rows else float("nan")

    def to_text(self) -> str:
        lines = [f"{n}: PSNR-mu {p:.3f} dB  SSIM-mu {s:.5f}" for n, p, s in self.rows]
        lines.append(f"mean over {len(self.rows)} samples: PSNR-mu {self.mean_psnr:.3f} dB  SSIM-mu {self.mean_ssim:.5f}")
        return "\n".join(lines)

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["sample", "psnr_mu", "ssim_mu"])
            for n, p, s in self.rows:
                w.writerow([n, f"{p:.6f}", f"{s:.6f}"])
            w.writerow(["mean", f"{self.mean_psnr:.6f}", f"{self.mean_ssim:.6f}"])


def evaluate_pairs(pairs: Sequence[tuple], border_crop: int = 10) -> EvalReport:
    """Score ``(name, pred, gt)`` triples; entries without ground truth are skipped."""
    report = EvalReport()
    for name, pred, gt in pairs:
        if gt is None:
            log.warning("sample %s has no ground truth; skipped", name)
            continue
        p, g = crop_border(pred, border_crop), crop_border(gt, border_crop)
        report.rows.append((name, psnr_mu(p, g), ssim_mu(p, g)))
    return report


def naive_merge(sample) -> HdrImage:
    """Triangle-weighted merge of the sample's brackets, without any alignment."""
    return merge_hdr(sample.brackets)


def predict(model, sample) -> np.ndarray:
    """Model output for one sample as ``(H, W, 3)``."""
    from .tensor import no_grad

    with no_grad():
        out = model.forward_arrays(sample.images[None], sample.voxels[None])
    return out.data[0].transpose(1, 2, 0)


def evaluate(model, dataset, border_crop: int = 10) -> EvalReport:
    """Evaluate a model (instance, checkpoint path, or ``sample -> (H, W, 3)``
    callable) on samples carrying ground truth."""
    if isinstance(model, (str, Path)):
        from .io import load_checkpoint

        model, _ = load_checkpoint(model)
    fn: Callable = model if callable(model) and not hasattr(model, "forward_arrays") else (lambda s: predict(model, s))
    pairs = []
    for i, s in enumerate(dataset):
        gt = None if s.gt is None else s.gt.transpose(1, 2, 0)
        pairs.append((s.name or f"sample{i}", fn(s) if gt is not None else None, gt))
    return evaluate_pairs(pairs, border_crop)
