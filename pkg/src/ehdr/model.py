"""The event-guided multi-bracket HDR network.

Data flow for one sample (``C`` = base channels)::

    brackets (-1, 0, +1) --image encoder--> 3 pyramids (C @ 1, 1/2, 1/4)
    event chunks 0->-1, 0->+1 --event encoder--> per-chunk pyramids
    per non-reference bracket, coarse to fine:
        ConvLSTM over chunk features -> integrated event features
        [ref, nonref, events, 2*up(coarser offsets)] -> offsets + masks
        modulated deformable conv on the non-reference features
    pairwise attention merge -> spatial attention -> 10 res blocks
        + reference skip -> conv -> sigmoid -> normalized HDR

Both non-reference directions share the alignment weights and are run as
one batch, as are the three images and all event chunks.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, fields
import logging
import math
from typing import Sequence

import numpy as np

from . import ops
from .events import EventStream, chunk_stream, voxelize
from .hdr import HdrImage, LdrImage, exposure_compensate
from .nn import ConvLSTMCell, DownBlock, Module, ResBlock, init_conv
from .tensor import Tensor, as_tensor, concat, getitem, no_grad, reshape, split, transpose

log = logging.getLogger(__name__)


@dataclass
class EhdrConfig:
    base_channels: int = 8
    levels: int = 3
    voxel_bins: int = 5
    kernel_size: int = 3
    deform_groups: int = 1
    encoder_blocks: int = 5
    recon_blocks: int = 10
    leaky_slope: float = 0.1
    chunks_per_window: int = 4
    use_events: bool = True
    seed: int = 0

    def __post_init__(self):
        if self.base_channels < 4:
            raise ValueError("base_channels must be >= 4")
        if self.levels != 3:
            raise ValueError("the alignment pyramid has exactly 3 levels")
        if self.kernel_size % 2 != 1:
            raise ValueError("kernel size must be odd")
        if self.deform_groups != 1:
            raise ValueError("only one deformable group is supported")

    @property
    def taps(self) -> int:
        return self.kernel_size ** 2

    @classmethod
    def full_scale(cls, **kw) -> "EhdrConfig":
        return cls(base_channels=64, **kw)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "EhdrConfig":
        kinds = {f.name: f.type for f in fields(cls)}
        out = {}
        for k, v in d.items():
            if k not in kinds:
                continue
            if kinds[k] in ("bool", bool):
                out[k] = v if isinstance(v, bool) else str(v).lower() in ("1", "true", "yes")
            elif kinds[k] in ("float", float):
                out[k] = float(v)
            else:
                out[k] = int(v)
        return cls(**out)


@dataclass
class DeformField:
    """Per-tap offsets ``(N, 2K, H, W)`` ordered (dx, dy) and masks ``(N, K, H, W)``."""

    offsets: Tensor
    masks: Tensor


def _lrelu(x, slope=0.1):
    return ops.leaky_relu(x, slope)


class Encoder(Module):
    """conv -> LeakyReLU -> residual blocks (level 1) -> two down blocks (levels 2, 3)."""

    def __init__(self, rng, cin, ch, blocks=5, slope=0.1):
        self.conv_first = init_conv(rng, cin, ch)
        self.resblocks = [ResBlock(rng, ch) for _ in range(blocks)]
        self.down = [DownBlock(rng, ch, slope) for _ in range(2)]
        self.slope = slope

    def forward(self, x: Tensor) -> list[Tensor]:
        f = _lrelu(ops.conv2d(x, self.conv_first), self.slope)
        for blk in self.resblocks:
            f = blk(f)
        pyr = [f]
        for d in self.down:
            pyr.append(d(pyr[-1]))
        return pyr


class DeformPredictor(Module):
    """3 x (conv, LeakyReLU) then a zero-initialized conv emitting 3K channels."""

    def __init__(self, rng, ch, taps, with_coarser, slope=0.1):
        cin = 3 * ch + (2 * taps if with_coarser else 0)
        self.conv1 = init_conv(rng, cin, ch)
        self.conv2 = init_conv(rng, ch, ch)
        self.conv3 = init_conv(rng, ch, ch)
        self.emit = init_conv(rng, ch, 3 * taps, zero=True)
        self.with_coarser = with_coarser
        self.taps = taps
        self.slope = slope

    def forward(self, f_ref, f_nonref, f_events, coarser: DeformField | None) -> DeformField:
        if not (f_ref.shape == f_nonref.shape == f_events.shape):
            raise ops.ShapeError(
                f"feature shapes differ: ref {f_ref.shape}, nonref {f_nonref.shape}, events {f_events.shape}"
            )
        inputs = [f_ref, f_nonref, f_events]
        up = None
        if self.with_coarser:
            if coarser is not None:
                up = ops.upsample_bilinear(coarser.offsets, 2) * 2.0
                inputs.append(up)
            else:
                n, _, h, w = f_ref.shape
                inputs.append(Tensor(np.zeros((n, 2 * self.taps, h, w), dtype=f_ref.dtype)))
        elif coarser is not None:
            raise ValueError("the coarsest level takes no coarser field")
        x = concat(inputs, axis=1)
        x = _lrelu(ops.conv2d(x, self.conv1), self.slope)
        x = _lrelu(ops.conv2d(x, self.conv2), self.slope)
        x = _lrelu(ops.conv2d(x, self.conv3), self.slope)
        out = ops.conv2d(x, self.emit)
        residual, mask_logits = split(out, [2 * self.taps, self.taps], axis=1)
        offsets = residual + up if up is not None else residual
        return DeformField(offsets, ops.sigmoid(mask_logits))


class AlignLevel(Module):
    def __init__(self, rng, ch, taps, k, coarsest, slope=0.1):
        self.lstm = ConvLSTMCell(rng, ch, ch)
        self.predictor = DeformPredictor(rng, ch, taps, with_coarser=not coarsest, slope=slope)
        self.dconv = init_conv(rng, ch, ch, k)
        self.fuse = None if coarsest else init_conv(rng, 2 * ch, ch)


class Alignment(Module):
    """Event-guided pyramid, cascading deformable alignment.

    ``levels[0]`` is full resolution, ``levels[2]`` the quarter scale.
    Aligned features of a coarser level are upsampled and fused into the
    next finer level, so every level contributes to the output.
    """

    def __init__(self, rng, ch, k=3, slope=0.1):
        taps = k * k
        self.levels = [AlignLevel(rng, ch, taps, k, coarsest=(i == 2), slope=slope) for i in range(3)]
        self.slope = slope

    def integrate(self, chunk_feats: Sequence[Tensor], level: int) -> Tensor:
        """Run the level's ConvLSTM over per-chunk features; return the final hidden state."""
        return self.levels[level].lstm.run(list(chunk_feats))

    def forward(self, nonref: list[Tensor], ref: list[Tensor], event_chunks: list[list[Tensor]],
                propagate: bool = True, fields: list[DeformField] | None = None):
        """Align ``nonref`` onto ``ref``.

        Args:
            nonref, ref: pyramids (level 1 first).
            event_chunks: one pyramid per chunk, ordered away from the reference.
            propagate: pass coarser offsets to finer levels.
            fields: optional fixed deform fields per level (bypasses prediction).

        Returns:
            aligned level-1 features and the per-level deform fields.
        """
        if not event_chunks:
            raise ValueError("alignment needs at least one event chunk")
        used = [None, None, None]
        coarser = None
        aligned = None
        for lvl in (2, 1, 0):
            mod = self.levels[lvl]
            if fields is not None:
                fld = fields[lvl]
            else:
                ev = self.integrate([c[lvl] for c in event_chunks], lvl)
                fld = mod.predictor(ref[lvl], nonref[lvl], ev, coarser if propagate else None)
            used[lvl] = fld
            feat = ops.deform_conv2d(nonref[lvl], fld.offsets, fld.masks, mod.dconv)
            if aligned is not None:
                feat = ops.conv2d(concat([feat, ops.upsample_bilinear(aligned, 2)], axis=1), mod.fuse)
            aligned = _lrelu(feat, self.slope) if lvl > 0 else feat
            coarser = fld
        return aligned, used


class AttentionBlock(Module):
    def __init__(self, rng, ch, slope=0.1):
        self.conv1 = init_conv(rng, 2 * ch, ch)
        self.conv2 = init_conv(rng, ch, ch)
        self.slope = slope

    def forward(self, f, f_ref):
        x = _lrelu(ops.conv2d(concat([f, f_ref], axis=1), self.conv1), self.slope)
        return ops.sigmoid(ops.conv2d(x, self.conv2))


class PairwiseAttention(Module):
    """Per-pixel, per-channel weights for (ref, -1, +1) against the reference,
    then a normalized weighted average."""

    eps = 1e-6

    def __init__(self, rng, ch, slope=0.1):
        self.blocks = [AttentionBlock(rng, ch, slope) for _ in range(3)]

    def weights(self, ref, minus, plus) -> list[Tensor]:
        return [blk(f, ref) for blk, f in zip(self.blocks, (ref, minus, plus))]

    def forward(self, ref, minus, plus):
        if not (ref.shape == minus.shape == plus.shape):
            raise ops.ShapeError(f"attention inputs differ: {ref.shape}, {minus.shape}, {plus.shape}")
        a = self.weights(ref, minus, plus)
        num = a[0] * ref + a[1] * minus + a[2] * plus
        den = a[0] + a[1] + a[2] + self.eps
        return num / den


class SpatialAttention(Module):
    """Three-scale sigmoid mask; the mask modulates the features and a conv
    residual is added on top."""

    def __init__(self, rng, ch, slope=0.1):
        self.full = init_conv(rng, ch, ch)
        self.down1 = init_conv(rng, ch, ch, stride=2)
        self.half = init_conv(rng, ch, ch)
        self.down2 = init_conv(rng, ch, ch, stride=2)
        self.quarter = init_conv(rng, ch, ch)
        self.out = init_conv(rng, ch, ch)
        self.slope = slope

    def mask(self, x: Tensor) -> Tensor:
        d1 = _lrelu(ops.conv2d(x, self.down1), self.slope)
        d2 = _lrelu(ops.conv2d(d1, self.down2), self.slope)
        half = ops.conv2d(d1, self.half) + ops.upsample_bilinear(ops.conv2d(d2, self.quarter), 2)
        return ops.sigmoid(ops.conv2d(x, self.full) + ops.upsample_bilinear(half, 2))

    def forward(self, x: Tensor, bypass: bool = False) -> Tensor:
        m = x if bypass else x * self.mask(x)
        return m + ops.conv2d(m, self.out)


class Reconstruction(Module):
    def __init__(self, rng, ch, blocks=10):
        self.resblocks = [ResBlock(rng, ch) for _ in range(blocks)]
        self.conv_last = init_conv(rng, ch, 3)

    def forward(self, attended: Tensor, ref_l1: Tensor) -> Tensor:
        f = attended
        for blk in self.resblocks:
            f = blk(f)
        return ops.sigmoid(ops.conv2d(f + ref_l1, self.conv_last))


class EhdrModel(Module):
    """Full network. Parameter names follow ``module.block.index.kind``."""

    def __init__(self, cfg: EhdrConfig | None = None):
        self.cfg = cfg = cfg or EhdrConfig()
        rng = np.random.default_rng(cfg.seed)
        ch, s = cfg.base_channels, cfg.leaky_slope
        self.image_encoder = Encoder(rng, 6, ch, cfg.encoder_blocks, s)
        self.event_encoder = Encoder(rng, cfg.voxel_bins, ch, cfg.encoder_blocks, s)
        self.alignment = Alignment(rng, ch, cfg.kernel_size, s)
        self.pairwise = PairwiseAttention(rng, ch, s)
        self.spatial = SpatialAttention(rng, ch, s)
        self.reconstruction = Reconstruction(rng, ch, cfg.recon_blocks)

    # single-stage entry points, mostly useful for tests and inspection
    def encode_image(self, x) -> list[Tensor]:
        return self.image_encoder(as_tensor(x))

    def encode_events(self, vox) -> list[Tensor]:
        return self.event_encoder(as_tensor(vox))

    def forward_arrays(self, images, voxels, propagate: bool = True) -> Tensor:
        """Run the network on prepared arrays.

        Args:
            images: ``(B, 3, 6, H, W)``: per bracket (time order -1, 0, +1) the
                gamma image and its exposure-compensated linear version.
            voxels: ``(B, 2, K, bins, H, W)``: chunk grids for the windows
                toward -1 and toward +1, each ordered away from the reference.
            propagate: coarse-to-fine offset propagation (ablation switch).

        Returns:
            ``(B, 3, H, W)`` normalized HDR prediction.
        """
        images = images.data if isinstance(images, Tensor) else np.asarray(images)
        voxels = voxels.data if isinstance(voxels, Tensor) else np.asarray(voxels)
        b, nimg, cimg, h, w = images.shape
        if nimg != 3 or cimg != 6:
            raise ops.ShapeError(f"images must be (B, 3, 6, H, W), got {images.shape}")
        if voxels.shape[:2] != (b, 2) or voxels.shape[3:] != (self.cfg.voxel_bins, h, w):
            raise ops.ShapeError(f"voxels shape {voxels.shape} does not match images {images.shape}")
        if not self.cfg.use_events:
            voxels = np.zeros_like(voxels)
        ph, pw = (-h) % 4, (-w) % 4
        if ph or pw:
            pad = [(0, 0)] * 3 + [(0, ph), (0, pw)]
            images = np.pad(images, pad, mode="reflect")
            voxels = np.pad(voxels, [(0, 0)] + pad, mode="reflect")
        out = self._forward(images, voxels, propagate)
        if ph or pw:
            out = getitem(out, (slice(None), slice(None), slice(0, h), slice(0, w)))
        return out

    def _forward(self, images: np.ndarray, voxels: np.ndarray, propagate: bool) -> Tensor:
        b, _, _, h, w = images.shape
        k = voxels.shape[2]
        ch = self.cfg.base_channels
        dt = self.parameters()[0].dtype

        img = self.encode_image(Tensor(images.reshape(b * 3, 6, h, w).astype(dt)))
        img = [reshape(f, (b, 3) + f.shape[1:]) for f in img]
        ref = [getitem(f, (slice(None), 1)) for f in img]
        # the two directions form one batch of 2B: first toward -1, then toward +1
        nonref = [concat([getitem(f, (slice(None), 0)), getitem(f, (slice(None), 2))], axis=0) for f in img]
        ref2 = [concat([r, r], axis=0) for r in ref]

        ev = self.encode_events(Tensor(voxels.reshape(b * 2 * k, self.cfg.voxel_bins, h, w).astype(dt)))
        per_chunk = [[None] * 3 for _ in range(k)]
        for lvl, f in enumerate(ev):
            hh, ww = f.shape[2:]
            f = transpose(reshape(f, (b, 2, k, ch, hh, ww)), (2, 1, 0, 3, 4, 5))
            f = reshape(f, (k, 2 * b, ch, hh, ww))
            for i in range(k):
                per_chunk[i][lvl] = getitem(f, i)

        aligned, _ = self.alignment(nonref, ref2, per_chunk, propagate=propagate)
        minus = getitem(aligned, slice(0, b))
        plus = getitem(aligned, slice(b, 2 * b))
        fused = self.pairwise(ref[0], minus, plus)
        attended = self.spatial(fused)
        return self.reconstruction(attended, ref[0])

    def forward(self, brackets: Sequence[LdrImage], events: EventStream | None,
                bracket_times: Sequence[int] | None = None) -> HdrImage:
        """Predict the normalized HDR image at the reference bracket."""
        images, voxels = prepare_inputs(brackets, events, bracket_times,
                                        self.cfg.chunks_per_window, self.cfg.voxel_bins)
        with no_grad():
            out = self.forward_arrays(images[None], voxels[None])
        return HdrImage(out.data[0].transpose(1, 2, 0))


def image_channels(ldr: LdrImage) -> np.ndarray:
    """``(6, H, W)``: gamma image followed by its exposure-compensated linearization."""
    return np.concatenate([ldr.pixels, exposure_compensate(ldr)], axis=-1).transpose(2, 0, 1).astype(np.float32)


def window_voxels(events: EventStream | None, t0: int, t1: int, chunks: int, bins: int,
                  height: int, width: int) -> np.ndarray:
    """``(chunks, bins, H, W)`` voxel grids for the window from ``t0`` toward ``t1``."""
    out = np.zeros((chunks, bins, height, width), dtype=np.float32)
    if events is None:
        return out
    if (events.width, events.height) != (width, height):
        raise ops.ShapeError(f"event sensor {events.width}x{events.height} != image {width}x{height}")
    tau = math.ceil(abs(t1 - t0) / chunks)
    for i, c in enumerate(chunk_stream(events, t0, t1, tau)):
        out[i] = voxelize(c, bins).bins
    return out


def prepare_inputs(brackets: Sequence[LdrImage], events: EventStream | None,
                   bracket_times: Sequence[int] | None = None, chunks: int = 4,
                   bins: int = 5) -> tuple[np.ndarray, np.ndarray]:
    """Turn three time-ordered brackets and their event stream into network arrays.

    Returns ``images (3, 6, H, W)`` and ``voxels (2, chunks, bins, H, W)``.
    Windows with no events yield zero grids and a warning.
    """
    if len(brackets) != 3:
        raise ValueError(f"expected 3 brackets (-1, 0, +1), got {len(brackets)}")
    if bracket_times is None:
        bracket_times = [b.timestamp for b in brackets]
        if any(t is None for t in bracket_times):
            raise ValueError("bracket timestamps are required to window the events")
    t_minus, t_ref, t_plus = (int(t) for t in bracket_times)
    if not t_minus < t_ref < t_plus:
        raise ValueError(f"brackets must be time ordered, got {bracket_times}")
    h, w = brackets[1].shape[:2]
    images = np.stack([image_channels(b) for b in brackets])
    voxels = np.stack([
        window_voxels(events, t_ref, t_minus, chunks, bins, h, w),
        window_voxels(events, t_ref, t_plus, chunks, bins, h, w),
    ])
    for name, v in zip(("-1", "+1"), voxels):
        if not v.any():
            log.warning("no events in the window toward bracket %s; using zero voxel grids", name)
    return images, voxels
