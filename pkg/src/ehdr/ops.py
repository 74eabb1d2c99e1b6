"""Network operators on :class:`~ehdr.tensor.Tensor`: activations, 2-D
convolution, modulated deformable convolution, bilinear resampling.

All image tensors are ``(N, C, H, W)``.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache
import math

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from . import kernels
from .tensor import Tensor, as_tensor, make_result


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""


@dataclass
class ConvParams:
    """Weights ``(Cout, Cin, kH, kW)``, bias ``(Cout,)`` and geometry."""

    weight: Tensor
    bias: Tensor | None = None
    stride: int = 1
    padding: int = 1

    @property
    def out_channels(self):
        return self.weight.shape[0]

    @property
    def in_channels(self):
        return self.weight.shape[1]

    @property
    def kernel_size(self):
        return self.weight.shape[2], self.weight.shape[3]


# ---------------------------------------------------------------------------
# activations
# ---------------------------------------------------------------------------

def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return make_result(x.data * mask, (x,), lambda g: (g * mask,))


def leaky_relu(x: Tensor, slope: float = 0.1) -> Tensor:
    scale = np.where(x.data > 0, 1.0, slope).astype(x.dtype)
    return make_result(x.data * scale, (x,), lambda g: (g * scale,))


def sigmoid(x: Tensor) -> Tensor:
    d = x.data
    # split by sign so exp never overflows
    e = np.exp(-np.abs(d))
    out = np.where(d >= 0, 1 / (1 + e), e / (1 + e)).astype(d.dtype)
    return make_result(out, (x,), lambda g: (g * out * (1 - out),))


def tanh(x: Tensor) -> Tensor:
    out = np.tanh(x.data)
    return make_result(out, (x,), lambda g: (g * (1 - out * out),))


# ---------------------------------------------------------------------------
# convolution
# ---------------------------------------------------------------------------

def conv_output_size(size: int, k: int, stride: int, pad: int) -> int:
    return (size + 2 * pad - k) // stride + 1


def _im2col(x: np.ndarray, kh: int, kw: int, stride: int, pad: int):
    n, c, h, w = x.shape
    ho = conv_output_size(h, kh, stride, pad)
    wo = conv_output_size(w, kw, stride, pad)
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))
    win = win[:, :, : (ho - 1) * stride + 1 : stride, : (wo - 1) * stride + 1 : stride]
    cols = win.transpose(0, 1, 4, 5, 2, 3).reshape(n, c * kh * kw, ho * wo)
    return cols, ho, wo


def _col2im(dcols: np.ndarray, shape, kh, kw, stride, pad, ho, wo):
    n, c, h, w = shape
    d = dcols.reshape(n, c, kh, kw, ho, wo)
    gp = np.zeros((n, c, h + 2 * pad, w + 2 * pad), dtype=dcols.dtype)
    for i in range(kh):
        for j in range(kw):
            gp[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += d[:, :, i, j]
    return gp[:, :, pad : pad + h, pad : pad + w] if pad else gp


def _check_conv(x: Tensor, params: ConvParams):
    if x.ndim != 4:
        raise ShapeError(f"conv input must be (N, C, H, W), got {x.shape}")
    if x.shape[1] != params.in_channels:
        raise ShapeError(
            f"input shape {x.shape} has {x.shape[1]} channels but weight shape "
            f"{params.weight.shape} expects {params.in_channels}"
        )
    kh, kw = params.kernel_size
    p = params.padding
    if x.shape[2] + 2 * p < kh or x.shape[3] + 2 * p < kw:
        raise ShapeError(f"input shape {x.shape} smaller than kernel {params.weight.shape} after padding {p}")


def conv2d(x: Tensor, params: ConvParams) -> Tensor:
    """Cross-correlation with zero padding, via im2col and one matmul."""
    _check_conv(x, params)
    w, b = params.weight, params.bias
    cout = params.out_channels
    kh, kw = params.kernel_size
    s, p = params.stride, params.padding
    n = x.shape[0]
    cols, ho, wo = _im2col(x.data, kh, kw, s, p)
    w2 = w.data.reshape(cout, -1)
    out = np.matmul(w2, cols)
    if b is not None:
        out += b.data.reshape(1, cout, 1)
    out = out.reshape(n, cout, ho, wo)
    xshape = x.shape

    def backward(g):
        g = g.reshape(n, cout, ho * wo)
        gw = np.matmul(g, cols.transpose(0, 2, 1)).sum(axis=0).reshape(w.shape) if w.requires_grad else None
        gx = _col2im(np.matmul(w2.T, g), xshape, kh, kw, s, p, ho, wo) if x.requires_grad else None
        gb = g.sum(axis=(0, 2)) if b is not None and b.requires_grad else None
        return gx, gw, gb

    parents = (x, w) if b is None else (x, w, b)
    return make_result(out, parents, backward)


def deform_conv2d(x: Tensor, offsets: Tensor, masks: Tensor, params: ConvParams) -> Tensor:
    """Modulated deformable convolution.

    ``y(p) = sum_k w_k * x(p + p_k + d_k(p)) * m_k(p) + b`` with bilinear
    sampling of ``x`` (zero outside the image). ``offsets`` is
    ``(N, 2K, Ho, Wo)`` ordered (dx, dy) per tap; ``masks`` is ``(N, K, Ho, Wo)``.
    """
    _check_conv(x, params)
    w, b = params.weight, params.bias
    cout = params.out_channels
    kh, kw = params.kernel_size
    s, p = params.stride, params.padding
    n, c, h, wd = x.shape
    k = kh * kw
    ho = conv_output_size(h, kh, s, p)
    wo = conv_output_size(wd, kw, s, p)
    if offsets.shape != (n, 2 * k, ho, wo):
        raise ShapeError(f"offsets shape {offsets.shape} != expected {(n, 2 * k, ho, wo)}")
    if masks.shape != (n, k, ho, wo):
        raise ShapeError(f"masks shape {masks.shape} != expected {(n, k, ho, wo)}")

    vals = kernels.deform_sample(x.data, offsets.data, kh, kw, s, p, ho, wo)
    m = masks.data.reshape(n, 1, k, ho * wo)
    cols = (vals * m).reshape(n, c * k, ho * wo)
    w2 = w.data.reshape(cout, -1)
    out = np.matmul(w2, cols)
    if b is not None:
        out += b.data.reshape(1, cout, 1)
    out = out.reshape(n, cout, ho, wo)

    def backward(g):
        g = g.reshape(n, cout, ho * wo)
        gw = np.matmul(g, cols.transpose(0, 2, 1)).sum(axis=0).reshape(w.shape) if w.requires_grad else None
        gb = g.sum(axis=(0, 2)) if b is not None and b.requires_grad else None
        gx = goff = gm = None
        if x.requires_grad or offsets.requires_grad or masks.requires_grad:
            dcols = np.matmul(w2.T, g).reshape(n, c, k, ho * wo)
            if masks.requires_grad:
                gm = (dcols * vals).sum(axis=1).reshape(n, k, ho, wo)
            if x.requires_grad or offsets.requires_grad:
                gx, goff = kernels.deform_sample_backward(
                    x.data, offsets.data, dcols * m, kh, kw, s, p, ho, wo
                )
        return gx, goff, gm, gw, gb

    parents = (x, offsets, masks, w) if b is None else (x, offsets, masks, w, b)
    return make_result(out, parents, backward)


def bilinear_sample(img, x: float, y: float, channel: int = 0, batch: int = 0) -> float:
    """Sample one value at fractional column ``x`` and row ``y``.

    Neighbours outside the image count as zero, so a point far outside
    returns 0 and a point on the border blends toward 0.
    """
    arr = img.data if isinstance(img, Tensor) else np.asarray(img)
    if arr.ndim == 2:
        plane = arr
    else:
        plane = arr[batch, channel]
    h, w = plane.shape
    x0, y0 = math.floor(x), math.floor(y)
    lx, ly = x - x0, y - y0
    acc = 0.0
    for yy, wy in ((y0, 1 - ly), (y0 + 1, ly)):
        for xx, wx in ((x0, 1 - lx), (x0 + 1, lx)):
            if 0 <= yy < h and 0 <= xx < w:
                acc += wy * wx * float(plane[yy, xx])
    return acc


# ---------------------------------------------------------------------------
# resampling
# ---------------------------------------------------------------------------

@lru_cache(maxsize=64)
def _resize_matrix(n_in: int, n_out: int, dtype_str: str) -> np.ndarray:
    """Half-pixel-centred linear interpolation matrix ``(n_out, n_in)``."""
    a = np.zeros((n_out, n_in), dtype=np.float64)
    scale = n_in / n_out
    for i in range(n_out):
        src = max((i + 0.5) * scale - 0.5, 0.0)
        i0 = min(int(math.floor(src)), n_in - 1)
        i1 = min(i0 + 1, n_in - 1)
        lam = src - i0
        a[i, i0] += 1 - lam
        a[i, i1] += lam
    a.setflags(write=False)
    return a.astype(dtype_str)


def resize_array(x: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Bilinearly resize the last two axes of a plain array."""
    ah = _resize_matrix(x.shape[-2], out_h, str(x.dtype))
    aw = _resize_matrix(x.shape[-1], out_w, str(x.dtype))
    return ah @ x @ aw.T


def upsample_bilinear(x: Tensor, factor: int = 2) -> Tensor:
    """Bilinear upsampling of the spatial axes by an integer ``factor``."""
    h, w = x.shape[-2:]
    ah = _resize_matrix(h, h * factor, str(x.dtype))
    aw = _resize_matrix(w, w * factor, str(x.dtype))
    out = ah @ x.data @ aw.T
    return make_result(out, (x,), lambda g: (ah.T @ g @ aw,))
