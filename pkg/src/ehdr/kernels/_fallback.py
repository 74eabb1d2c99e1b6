"""Pure numpy implementations of the hot kernels.

Every function here has a twin with the same signature in ``_ckernels.pyx``.
Offsets use the layout ``(N, 2K, Ho, Wo)`` where channel ``2k`` holds the
x (column) displacement of tap ``k`` and channel ``2k + 1`` the y (row)
displacement. Taps are enumerated row-major over the kernel window.
"""

import numpy as np


def _tap_grid(kh, kw, stride, pad, out_h, out_w):
    ky, kx = np.meshgrid(np.arange(kh), np.arange(kw), indexing="ij")
    oy = np.arange(out_h) * stride - pad
    ox = np.arange(out_w) * stride - pad
    base_y = ky.reshape(-1, 1, 1) + oy.reshape(1, -1, 1)  # (K, Ho, 1)
    base_x = kx.reshape(-1, 1, 1) + ox.reshape(1, 1, -1)  # (K, 1, Wo)
    return base_y, base_x


def _corners(x, offsets, kh, kw, stride, pad, out_h, out_w):
    """Yield (flat index, bilinear weight, d weight/dx, d weight/dy) per corner."""
    n, _, h, w = x.shape
    k = kh * kw
    base_y, base_x = _tap_grid(kh, kw, stride, pad, out_h, out_w)
    off = offsets.reshape(n, k, 2, out_h, out_w)
    py = base_y[None] + off[:, :, 1]
    px = base_x[None] + off[:, :, 0]
    y0 = np.floor(py)
    x0 = np.floor(px)
    ly = (py - y0).astype(x.dtype)
    lx = (px - x0).astype(x.dtype)
    y0 = y0.astype(np.int64)
    x0 = x0.astype(np.int64)
    one = x.dtype.type(1)
    for dy, dx in ((0, 0), (0, 1), (1, 0), (1, 1)):
        yy = y0 + dy
        xx = x0 + dx
        valid = (yy >= 0) & (yy < h) & (xx >= 0) & (xx < w)
        wy = ly if dy else one - ly
        wx = lx if dx else one - lx
        # derivative of the corner weight with respect to the sample position
        dwy = wx if dy else -wx
        dwx = wy if dx else -wy
        idx = np.where(valid, np.clip(yy, 0, h - 1) * w + np.clip(xx, 0, w - 1), 0)
        vf = valid.astype(x.dtype)
        yield (
            idx.reshape(n, k, -1),
            (wy * wx * vf).reshape(n, k, -1),
            (dwx * vf).reshape(n, k, -1),
            (dwy * vf).reshape(n, k, -1),
        )


def deform_sample(x, offsets, kh, kw, stride, pad, out_h, out_w):
    """Bilinearly sample ``x`` at every displaced kernel tap.

    Returns ``vals`` of shape ``(N, C, K, Ho*Wo)``. Neighbours outside the
    image read as zero.
    """
    n, c, h, w = x.shape
    k = kh * kw
    vals = np.zeros((n, c, k, out_h * out_w), dtype=x.dtype)
    xf = x.reshape(n, c, h * w)
    for idx, wgt, _, _ in _corners(x, offsets, kh, kw, stride, pad, out_h, out_w):
        for b in range(n):
            vals[b] += xf[b][:, idx[b]] * wgt[b][None]
    return vals


def deform_sample_backward(x, offsets, dvals, kh, kw, stride, pad, out_h, out_w):
    """Gradients of ``deform_sample`` given ``dvals`` (same shape as vals).

    Returns ``(grad_x, grad_offsets)``.
    """
    n, c, h, w = x.shape
    k = kh * kw
    hw = h * w
    xf = x.reshape(n, c, hw)
    grad_x = np.zeros((n, c * hw), dtype=np.float64)
    goff = np.zeros((n, k, 2, out_h * out_w), dtype=x.dtype)
    chan_base = (np.arange(c) * hw).reshape(c, 1, 1)
    for idx, wgt, dwx, dwy in _corners(x, offsets, kh, kw, stride, pad, out_h, out_w):
        for b in range(n):
            g = dvals[b]
            flat = (chan_base + idx[b][None]).ravel()
            grad_x[b] += np.bincount(flat, weights=(g * wgt[b][None]).ravel(), minlength=c * hw)
            gv = (g * xf[b][:, idx[b]]).sum(axis=0)
            goff[b, :, 0] += gv * dwx[b]
            goff[b, :, 1] += gv * dwy[b]
    return (
        grad_x.reshape(n, c, h, w).astype(x.dtype),
        goff.reshape(n, 2 * k, out_h, out_w),
    )


def simulate_pixels(logs, times, threshold, tol):
    """Emit threshold crossings of per-pixel log intensity.

    ``logs`` is ``(T, P)`` float64, ``times`` is ``(T,)`` float64 in
    microseconds. The reference level of each pixel starts at ``logs[0]``
    and moves by ``threshold`` per event. Returns ``(t, pixel, polarity)``
    with ``t`` rounded to integer microseconds, unsorted.
    """
    n_frames, n_pix = logs.shape
    ref = logs[0].copy()
    out_t, out_p, out_s = [], [], []
    for i in range(1, n_frames):
        l0 = logs[i - 1]
        l1 = logs[i]
        t0 = times[i - 1]
        dt = times[i] - t0
        for sign in (1.0, -1.0):
            n_ev = np.floor((sign * (l1 - ref) + tol) / threshold)
            n_ev = np.maximum(n_ev, 0).astype(np.int64)
            hit = np.nonzero(n_ev)[0]
            if hit.size == 0:
                continue
            counts = n_ev[hit]
            pix = np.repeat(hit, counts)
            # m = 1..count for each pixel
            starts = np.cumsum(counts) - counts
            m = np.arange(counts.sum()) - np.repeat(starts, counts) + 1
            level = ref[pix] + sign * m * threshold
            frac = (level - l0[pix]) / (l1[pix] - l0[pix])
            frac = np.minimum(np.maximum(frac, 0.0), 1.0)
            out_t.append(np.floor(t0 + frac * dt + 0.5))
            out_p.append(pix)
            out_s.append(np.full(pix.size, int(sign), dtype=np.int8))
            ref[hit] = ref[hit] + sign * counts * threshold
    if not out_t:
        return np.zeros(0), np.zeros(0, dtype=np.int64), np.zeros(0, dtype=np.int8)
    return np.concatenate(out_t), np.concatenate(out_p), np.concatenate(out_s)
