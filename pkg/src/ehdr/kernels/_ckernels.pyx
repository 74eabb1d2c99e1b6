# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled twins of ``_fallback``: deformable bilinear sampling and the
per-pixel event emission loop."""

import numpy as np
cimport numpy as cnp
from libc.math cimport floor

cnp.import_array()

ctypedef fused real:
    float
    double


def deform_sample(real[:, :, :, ::1] x, real[:, :, :, ::1] offsets,
                  int kh, int kw, int stride, int pad, int out_h, int out_w):
    cdef Py_ssize_t n = x.shape[0], c = x.shape[1], h = x.shape[2], w = x.shape[3]
    cdef Py_ssize_t K = kh * kw, L = out_h * out_w
    dtype = np.float32 if real is float else np.float64
    vals_arr = np.zeros((n, c, K, L), dtype=dtype)
    cdef real[:, :, :, ::1] vals = vals_arr
    cdef Py_ssize_t b, k, l, ch, oy, ox
    cdef int y0, x0, y1, x1
    cdef double py, px, ly, lx
    cdef real w00, w01, w10, w11, acc
    cdef bint v00, v01, v10, v11
    with nogil:
        for b in range(n):
            for k in range(K):
                for oy in range(out_h):
                    for ox in range(out_w):
                        l = oy * out_w + ox
                        py = oy * stride - pad + k // kw + <double>offsets[b, 2 * k + 1, oy, ox]
                        px = ox * stride - pad + k % kw + <double>offsets[b, 2 * k, oy, ox]
                        y0 = <int>floor(py)
                        x0 = <int>floor(px)
                        ly = py - y0
                        lx = px - x0
                        y1 = y0 + 1
                        x1 = x0 + 1
                        w00 = <real>((1 - ly) * (1 - lx))
                        w01 = <real>((1 - ly) * lx)
                        w10 = <real>(ly * (1 - lx))
                        w11 = <real>(ly * lx)
                        v00 = y0 >= 0 and y0 < h and x0 >= 0 and x0 < w
                        v01 = y0 >= 0 and y0 < h and x1 >= 0 and x1 < w
                        v10 = y1 >= 0 and y1 < h and x0 >= 0 and x0 < w
                        v11 = y1 >= 0 and y1 < h and x1 >= 0 and x1 < w
                        if not (v00 or v01 or v10 or v11):
                            continue
                        for ch in range(c):
                            acc = 0
                            if v00:
                                acc = acc + w00 * x[b, ch, y0, x0]
                            if v01:
                                acc = acc + w01 * x[b, ch, y0, x1]
                            if v10:
                                acc = acc + w10 * x[b, ch, y1, x0]
                            if v11:
                                acc = acc + w11 * x[b, ch, y1, x1]
                            vals[b, ch, k, l] = acc
    return vals_arr


def deform_sample_backward(real[:, :, :, ::1] x, real[:, :, :, ::1] offsets,
                           real[:, :, :, ::1] dvals,
                           int kh, int kw, int stride, int pad, int out_h, int out_w):
    cdef Py_ssize_t n = x.shape[0], c = x.shape[1], h = x.shape[2], w = x.shape[3]
    cdef Py_ssize_t K = kh * kw
    dtype = np.float32 if real is float else np.float64
    gx_arr = np.zeros((n, c, h, w), dtype=dtype)
    goff_arr = np.zeros((n, 2 * K, out_h, out_w), dtype=dtype)
    cdef real[:, :, :, ::1] gx = gx_arr
    cdef real[:, :, :, ::1] goff = goff_arr
    cdef Py_ssize_t b, k, l, ch, oy, ox
    cdef int y0, x0, y1, x1
    cdef double py, px, ly, lx
    cdef real w00, w01, w10, w11, g, a00, a01, a10, a11, gdx, gdy
    cdef real fy0, fy1, fx0, fx1
    cdef bint v00, v01, v10, v11
    with nogil:
        for b in range(n):
            for k in range(K):
                for oy in range(out_h):
                    for ox in range(out_w):
                        l = oy * out_w + ox
                        py = oy * stride - pad + k // kw + <double>offsets[b, 2 * k + 1, oy, ox]
                        px = ox * stride - pad + k % kw + <double>offsets[b, 2 * k, oy, ox]
                        y0 = <int>floor(py)
                        x0 = <int>floor(px)
                        ly = py - y0
                        lx = px - x0
                        y1 = y0 + 1
                        x1 = x0 + 1
                        fy0 = <real>(1 - ly)
                        fy1 = <real>ly
                        fx0 = <real>(1 - lx)
                        fx1 = <real>lx
                        w00 = fy0 * fx0
                        w01 = fy0 * fx1
                        w10 = fy1 * fx0
                        w11 = fy1 * fx1
                        v00 = y0 >= 0 and y0 < h and x0 >= 0 and x0 < w
                        v01 = y0 >= 0 and y0 < h and x1 >= 0 and x1 < w
                        v10 = y1 >= 0 and y1 < h and x0 >= 0 and x0 < w
                        v11 = y1 >= 0 and y1 < h and x1 >= 0 and x1 < w
                        if not (v00 or v01 or v10 or v11):
                            continue
                        gdx = 0
                        gdy = 0
                        for ch in range(c):
                            g = dvals[b, ch, k, l]
                            if g == 0:
                                continue
                            a00 = 0
                            a01 = 0
                            a10 = 0
                            a11 = 0
                            if v00:
                                gx[b, ch, y0, x0] += g * w00
                                a00 = x[b, ch, y0, x0]
                            if v01:
                                gx[b, ch, y0, x1] += g * w01
                                a01 = x[b, ch, y0, x1]
                            if v10:
                                gx[b, ch, y1, x0] += g * w10
                                a10 = x[b, ch, y1, x0]
                            if v11:
                                gx[b, ch, y1, x1] += g * w11
                                a11 = x[b, ch, y1, x1]
                            gdx = gdx + g * (fy0 * (a01 - a00) + fy1 * (a11 - a10))
                            gdy = gdy + g * (fx0 * (a10 - a00) + fx1 * (a11 - a01))
                        goff[b, 2 * k, oy, ox] = gdx
                        goff[b, 2 * k + 1, oy, ox] = gdy
    return gx_arr, goff_arr


def simulate_pixels(double[:, ::1] logs, double[::1] times, double threshold, double tol):
    cdef Py_ssize_t T = logs.shape[0], P = logs.shape[1]
    cdef Py_ssize_t i, p, total = 0, pos = 0
    cdef long long m, cnt
    cdef double d, sign, level, frac, t0, dt, l0, l1
    ref_arr = np.array(logs[0], dtype=np.float64)
    cdef double[::1] ref = ref_arr
    # first pass: count
    with nogil:
        for i in range(1, T):
            for p in range(P):
                d = logs[i, p] - ref[p]
                sign = 1.0 if d > 0 else -1.0
                cnt = <long long>floor((sign * d + tol) / threshold)
                if cnt > 0:
                    total += cnt
                    ref[p] = ref[p] + sign * cnt * threshold
    t_arr = np.empty(total, dtype=np.float64)
    p_arr = np.empty(total, dtype=np.int64)
    s_arr = np.empty(total, dtype=np.int8)
    cdef double[::1] out_t = t_arr
    cdef long long[::1] out_p = p_arr
    cdef signed char[::1] out_s = s_arr
    ref[:] = logs[0]
    with nogil:
        for i in range(1, T):
            t0 = times[i - 1]
            dt = times[i] - t0
            for p in range(P):
                l0 = logs[i - 1, p]
                l1 = logs[i, p]
                d = l1 - ref[p]
                sign = 1.0 if d > 0 else -1.0
                cnt = <long long>floor((sign * d + tol) / threshold)
                if cnt <= 0:
                    continue
                for m in range(1, cnt + 1):
                    level = ref[p] + (sign * m) * threshold
                    frac = (level - l0) / (l1 - l0)
                    if frac < 0.0:
                        frac = 0.0
                    if frac > 1.0:
                        frac = 1.0
                    out_t[pos] = floor(t0 + frac * dt + 0.5)
                    out_p[pos] = p
                    out_s[pos] = <signed char>sign
                    pos += 1
                ref[p] = ref[p] + sign * cnt * threshold
    return t_arr, p_arr, s_arr
