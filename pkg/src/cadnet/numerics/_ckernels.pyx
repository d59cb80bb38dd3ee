# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled patch gather/scatter kernels for NHWC convolution.

Both kernels visit kernel offsets in (dy, dx) order so the scatter-add
accumulates in exactly the same order as the numpy fallback; results are
bit-identical between the two backends.
"""
import numpy as np

cimport cython
from libc.string cimport memcpy

ctypedef fused real:
    float
    double


def im2col(real[:, :, :, ::1] x, int k, int stride, int pad):
    cdef Py_ssize_t B = x.shape[0], H = x.shape[1], W = x.shape[2], C = x.shape[3]
    cdef Py_ssize_t Ho = (H + 2 * pad - k) // stride + 1
    cdef Py_ssize_t Wo = (W + 2 * pad - k) // stride + 1
    dtype = np.float32 if real is float else np.float64
    out = np.zeros((B * Ho * Wo, k * k * C), dtype=dtype)
    if out.size == 0:
        return out
    cdef real[:, ::1] cols = out
    cdef Py_ssize_t b, oy, ox, dy, iy, ix0, dx_lo, dx_hi, row, n
    cdef Py_ssize_t rowlen = k * k * C
    cdef real* dst
    cdef real* src
    with nogil:
        for b in range(B):
            for oy in range(Ho):
                for ox in range(Wo):
                    row = (b * Ho + oy) * Wo + ox
                    ix0 = ox * stride - pad
                    dx_lo = -ix0 if ix0 < 0 else 0
                    dx_hi = W - ix0 if ix0 + k > W else k
                    if dx_hi <= dx_lo:
                        continue
                    n = (dx_hi - dx_lo) * C
                    for dy in range(k):
                        iy = oy * stride + dy - pad
                        if iy < 0 or iy >= H:
                            continue
                        # (dx, c) block is contiguous in both source and destination
                        dst = &cols[row, (dy * k + dx_lo) * C]
                        src = &x[b, iy, ix0 + dx_lo, 0]
                        memcpy(dst, src, n * sizeof(real))
    return out


def col2im(real[:, ::1] cols, int B, int H, int W, int C, int k, int stride, int pad):
    cdef Py_ssize_t Ho = (H + 2 * pad - k) // stride + 1
    cdef Py_ssize_t Wo = (W + 2 * pad - k) // stride + 1
    dtype = np.float32 if real is float else np.float64
    out = np.zeros((B, H, W, C), dtype=dtype)
    cdef real[:, :, :, ::1] x = out
    cdef Py_ssize_t b, oy, ox, dy, dx, c, iy, ix, row, col0
    with nogil:
        for dy in range(k):
            for dx in range(k):
                col0 = (dy * k + dx) * C
                for b in range(B):
                    for oy in range(Ho):
                        iy = oy * stride + dy - pad
                        if iy < 0 or iy >= H:
                            continue
                        for ox in range(Wo):
                            ix = ox * stride + dx - pad
                            if ix < 0 or ix >= W:
                                continue
                            row = (b * Ho + oy) * Wo + ox
                            for c in range(C):
                                x[b, iy, ix, c] += cols[row, col0 + c]
    return out
