"""Pure-numpy patch gather/scatter kernels (fallback when the extension is absent)."""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


def im2col(x: np.ndarray, k: int, stride: int, pad: int) -> np.ndarray:
    B, H, W, C = x.shape
    Ho = (H + 2 * pad - k) // stride + 1
    Wo = (W + 2 * pad - k) // stride + 1
    xp = np.pad(x, ((0, 0), (pad, pad), (pad, pad), (0, 0))) if pad else x
    win = sliding_window_view(xp, (k, k), axis=(1, 2))[:, : Ho * stride : stride, : Wo * stride : stride]
    # (B, Ho, Wo, C, k, k) -> (B, Ho, Wo, k, k, C)
    return np.ascontiguousarray(win.transpose(0, 1, 2, 4, 5, 3)).reshape(B * Ho * Wo, k * k * C)


def col2im(cols: np.ndarray, B: int, H: int, W: int, C: int, k: int, stride: int, pad: int) -> np.ndarray:
    Ho = (H + 2 * pad - k) // stride + 1
    Wo = (W + 2 * pad - k) // stride + 1
    patches = cols.reshape(B, Ho, Wo, k, k, C)
    xp = np.zeros((B, H + 2 * pad, W + 2 * pad, C), dtype=cols.dtype)
    for dy in range(k):
        for dx in range(k):
            xp[:, dy : dy + stride * Ho : stride, dx : dx + stride * Wo : stride, :] += patches[:, :, :, dy, dx, :]
    if pad:
        return np.ascontiguousarray(xp[:, pad:-pad, pad:-pad, :])
    return xp
