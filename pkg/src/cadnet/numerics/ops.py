"""Forward kernels for the layers the network uses.

All functions accept an optional leading batch axis and work in whatever
floating dtype they are handed (float32 for training, float64 for gradient
checks). Outputs are checked for NaN/Inf.
"""

from __future__ import annotations

from typing import Literal

import numpy as np

from cadnet.errors import ConfigurationError, NonFiniteError
from cadnet.numerics import kernels

Padding = Literal["same", "valid"]


def check_finite(a: np.ndarray, where: str) -> np.ndarray:
    if not np.isfinite(a).all():
        raise NonFiniteError(f"non-finite values produced by {where}")
    return a


def fc_forward(inp: np.ndarray, weights: np.ndarray, bias: np.ndarray) -> np.ndarray:
    """Dense layer: ``out[..., j] = sum_i inp[..., i] * weights[i, j] + bias[j]``."""
    if weights.ndim != 2 or bias.ndim != 1:
        raise ConfigurationError(f"fc expects rank-2 weights and rank-1 bias, got {weights.shape} and {bias.shape}")
    if inp.shape[-1] != weights.shape[0]:
        raise ConfigurationError(f"fc input length {inp.shape[-1]} does not match weights {weights.shape}")
    if bias.shape[0] != weights.shape[1]:
        raise ConfigurationError(f"fc bias length {bias.shape[0]} does not match weights {weights.shape}")
    return check_finite(inp @ weights + bias, "fc_forward")


def conv_geometry(H: int, W: int, k: int, stride: int, padding: Padding) -> tuple[int, int, int]:
    """Return ``(pad, H_out, W_out)`` for a k x k cross-correlation."""
    if k % 2 != 1:
        raise ConfigurationError(f"kernel extent must be odd, got {k}")
    if stride < 1:
        raise ConfigurationError(f"stride must be >= 1, got {stride}")
    if padding == "same":
        pad = k // 2
    elif padding == "valid":
        pad = 0
    else:
        raise ConfigurationError(f"unknown padding {padding!r}")
    if k > H + 2 * pad or k > W + 2 * pad:
        raise ConfigurationError(f"{k}x{k} kernel larger than padded {H}x{W} input")
    return pad, (H + 2 * pad - k) // stride + 1, (W + 2 * pad - k) // stride + 1


def conv2d_forward(
    inp: np.ndarray,
    kernels_: np.ndarray,
    bias: np.ndarray,
    stride: int = 1,
    padding: Padding = "same",
) -> np.ndarray:
    """NHWC cross-correlation with ``kernels_`` of shape (k, k, Cin, Cout).

    ``inp`` may be (H, W, Cin) or batched (B, H, W, Cin).
    """
    single = inp.ndim == 3
    x = inp[None] if single else inp
    out, _ = conv2d_cols(x, kernels_, bias, stride, padding)
    return out[0] if single else out


def conv2d_cols(
    x: np.ndarray, kernels_: np.ndarray, bias: np.ndarray, stride: int, padding: Padding
) -> tuple[np.ndarray, np.ndarray]:
    """Batched conv that also returns the im2col matrix for reuse in the backward pass."""
    if x.ndim != 4 or kernels_.ndim != 4:
        raise ConfigurationError(f"conv expects (B,H,W,C) input and (k,k,Cin,Cout) kernels, got {x.shape}, {kernels_.shape}")
    B, H, W, Cin = x.shape
    k, k2, kc, Cout = kernels_.shape
    if k != k2 or kc != Cin:
        raise ConfigurationError(f"kernel {kernels_.shape} incompatible with input channels {Cin}")
    if bias.shape != (Cout,):
        raise ConfigurationError(f"conv bias shape {bias.shape} != ({Cout},)")
    pad, Ho, Wo = conv_geometry(H, W, k, stride, padding)
    cols = kernels.im2col(x, k, stride, pad)
    out = cols @ kernels_.reshape(k * k * Cin, Cout) + bias
    return check_finite(out.reshape(B, Ho, Wo, Cout), "conv2d_forward"), cols


def sigmoid(a: np.ndarray) -> np.ndarray:
    # tanh form never overflows
    return 0.5 * (1.0 + np.tanh(0.5 * a))


def activations(inp: np.ndarray, kind: str) -> np.ndarray:
    """Elementwise ``relu``, ``sigmoid`` or ``exp``."""
    if kind == "relu":
        out = np.maximum(inp, 0)
    elif kind == "sigmoid":
        out = sigmoid(inp)
    elif kind == "exp":
        with np.errstate(over="ignore"):
            out = np.exp(inp)
    else:
        raise ConfigurationError(f"unknown activation {kind!r}")
    return check_finite(out, kind)
