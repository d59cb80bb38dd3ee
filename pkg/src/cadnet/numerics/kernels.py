"""Backend selection for the convolution hot loops.

The compiled extension is used when it imports; setting ``CADNET_PURE_PYTHON=1``
forces the numpy fallback. ``BACKEND`` names whichever one is live.
"""

from __future__ import annotations

import os

import numpy as np

from cadnet.numerics import _pykernels

if os.environ.get("CADNET_PURE_PYTHON", "") not in ("", "0"):
    _impl = _pykernels
    BACKEND = "python"
else:
    try:
        from cadnet.numerics import _ckernels as _impl  # type: ignore[no-redef]

        BACKEND = "cython"
    except ImportError:  # extension not built
        _impl = _pykernels
        BACKEND = "python"


def im2col(x, k: int, stride: int, pad: int):
    """Gather (B, H, W, C) patches into rows of shape (k*k*C,), ordered (dy, dx, c)."""
    return _impl.im2col(np.ascontiguousarray(x), k, stride, pad)


def col2im(cols, B: int, H: int, W: int, C: int, k: int, stride: int, pad: int):
    """Scatter-add patch rows back onto a (B, H, W, C) image; adjoint of :func:`im2col`."""
    return _impl.col2im(np.ascontiguousarray(cols), B, H, W, C, k, stride, pad)
