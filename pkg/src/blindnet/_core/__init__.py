"""Convolution patch kernels.

The compiled extension is used when it was built; otherwise the numpy
implementation is used. Set ``BLINDNET_PURE_PYTHON=1`` to force the fallback.
"""
import os

import numpy as np

from . import fallback

BACKEND = "python"
_ext = None
if not os.environ.get("BLINDNET_PURE_PYTHON"):
    try:
        from . import _kernels as _ext

        BACKEND = "cython"
    except ImportError:  # extension not built
        _ext = None


def im2col(x, kh, kw, stride, pad):
    if _ext is not None and x.dtype in (np.float32, np.float64):
        return _ext.im2col(np.ascontiguousarray(x), kh, kw, stride, pad)
    return fallback.im2col(x, kh, kw, stride, pad)


def col2im(cols, c, h, w, kh, kw, stride, pad):
    if _ext is not None and cols.dtype in (np.float32, np.float64):
        return _ext.col2im(np.ascontiguousarray(cols), c, h, w, kh, kw, stride, pad)
    return fallback.col2im(cols, c, h, w, kh, kw, stride, pad)
