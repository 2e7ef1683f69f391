"""Convolution unfolding kernels.

The compiled extension ``ssgan._kernels`` is used when it was built; otherwise
the numpy implementation in ``ssgan._kernels_py`` is selected. Setting the
environment variable ``SSGAN_PURE_PYTHON=1`` forces the fallback.
"""
import os

import numpy as np

from . import _kernels_py

BACKEND = "python"
_impl = _kernels_py

if os.environ.get("SSGAN_PURE_PYTHON", "") not in ("1", "true", "yes"):
    try:
        from . import _kernels as _compiled
    except ImportError:
        pass
    else:
        _impl = _compiled
        BACKEND = "compiled"


def im2col(xp, kh, kw, stride, ho, wo):
    xp = np.ascontiguousarray(xp)
    if _impl is _kernels_py or xp.dtype not in (np.float32, np.float64):
        return _kernels_py.im2col(xp, kh, kw, stride, ho, wo)
    return _impl.im2col(xp, kh, kw, stride, ho, wo)


def col2im(cols, c, hp, wp, kh, kw, stride, ho, wo):
    cols = np.ascontiguousarray(cols)
    if _impl is _kernels_py or cols.dtype not in (np.float32, np.float64):
        return _kernels_py.col2im(cols, c, hp, wp, kh, kw, stride, ho, wo)
    return _impl.col2im(cols, c, hp, wp, kh, kw, stride, ho, wo)
