"""Backend selection for the convolution kernels.

The compiled extension is used when it imports; set ``REKO_PURE_PYTHON=1``
to force the numpy fallback. ``BACKEND`` names the active one.
"""

import os

import numpy as np

from . import _pykernels

BACKEND = "numpy"
_im2col = _pykernels.im2col
_col2im = _pykernels.col2im

if os.environ.get("REKO_PURE_PYTHON", "") not in ("1", "true", "yes"):
    try:
        from . import _ckernels
    except ImportError:  # extension not built
        pass
    else:
        BACKEND = "cython"
        _im2col = _ckernels.im2col
        _col2im = _ckernels.col2im


def im2col(x, k, stride, pad):
    """Unfold ``x`` (N, C, H, W) into columns of shape (C*k*k, N*Ho*Wo)."""
    return _im2col(np.ascontiguousarray(x, dtype=np.float64), int(k), int(stride), int(pad))


def col2im(cols, shape, k, stride, pad):
    """Adjoint of :func:`im2col`: scatter-add columns back into an (N, C, H, W) array."""
    shape = tuple(int(s) for s in shape)
    return _col2im(np.ascontiguousarray(cols, dtype=np.float64), shape, int(k), int(stride), int(pad))
