"""Pure numpy im2col / col2im, used when the compiled extension is unavailable."""

import numpy as np
from numpy.lib.stride_tricks import as_strided


def _out_size(size, k, stride, pad):
    return (size + 2 * pad - k) // stride + 1


def im2col(x, k, stride, pad):
    n, c, h, w = x.shape
    ho, wo = _out_size(h, k, stride, pad), _out_size(w, k, stride, pad)
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x
    s0, s1, s2, s3 = xp.strides
    view = as_strided(
        xp,
        shape=(c, k, k, n, ho, wo),
        strides=(s1, s2, s3, s0, s2 * stride, s3 * stride),
        writeable=False,
    )
    return np.ascontiguousarray(view).reshape(c * k * k, n * ho * wo)


def col2im(cols, shape, k, stride, pad):
    n, c, h, w = shape
    ho, wo = _out_size(h, k, stride, pad), _out_size(w, k, stride, pad)
    if cols.shape != (c * k * k, n * ho * wo):
        raise ValueError(
            f"col2im: columns {cols.shape[0]}x{cols.shape[1]} do not fit image {tuple(shape)} "
            f"with k={k}, stride={stride}, pad={pad}"
        )
    blocks = cols.reshape(c, k, k, n, ho, wo)
    xp = np.zeros((n, c, h + 2 * pad, w + 2 * pad))
    for ki in range(k):
        for kj in range(k):
            xp[:, :, ki:ki + stride * ho:stride, kj:kj + stride * wo:stride] += (
                blocks[:, ki, kj].transpose(1, 0, 2, 3)
            )
    if pad:
        return np.ascontiguousarray(xp[:, :, pad:pad + h, pad:pad + w])
    return xp
