# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled im2col / col2im for strided 2-D convolution.

Column layout is ``(C * k * k, N * Ho * Wo)`` with rows ordered (c, ki, kj)
and columns ordered (n, i, j). Must agree bit-for-bit with ``_pykernels``.
"""
import numpy as np


cdef inline Py_ssize_t _lo(Py_ssize_t off, Py_ssize_t stride) nogil:
    # smallest i >= 0 with i * stride + off >= 0
    if off >= 0:
        return 0
    return (-off + stride - 1) // stride


cdef inline Py_ssize_t _hi(Py_ssize_t off, Py_ssize_t stride, Py_ssize_t size, Py_ssize_t n) nogil:
    # one past the largest i < n with i * stride + off < size
    cdef Py_ssize_t top
    if size - 1 - off < 0:
        return 0
    top = (size - 1 - off) // stride + 1
    return top if top < n else n


def im2col(const double[:, :, :, ::1] x, int k, int stride, int pad):
    cdef Py_ssize_t N = x.shape[0], C = x.shape[1], H = x.shape[2], W = x.shape[3]
    cdef Py_ssize_t Ho = (H + 2 * pad - k) // stride + 1
    cdef Py_ssize_t Wo = (W + 2 * pad - k) // stride + 1
    out = np.zeros((C * k * k, N * Ho * Wo), dtype=np.float64)
    cdef double[:, ::1] o = out
    cdef Py_ssize_t c, ki, kj, n, i, j, row, base, hi, i0, i1, j0, j1, off
    cdef double* dst
    cdef const double* src
    with nogil:
        for c in range(C):
            for ki in range(k):
                i0 = _lo(ki - pad, stride)
                i1 = _hi(ki - pad, stride, H, Ho)
                for kj in range(k):
                    row = (c * k + ki) * k + kj
                    off = kj - pad
                    j0 = _lo(off, stride)
                    j1 = _hi(off, stride, W, Wo)
                    for n in range(N):
                        for i in range(i0, i1):
                            hi = i * stride + ki - pad
                            dst = &o[row, (n * Ho + i) * Wo]
                            src = &x[n, c, hi, 0]
                            for j in range(j0, j1):
                                dst[j] = src[j * stride + off]
    return out


def col2im(const double[:, ::1] cols, tuple shape, int k, int stride, int pad):
    cdef Py_ssize_t N = shape[0], C = shape[1], H = shape[2], W = shape[3]
    cdef Py_ssize_t Ho = (H + 2 * pad - k) // stride + 1
    cdef Py_ssize_t Wo = (W + 2 * pad - k) // stride + 1
    if cols.shape[0] != C * k * k or cols.shape[1] != N * Ho * Wo:
        raise ValueError(
            f"col2im: columns {cols.shape[0]}x{cols.shape[1]} do not fit image {shape} "
            f"with k={k}, stride={stride}, pad={pad}"
        )
    out = np.zeros((N, C, H, W), dtype=np.float64)
    cdef double[:, :, :, ::1] o = out
    cdef Py_ssize_t c, ki, kj, n, i, j, row, hi, i0, i1, j0, j1, off
    cdef double* dst
    cdef const double* src
    # (ki, kj) outermost: per-pixel accumulation order matches the numpy fallback
    with nogil:
        for ki in range(k):
            i0 = _lo(ki - pad, stride)
            i1 = _hi(ki - pad, stride, H, Ho)
            for kj in range(k):
                off = kj - pad
                j0 = _lo(off, stride)
                j1 = _hi(off, stride, W, Wo)
                for n in range(N):
                    for c in range(C):
                        row = (c * k + ki) * k + kj
                        for i in range(i0, i1):
                            hi = i * stride + ki - pad
                            dst = &o[n, c, hi, 0]
                            src = &cols[row, (n * Ho + i) * Wo]
                            for j in range(j0, j1):
                                dst[j * stride + off] += src[j]
    return out
