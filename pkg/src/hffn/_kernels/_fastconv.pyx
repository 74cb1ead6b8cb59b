# cython: boundscheck=False, wraparound=False, cdivision=True
# cython: language_level=3
"""Compiled im2col/col2im kernels, the convolution hot path.

Signatures and results match ``numpy_backend`` exactly (including the
floating accumulation order in col2im), so the two backends are
interchangeable bit for bit.
"""

import numpy as np

ctypedef fused floating:
    float
    double


def im2col(const floating[:, :, :, ::1] x, int kh, int kw, int stride, int pad):
    cdef Py_ssize_t b = x.shape[0]
    cdef Py_ssize_t c = x.shape[1]
    cdef Py_ssize_t h = x.shape[2]
    cdef Py_ssize_t w = x.shape[3]
    cdef Py_ssize_t ho = (h + 2 * pad - kh) // stride + 1
    cdef Py_ssize_t wo = (w + 2 * pad - kw) // stride + 1
    if floating is float:
        dtype = np.float32
    else:
        dtype = np.float64
    if kh == 1 and kw == 1 and stride == 1 and pad == 0:
        # pointwise geometry: the unfolding is a pure reshape
        return np.asarray(x).reshape(b, c, ho * wo)
    out_arr = np.zeros((b, c * kh * kw, ho * wo), dtype=dtype)
    cdef floating[:, :, ::1] out = out_arr
    cdef Py_ssize_t ib, ic, i, j, oh, ow, row, hh, base
    cdef Py_ssize_t oh_lo, oh_hi, ow_lo, ow_hi
    with nogil:
        for ib in range(b):
            for ic in range(c):
                for i in range(kh):
                    # half-open range of oh with 0 <= oh*stride - pad + i < h;
                    # hoisting the bounds keeps the inner loops branch-free
                    oh_lo = 0 if pad <= i else (pad - i + stride - 1) // stride
                    oh_hi = (h - 1 + pad - i) // stride + 1
                    if oh_hi > ho:
                        oh_hi = ho
                    for j in range(kw):
                        row = (ic * kh + i) * kw + j
                        ow_lo = 0 if pad <= j else (pad - j + stride - 1) // stride
                        ow_hi = (w - 1 + pad - j) // stride + 1
                        if ow_hi > wo:
                            ow_hi = wo
                        for oh in range(oh_lo, oh_hi):
                            hh = oh * stride - pad + i
                            base = oh * wo
                            for ow in range(ow_lo, ow_hi):
                                out[ib, row, base + ow] = x[ib, ic, hh, ow * stride - pad + j]
    return out_arr


def col2im(const floating[:, :, ::1] cols, Py_ssize_t h, Py_ssize_t w,
           int kh, int kw, int stride, int pad):
    cdef Py_ssize_t b = cols.shape[0]
    cdef Py_ssize_t c = cols.shape[1] // (kh * kw)
    cdef Py_ssize_t ho = (h + 2 * pad - kh) // stride + 1
    cdef Py_ssize_t wo = (w + 2 * pad - kw) // stride + 1
    if floating is float:
        dtype = np.float32
    else:
        dtype = np.float64
    if kh == 1 and kw == 1 and stride == 1 and pad == 0:
        # pointwise geometry: every column lands on exactly one pixel
        return np.asarray(cols).reshape(b, c, h, w).copy()
    out_arr = np.zeros((b, c, h, w), dtype=dtype)
    cdef floating[:, :, :, ::1] out = out_arr
    cdef Py_ssize_t ib, ic, i, j, oh, ow, row, hh, base
    cdef Py_ssize_t oh_lo, oh_hi, ow_lo, ow_hi
    with nogil:
        for ib in range(b):
            for ic in range(c):
                for i in range(kh):
                    # same hoisted bounds as im2col; the set and order of
                    # accumulations per output cell is unchanged (increasing
                    # (i, j)), keeping results bit-identical to the fallback
                    oh_lo = 0 if pad <= i else (pad - i + stride - 1) // stride
                    oh_hi = (h - 1 + pad - i) // stride + 1
                    if oh_hi > ho:
                        oh_hi = ho
                    for j in range(kw):
                        row = (ic * kh + i) * kw + j
                        ow_lo = 0 if pad <= j else (pad - j + stride - 1) // stride
                        ow_hi = (w - 1 + pad - j) // stride + 1
                        if ow_hi > wo:
                            ow_hi = wo
                        for oh in range(oh_lo, oh_hi):
                            hh = oh * stride - pad + i
                            base = oh * wo
                            for ow in range(ow_lo, ow_hi):
                                out[ib, ic, hh, ow * stride - pad + j] += cols[ib, row, base + ow]
    return out_arr
