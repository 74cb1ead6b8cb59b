"""Pure-numpy im2col/col2im, the fallback convolution backend.

Both functions must stay bit-identical to the compiled backend in
``_fastconv.pyx``: per output cell, col2im accumulates contributions in
increasing (i, j) kernel-offset order in both implementations, so results
of either backend can be compared exactly.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import as_strided


def im2col(x, kh, kw, stride, pad):
    """Unfold (B, C, H, W) into patch columns (B, C*kh*kw, Ho*Wo).

    Row index is (c*kh + i)*kw + j for channel c and kernel offset (i, j);
    column index is oh*Wo + ow. Out-of-image taps read as zero.
    """
    b, c, h, w = x.shape
    if pad:
        x = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    hp, wp = h + 2 * pad, w + 2 * pad
    ho = (hp - kh) // stride + 1
    wo = (wp - kw) // stride + 1
    s0, s1, s2, s3 = x.strides
    win = as_strided(
        x,
        shape=(b, c, kh, kw, ho, wo),
        strides=(s0, s1, s2, s3, s2 * stride, s3 * stride),
    )
    return win.reshape(b, c * kh * kw, ho * wo)


def col2im(cols, h, w, kh, kw, stride, pad):
    """Scatter-add patch columns (B, C*kh*kw, Ho*Wo) back to (B, C, H, W).

    Exact adjoint of :func:`im2col` for the same geometry.
    """
    b = cols.shape[0]
    c = cols.shape[1] // (kh * kw)
    hp, wp = h + 2 * pad, w + 2 * pad
    ho = (hp - kh) // stride + 1
    wo = (wp - kw) // stride + 1
    c6 = cols.reshape(b, c, kh, kw, ho, wo)
    out = np.zeros((b, c, hp, wp), dtype=cols.dtype)
    for i in range(kh):
        for j in range(kw):
            out[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += c6[
                :, :, i, j
            ]
    if pad:
        out = np.ascontiguousarray(out[:, :, pad : pad + h, pad : pad + w])
    return out
