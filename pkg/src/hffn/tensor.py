"""Dense NCHW tensors and the primitive operations the network is built from.

Everything in this module is a pure function: inputs are never mutated (the
backing numpy buffers are write-protected) and each operation allocates a
fresh result. Every constructed tensor is checked to be finite, so NaN/Inf
can never propagate silently; the first non-finite value raises
:class:`NonFiniteError` at the op that produced it.

Layout is strictly (batch, channels, height, width), row-major with width
fastest. float64 is the default dtype and what the tests differentiate in;
float32 is supported for lighter inference. Dense convolutions are computed
as im2col + batched matmul via :mod:`hffn._kernels`, which picks a compiled
backend when available. Internal BLAS parallelism is fine: for a fixed
thread count results are bit-stable.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from . import _kernels

__all__ = [
    "NonFiniteError",
    "Tensor",
    "zeros",
    "full",
    "conv2d",
    "conv_transpose2d",
    "depthwise_conv2d",
    "avg_pool2d",
    "pixel_shuffle",
    "pixel_unshuffle",
    "channel_split",
    "channel_slice",
    "channel_concat",
    "add",
    "sub",
    "mul",
    "sigmoid",
    "leaky_relu",
    "scale_channels",
    "channel_contrast",
    "sum_all",
    "mean_all",
    "reflect_pad2d",
    "crop_hw",
]

_FLOAT_DTYPES = (np.dtype(np.float32), np.dtype(np.float64))


class NonFiniteError(ArithmeticError):
    """An operation produced (or was handed) NaN or infinite values."""


def _validated(arr):
    if arr.ndim != 4:
        raise ValueError(f"tensors are 4-D (B, C, H, W); got shape {arr.shape}")
    if min(arr.shape) < 1:
        raise ValueError(f"all tensor dims must be >= 1; got shape {arr.shape}")
    if not np.isfinite(arr).all():
        raise NonFiniteError("tensor contains NaN or Inf values")
    return arr


class Tensor:
    """Immutable dense 4-D array with shape (batch, channels, height, width).

    The constructor copies its input; ``data`` is a write-protected,
    C-contiguous numpy array. dtype is float32 or float64 (anything else is
    converted to float64). Values must be finite.
    """

    __slots__ = ("data",)

    def __init__(self, data, dtype=None):
        arr = np.array(data, dtype=dtype, copy=True)
        if arr.dtype not in _FLOAT_DTYPES:
            arr = arr.astype(np.float64)
        arr = _validated(np.ascontiguousarray(arr))
        arr.setflags(write=False)
        self.data = arr

    @classmethod
    def _wrap(cls, arr):
        """Adopt a freshly allocated array without copying."""
        t = cls.__new__(cls)
        arr = _validated(np.ascontiguousarray(arr))
        arr.setflags(write=False)
        t.data = arr
        return t

    @property
    def shape(self):
        return self.data.shape

    @property
    def batch(self):
        return self.data.shape[0]

    @property
    def channels(self):
        return self.data.shape[1]

    @property
    def height(self):
        return self.data.shape[2]

    @property
    def width(self):
        return self.data.shape[3]

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self):
        return self.data.size

    def item(self):
        """The single value of a one-element tensor, as a Python float."""
        if self.data.size != 1:
            raise ValueError(f"item() needs a one-element tensor; got shape {self.shape}")
        return float(self.data.reshape(()))

    def astype(self, dtype):
        """Copy of this tensor in the given dtype."""
        dt = np.dtype(dtype)
        if dt not in _FLOAT_DTYPES:
            raise ValueError(f"tensor dtype must be float32 or float64; got {dt}")
        return Tensor._wrap(self.data.astype(dt))

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.dtype.name})"


def zeros(shape, dtype=np.float64):
    return Tensor._wrap(np.zeros(shape, dtype=dtype))


def full(shape, value, dtype=np.float64):
    return Tensor._wrap(np.full(shape, value, dtype=dtype))


def _check_tensor(name, t):
    if not isinstance(t, Tensor):
        raise TypeError(f"{name} must be a Tensor, not {type(t).__name__}")


def _check_same_dtype(op, *tensors):
    dtypes = {t.dtype for t in tensors}
    if len(dtypes) > 1:
        raise ValueError(f"{op}: mixed dtypes {sorted(d.name for d in dtypes)}")


# ---------------------------------------------------------------------------
# convolutions
# ---------------------------------------------------------------------------

def _conv2d_forward(xa, wa, ba, stride, padding):
    b, _, h, w = xa.shape
    co, ci, kh, kw = wa.shape
    cols = _kernels.im2col(xa, kh, kw, stride, padding)
    out = np.matmul(wa.reshape(co, ci * kh * kw), cols)
    ho = (h + 2 * padding - kh) // stride + 1
    wo = (w + 2 * padding - kw) // stride + 1
    out = out.reshape(b, co, ho, wo)
    if ba is not None:
        out = out + ba
    return out


def _conv2d_input_grad(ga, wa, stride, padding, in_hw):
    b, co = ga.shape[0], ga.shape[1]
    _, ci, kh, kw = wa.shape
    w2 = wa.reshape(co, ci * kh * kw)
    dcols = np.matmul(w2.T, ga.reshape(b, co, -1))
    return _kernels.col2im(
        np.ascontiguousarray(dcols), in_hw[0], in_hw[1], kh, kw, stride, padding
    )


def _conv2d_weight_grad(xa, ga, stride, padding, wshape):
    co, ci, kh, kw = wshape
    b = xa.shape[0]
    cols = _kernels.im2col(xa, kh, kw, stride, padding)
    g2 = ga.reshape(b, co, -1)
    dw = np.tensordot(g2, cols, axes=([0, 2], [0, 2]))
    return np.ascontiguousarray(dw.reshape(wshape))


def conv2d(x, weight, bias=None, stride=1, padding=0):
    """2-D cross-correlation with zero padding.

    ``weight`` has shape (out_ch, in_ch, kH, kW); ``bias`` is None or
    (1, out_ch, 1, 1). Output (B, out_ch, Ho, Wo) with
    Ho = (H + 2*padding - kH)//stride + 1 and likewise for Wo.
    """
    _check_tensor("x", x)
    _check_tensor("weight", weight)
    co, ci, kh, kw = weight.shape
    if x.channels != ci:
        raise ValueError(f"conv2d: input has {x.channels} channels, kernel expects {ci}")
    if stride < 1:
        raise ValueError(f"conv2d: stride must be positive; got {stride}")
    if padding < 0:
        raise ValueError(f"conv2d: padding must be >= 0; got {padding}")
    if x.height + 2 * padding < kh or x.width + 2 * padding < kw:
        raise ValueError(
            f"conv2d: kernel {kh}x{kw} does not fit input "
            f"{x.height}x{x.width} with padding {padding}"
        )
    tensors = [x, weight]
    if bias is not None:
        _check_tensor("bias", bias)
        if bias.shape != (1, co, 1, 1):
            raise ValueError(f"conv2d: bias shape {bias.shape} != (1, {co}, 1, 1)")
        tensors.append(bias)
    _check_same_dtype("conv2d", *tensors)
    ba = None if bias is None else bias.data
    return Tensor._wrap(_conv2d_forward(x.data, weight.data, ba, stride, padding))


def conv_transpose2d(x, weight, bias=None, stride=1):
    """Transposed 2-D convolution (exact adjoint of striding conv2d).

    ``weight`` has shape (in_ch, out_ch, kH, kW). Output spatial size is
    (H - 1)*stride + kH by (W - 1)*stride + kW; each input pixel scatters a
    weighted kernel into the output, overlaps summing.
    """
    _check_tensor("x", x)
    _check_tensor("weight", weight)
    ci, co, kh, kw = weight.shape
    if x.channels != ci:
        raise ValueError(
            f"conv_transpose2d: input has {x.channels} channels, kernel expects {ci}"
        )
    if stride < 1:
        raise ValueError(f"conv_transpose2d: stride must be positive; got {stride}")
    tensors = [x, weight]
    if bias is not None:
        _check_tensor("bias", bias)
        if bias.shape != (1, co, 1, 1):
            raise ValueError(
                f"conv_transpose2d: bias shape {bias.shape} != (1, {co}, 1, 1)"
            )
        tensors.append(bias)
    _check_same_dtype("conv_transpose2d", *tensors)
    h = (x.height - 1) * stride + kh
    w = (x.width - 1) * stride + kw
    out = _conv2d_input_grad(x.data, weight.data, stride, 0, (h, w))
    if bias is not None:
        out = out + bias.data
    return Tensor._wrap(out)


def _depthwise_windows(xa, kh, kw, padding):
    if padding:
        xa = np.pad(xa, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    return sliding_window_view(xa, (kh, kw), axis=(2, 3))


def _depthwise_forward(xa, wa, ba, padding):
    win = _depthwise_windows(xa, wa.shape[2], wa.shape[3], padding)
    out = np.einsum("bchwij,cij->bchw", win, wa[:, 0], optimize=True)
    if ba is not None:
        out = out + ba
    return np.ascontiguousarray(out)


def _depthwise_input_grad(ga, wa, padding, in_hw):
    kh, kw = wa.shape[2], wa.shape[3]
    # full correlation of the output grad with the flipped kernel
    win = _depthwise_windows(ga, kh, kw, kh - 1 - padding)
    wflip = wa[:, 0, ::-1, ::-1]
    dx = np.einsum("bchwij,cij->bchw", win, wflip, optimize=True)
    if dx.shape[2:] != in_hw:
        raise ValueError(f"depthwise input grad shape {dx.shape[2:]} != {in_hw}")
    return np.ascontiguousarray(dx)


def _depthwise_weight_grad(xa, ga, padding, wshape):
    kh, kw = wshape[2], wshape[3]
    win = _depthwise_windows(xa, kh, kw, padding)
    dw = np.einsum("bchwij,bchw->cij", win, ga, optimize=True)
    return np.ascontiguousarray(dw.reshape(wshape))


def depthwise_conv2d(x, weight, bias=None, padding=0):
    """Per-channel 3x3-style convolution (stride 1).

    ``weight`` has shape (C, 1, kH, kW): channel c of the output depends on
    channel c of the input only.
    """
    _check_tensor("x", x)
    _check_tensor("weight", weight)
    c, one, kh, kw = weight.shape
    if one != 1:
        raise ValueError(f"depthwise_conv2d: weight shape {weight.shape} != (C, 1, kH, kW)")
    if x.channels != c:
        raise ValueError(
            f"depthwise_conv2d: input has {x.channels} channels, kernel expects {c}"
        )
    if padding < 0:
        raise ValueError(f"depthwise_conv2d: padding must be >= 0; got {padding}")
    if x.height + 2 * padding < kh or x.width + 2 * padding < kw:
        raise ValueError(
            f"depthwise_conv2d: kernel {kh}x{kw} does not fit input "
            f"{x.height}x{x.width} with padding {padding}"
        )
    tensors = [x, weight]
    if bias is not None:
        _check_tensor("bias", bias)
        if bias.shape != (1, c, 1, 1):
            raise ValueError(f"depthwise_conv2d: bias shape {bias.shape} != (1, {c}, 1, 1)")
        tensors.append(bias)
    _check_same_dtype("depthwise_conv2d", *tensors)
    ba = None if bias is None else bias.data
    return Tensor._wrap(_depthwise_forward(x.data, weight.data, ba, padding))


# ---------------------------------------------------------------------------
# pooling and space/channel reshuffles
# ---------------------------------------------------------------------------

def _avg_pool_forward(xa, kernel, stride):
    win = sliding_window_view(xa, (kernel, kernel), axis=(2, 3))
    win = win[:, :, ::stride, ::stride]
    return np.ascontiguousarray(win.mean(axis=(-2, -1)))


def _avg_pool_grad(ga, kernel, stride, in_hw):
    b, c, ho, wo = ga.shape
    dx = np.zeros((b, c) + in_hw, dtype=ga.dtype)
    share = ga / float(kernel * kernel)
    for i in range(kernel):
        for j in range(kernel):
            dx[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += share
    return dx


def avg_pool2d(x, kernel, stride):
    """Mean over kernel x kernel windows placed every ``stride`` pixels.

    No padding. For the non-overlapping case (kernel == stride) the spatial
    dims must divide evenly so no input pixel is dropped.
    """
    _check_tensor("x", x)
    if kernel < 1 or stride < 1:
        raise ValueError(f"avg_pool2d: kernel and stride must be positive; got {kernel}, {stride}")
    if kernel == stride and (x.height % stride or x.width % stride):
        raise ValueError(
            f"avg_pool2d: spatial dims {x.height}x{x.width} not divisible by {stride}"
        )
    if x.height < kernel or x.width < kernel:
        raise ValueError(
            f"avg_pool2d: window {kernel}x{kernel} does not fit input {x.height}x{x.width}"
        )
    return Tensor._wrap(_avg_pool_forward(x.data, kernel, stride))


def _pixel_shuffle_forward(xa, r):
    b, c, h, w = xa.shape
    cr = c // (r * r)
    y = xa.reshape(b, cr, r, r, h, w)
    y = y.transpose(0, 1, 4, 2, 5, 3)
    return np.ascontiguousarray(y.reshape(b, cr, h * r, w * r))


def _pixel_unshuffle_forward(xa, r):
    b, c, h, w = xa.shape
    y = xa.reshape(b, c, h // r, r, w // r, r)
    y = y.transpose(0, 1, 3, 5, 2, 4)
    return np.ascontiguousarray(y.reshape(b, c * r * r, h // r, w // r))


def pixel_shuffle(x, r):
    """Rearrange (B, C*r*r, H, W) into (B, C, H*r, W*r).

    out[b, c, h*r + i, w*r + j] = in[b, c*r*r + i*r + j, h, w]: each group of
    r*r channels becomes one r x r sub-pixel block.
    """
    _check_tensor("x", x)
    if r < 1:
        raise ValueError(f"pixel_shuffle: factor must be positive; got {r}")
    if x.channels % (r * r):
        raise ValueError(
            f"pixel_shuffle: channels {x.channels} not divisible by {r}*{r}"
        )
    return Tensor._wrap(_pixel_shuffle_forward(x.data, r))


def pixel_unshuffle(x, r):
    """Exact inverse of :func:`pixel_shuffle`."""
    _check_tensor("x", x)
    if r < 1:
        raise ValueError(f"pixel_unshuffle: factor must be positive; got {r}")
    if x.height % r or x.width % r:
        raise ValueError(
            f"pixel_unshuffle: spatial dims {x.height}x{x.width} not divisible by {r}"
        )
    return Tensor._wrap(_pixel_unshuffle_forward(x.data, r))


def channel_slice(x, c0, c1):
    """Channels [c0, c1) of ``x`` as a fresh tensor."""
    _check_tensor("x", x)
    if not (0 <= c0 < c1 <= x.channels):
        raise ValueError(
            f"channel_slice: invalid range [{c0}, {c1}) for {x.channels} channels"
        )
    return Tensor._wrap(x.data[:, c0:c1].copy())


def channel_split(x, at):
    """Split ``x`` into channels [0, at) and [at, C)."""
    _check_tensor("x", x)
    if not (0 < at < x.channels):
        raise ValueError(f"channel_split: split point {at} outside (0, {x.channels})")
    return channel_slice(x, 0, at), channel_slice(x, at, x.channels)


def channel_concat(parts):
    """Concatenate tensors along the channel axis."""
    parts = list(parts)
    if not parts:
        raise ValueError("channel_concat: need at least one tensor")
    for i, p in enumerate(parts):
        _check_tensor(f"parts[{i}]", p)
    first = parts[0]
    for i, p in enumerate(parts[1:], start=1):
        if (p.batch, p.height, p.width) != (first.batch, first.height, first.width):
            raise ValueError(
                f"channel_concat: parts[{i}] shape {p.shape} does not match "
                f"parts[0] shape {first.shape} outside the channel axis"
            )
    _check_same_dtype("channel_concat", *parts)
    return Tensor._wrap(np.concatenate([p.data for p in parts], axis=1))


# ---------------------------------------------------------------------------
# elementwise and reductions
# ---------------------------------------------------------------------------

def _check_binary(op, a, b):
    _check_tensor("a", a)
    _check_tensor("b", b)
    if a.shape != b.shape:
        raise ValueError(f"{op}: shape mismatch {a.shape} vs {b.shape}")
    _check_same_dtype(op, a, b)


def add(a, b):
    _check_binary("add", a, b)
    return Tensor._wrap(a.data + b.data)


def sub(a, b):
    _check_binary("sub", a, b)
    return Tensor._wrap(a.data - b.data)


def mul(a, b):
    _check_binary("mul", a, b)
    return Tensor._wrap(a.data * b.data)


def _sigmoid(a):
    out = np.empty_like(a)
    pos = a >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-a[pos]))
    ea = np.exp(a[~pos])
    out[~pos] = ea / (1.0 + ea)
    return out


def sigmoid(x):
    """Logistic function, numerically stable at both tails."""
    _check_tensor("x", x)
    return Tensor._wrap(_sigmoid(x.data))


def leaky_relu(x, slope=0.05):
    """x for x >= 0, slope*x otherwise."""
    _check_tensor("x", x)
    return Tensor._wrap(np.where(x.data >= 0, x.data, x.data * x.dtype.type(slope)))


def scale_channels(x, gate):
    """Multiply each (b, c) plane of ``x`` by the scalar gate[b, c, 0, 0]."""
    _check_tensor("x", x)
    _check_tensor("gate", gate)
    if gate.shape != (x.batch, x.channels, 1, 1):
        raise ValueError(
            f"scale_channels: gate shape {gate.shape} != ({x.batch}, {x.channels}, 1, 1)"
        )
    _check_same_dtype("scale_channels", x, gate)
    return Tensor._wrap(x.data * gate.data)


def _channel_contrast_stats(xa, eps):
    m = xa.mean(axis=(2, 3), keepdims=True)
    var = np.square(xa - m).mean(axis=(2, 3), keepdims=True)
    sd = np.sqrt(var + eps)
    return m, sd


def channel_contrast(x, eps=1e-8):
    """Per-channel contrast statistic: spatial mean plus population std.

    Output shape (B, C, 1, 1). ``eps`` sits inside the square root so the
    statistic is differentiable at constant channels.
    """
    _check_tensor("x", x)
    m, sd = _channel_contrast_stats(x.data, eps)
    return Tensor._wrap(m + sd)


def sum_all(x):
    """Sum of all elements, as a (1, 1, 1, 1) tensor."""
    _check_tensor("x", x)
    return Tensor._wrap(x.data.sum(dtype=x.dtype).reshape(1, 1, 1, 1))


def mean_all(x):
    """Mean of all elements, as a (1, 1, 1, 1) tensor."""
    _check_tensor("x", x)
    return Tensor._wrap(x.data.mean(dtype=x.dtype).reshape(1, 1, 1, 1))


# ---------------------------------------------------------------------------
# border helpers (inference-side padding/cropping)
# ---------------------------------------------------------------------------

def reflect_pad2d(x, pad_h, pad_w):
    """Reflect-pad the bottom by ``pad_h`` rows and the right by ``pad_w`` cols."""
    _check_tensor("x", x)
    if pad_h < 0 or pad_w < 0:
        raise ValueError(f"reflect_pad2d: pads must be >= 0; got {pad_h}, {pad_w}")
    if pad_h >= x.height or pad_w >= x.width:
        raise ValueError(
            f"reflect_pad2d: pads ({pad_h}, {pad_w}) too large for input "
            f"{x.height}x{x.width}"
        )
    if pad_h == 0 and pad_w == 0:
        return x
    out = np.pad(x.data, ((0, 0), (0, 0), (0, pad_h), (0, pad_w)), mode="reflect")
    return Tensor._wrap(out)


def crop_hw(x, height, width):
    """Top-left crop to ``height`` x ``width``."""
    _check_tensor("x", x)
    if not (1 <= height <= x.height and 1 <= width <= x.width):
        raise ValueError(
            f"crop_hw: target {height}x{width} outside input {x.height}x{x.width}"
        )
    return Tensor._wrap(x.data[:, :, :height, :width].copy())
