"""Parameterised layers: convolutions, the depth-separable pair, the
contrast-aware channel gate, and the upscaling reconstruction head.

Layers hold named :class:`Parameter` objects and execute through the engine
protocol (see :mod:`hffn.autodiff`), so the same forward code runs both
plainly and under a recording tape. Weight init is fan-in scaled uniform
(Kaiming style, leaky slope 0.05); biases start at zero. Every layer knows
its own multiply-accumulate cost via ``macs(h, w)`` for the complexity
report.
"""

from __future__ import annotations

import math

import numpy as np

from . import tensor as T

__all__ = ["Parameter", "ConvLayer", "DeconvLayer", "DSConv", "CCA", "ReconstructionHead"]

_ACTIVATIONS = ("none", "leaky_relu", "sigmoid")


class Parameter:
    """A named weight tensor. ``value`` is reassigned (never mutated) by updates."""

    __slots__ = ("name", "value")

    def __init__(self, name, value):
        self.name = name
        self.value = value

    def __repr__(self):
        return f"Parameter({self.name!r}, shape={self.value.shape})"


def _fan_in_uniform(rng, shape, fan_in, dtype, slope=0.05):
    bound = math.sqrt(6.0 / ((1.0 + slope * slope) * fan_in))
    return T.Tensor(rng.uniform(-bound, bound, size=shape).astype(dtype))


class ConvLayer:
    """Dense 2-D convolution, optionally followed by a pointwise activation.

    Padding defaults to (k-1)//2 so stride-1 convs preserve spatial size.
    """

    def __init__(self, name, in_ch, out_ch, ksize, rng, *, stride=1, padding=None,
                 activation="none", dtype=np.float64):
        if activation not in _ACTIVATIONS:
            raise ValueError(f"{name}: unknown activation {activation!r}")
        self.name = name
        self.in_ch = in_ch
        self.out_ch = out_ch
        self.ksize = ksize
        self.stride = stride
        self.padding = (ksize - 1) // 2 if padding is None else padding
        self.activation = activation
        self.weight = Parameter(
            name + ".weight",
            _fan_in_uniform(rng, (out_ch, in_ch, ksize, ksize), in_ch * ksize * ksize, dtype),
        )
        self.bias = Parameter(name + ".bias", T.zeros((1, out_ch, 1, 1), dtype=dtype))

    def forward(self, eng, x):
        y = eng.conv2d(
            x, eng.param(self.weight), eng.param(self.bias),
            stride=self.stride, padding=self.padding,
        )
        if self.activation == "leaky_relu":
            y = eng.leaky_relu(y, 0.05)
        elif self.activation == "sigmoid":
            y = eng.sigmoid(y)
        return y

    def parameters(self):
        yield self.weight
        yield self.bias

    def macs(self, h, w):
        return h * w * self.out_ch * self.in_ch * self.ksize * self.ksize


class DeconvLayer:
    """Transposed convolution (used as the learned 2x upsampler)."""

    def __init__(self, name, in_ch, out_ch, ksize, stride, rng, *, dtype=np.float64):
        self.name = name
        self.in_ch = in_ch
        self.out_ch = out_ch
        self.ksize = ksize
        self.stride = stride
        self.weight = Parameter(
            name + ".weight",
            _fan_in_uniform(rng, (in_ch, out_ch, ksize, ksize), in_ch * ksize * ksize, dtype),
        )
        self.bias = Parameter(name + ".bias", T.zeros((1, out_ch, 1, 1), dtype=dtype))

    def forward(self, eng, x):
        return eng.conv_transpose2d(
            x, eng.param(self.weight), eng.param(self.bias), stride=self.stride
        )

    def parameters(self):
        yield self.weight
        yield self.bias

    def macs(self, h, w):
        # every input pixel scatters a full kernel: true multiply count
        return h * w * self.in_ch * self.out_ch * self.ksize * self.ksize


class DSConv:
    """Depthwise 3x3 followed by pointwise 1x1 (depth-separable convolution)."""

    def __init__(self, name, channels, rng, *, ksize=3, dtype=np.float64):
        self.name = name
        self.channels = channels
        self.ksize = ksize
        self.padding = (ksize - 1) // 2
        self.dw_weight = Parameter(
            name + ".dw.weight",
            _fan_in_uniform(rng, (channels, 1, ksize, ksize), ksize * ksize, dtype),
        )
        self.dw_bias = Parameter(name + ".dw.bias", T.zeros((1, channels, 1, 1), dtype=dtype))
        self.pointwise = ConvLayer(name + ".pw", channels, channels, 1, rng, dtype=dtype)

    def forward(self, eng, x):
        y = eng.depthwise_conv2d(
            x, eng.param(self.dw_weight), eng.param(self.dw_bias), padding=self.padding
        )
        return self.pointwise.forward(eng, y)

    def parameters(self):
        yield self.dw_weight
        yield self.dw_bias
        yield from self.pointwise.parameters()

    def macs(self, h, w):
        return h * w * self.channels * self.ksize * self.ksize + self.pointwise.macs(h, w)


class CCA:
    """Contrast-aware channel attention.

    Per channel, the summary statistic is spatial mean plus population
    standard deviation; a squeeze/expand pair of 1x1 convs (leaky ReLU 0.05
    between, sigmoid after) turns it into a gate in (0, 1) that rescales the
    channel.
    """

    def __init__(self, name, channels, reduction, rng, *, dtype=np.float64):
        if reduction < 1:
            raise ValueError(f"{name}: reduction must be >= 1; got {reduction}")
        if channels % reduction:
            raise ValueError(
                f"{name}: channels {channels} not divisible by reduction {reduction}"
            )
        self.name = name
        self.channels = channels
        self.reduction = reduction
        reduced = channels // reduction
        self.reduce = ConvLayer(
            name + ".reduce", channels, reduced, 1, rng, activation="leaky_relu", dtype=dtype
        )
        self.expand = ConvLayer(
            name + ".expand", reduced, channels, 1, rng, activation="sigmoid", dtype=dtype
        )

    def forward(self, eng, x):
        stat = eng.channel_contrast(x)
        gate = self.expand.forward(eng, self.reduce.forward(eng, stat))
        return eng.scale_channels(x, gate)

    def parameters(self):
        yield from self.reduce.parameters()
        yield from self.expand.parameters()

    def macs(self, h, w):
        # the squeeze/expand pair runs on 1x1 summaries regardless of h, w
        return self.reduce.macs(1, 1) + self.expand.macs(1, 1)


class ReconstructionHead:
    """3x3 conv to scale^2 sub-pixel channels per RGB plane, then pixel shuffle."""

    def __init__(self, name, in_ch, scale, rng, *, out_colors=3, dtype=np.float64):
        if scale < 1:
            raise ValueError(f"{name}: scale must be >= 1; got {scale}")
        self.name = name
        self.scale = scale
        self.out_colors = out_colors
        self.conv = ConvLayer(
            name + ".conv", in_ch, out_colors * scale * scale, 3, rng, dtype=dtype
        )

    def forward(self, eng, x):
        y = self.conv.forward(eng, x)
        if self.scale == 1:
            return y
        return eng.pixel_shuffle(y, self.scale)

    def parameters(self):
        yield from self.conv.parameters()

    def macs(self, h, w):
        return self.conv.macs(h, w)
