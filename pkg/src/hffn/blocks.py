"""The frequency-split feature blocks.

A feature block (FreqSplitBlock) routes half its channels through a
high-frequency enhancement branch and half through a low-frequency
distillation branch, then fuses and adds the input back. A block group
(BlockGroup) chains several feature blocks, fuses the concatenation of all
their outputs through a 1x1 conv and a contrast gate, and again closes a
residual around the whole group.

Either branch can be replaced by a single 3x3 convolution of the same width
for ablation studies; the depth-separable conv and the contrast gate inside
the low-frequency branch can likewise be swapped out or dropped.
"""

from __future__ import annotations

import numpy as np

from .layers import CCA, ConvLayer, DeconvLayer, DSConv

__all__ = ["HighFreqBranch", "LowFreqBranch", "FreqSplitBlock", "BlockGroup"]


def _check_even_spatial(name, x):
    h, w = x.shape[2], x.shape[3]
    if h % 2 or w % 2:
        raise ValueError(f"{name}: spatial dims must be even; got {h}x{w}")


class HighFreqBranch:
    """Isolate and amplify the detail component of a feature map.

    A learned 2x upsample followed by 2x2 mean pooling produces a smoothed
    copy; subtracting it leaves the high-frequency residue. That residue,
    shifted by the branch input and squashed to (0, 1), gates a convolved
    copy of the input, and a final conv mixes the result.
    """

    def __init__(self, name, channels, rng, *, dtype=np.float64):
        self.name = name
        self.channels = channels
        self.up = DeconvLayer(name + ".up", channels, channels, 2, 2, rng, dtype=dtype)
        self.conv_gate = ConvLayer(name + ".conv_gate", channels, channels, 3, rng, dtype=dtype)
        self.conv_feat = ConvLayer(name + ".conv_feat", channels, channels, 3, rng, dtype=dtype)
        self.conv_out = ConvLayer(name + ".conv_out", channels, channels, 3, rng, dtype=dtype)

    def forward(self, eng, x, record=None):
        _check_even_spatial(self.name, x)
        smooth = eng.avg_pool2d(self.up.forward(eng, x), 2, 2)
        detail = eng.sub(x, smooth)
        if record is not None:
            record["source"] = x
            record["low"] = smooth
            record["high"] = detail
        gate = eng.sigmoid(eng.add(self.conv_gate.forward(eng, detail), x))
        enhanced = eng.mul(gate, self.conv_feat.forward(eng, x))
        return self.conv_out.forward(eng, enhanced)

    def parameters(self):
        yield from self.up.parameters()
        yield from self.conv_gate.parameters()
        yield from self.conv_feat.parameters()
        yield from self.conv_out.parameters()

    def macs(self, h, w):
        return (
            self.up.macs(h, w)
            + self.conv_gate.macs(h, w)
            + self.conv_feat.macs(h, w)
            + self.conv_out.macs(h, w)
        )


class LowFreqBranch:
    """Distil the smooth component: process half the lanes, pass half through.

    The processed half goes depthwise+pointwise, then a dense 3x3, then a
    contrast gate; the identity half is concatenated back unchanged
    (processed lanes first).
    """

    def __init__(self, name, channels, rng, *, cca_reduction=4, use_dsconv=True,
                 use_cca=True, dtype=np.float64):
        if channels % 2:
            raise ValueError(f"{name}: channels must be even; got {channels}")
        self.name = name
        self.channels = channels
        self.half = channels // 2
        if use_dsconv:
            self.mixer = DSConv(name + ".mixer", self.half, rng, dtype=dtype)
        else:
            self.mixer = ConvLayer(name + ".mixer", self.half, self.half, 3, rng, dtype=dtype)
        self.conv = ConvLayer(name + ".conv", self.half, self.half, 3, rng, dtype=dtype)
        self.cca = (
            CCA(name + ".cca", self.half, cca_reduction, rng, dtype=dtype)
            if use_cca
            else None
        )

    def forward(self, eng, x):
        kept, passed = eng.channel_split(x, self.half)
        y = self.conv.forward(eng, self.mixer.forward(eng, kept))
        if self.cca is not None:
            y = self.cca.forward(eng, y)
        return eng.channel_concat([y, passed])

    def parameters(self):
        yield from self.mixer.parameters()
        yield from self.conv.parameters()
        if self.cca is not None:
            yield from self.cca.parameters()

    def macs(self, h, w):
        total = self.mixer.macs(h, w) + self.conv.macs(h, w)
        if self.cca is not None:
            total += self.cca.macs(h, w)
        return total


class FreqSplitBlock:
    """Split features into two half-width branches, fuse, add the input back.

    An entry 1x1 conv remixes channels before the split; the two branch
    outputs are concatenated (high-frequency lanes first) and fused by
    another 1x1 conv. Output = fused + input, so a zeroed fuse layer makes
    the block an exact identity.
    """

    def __init__(self, name, channels, rng, *, cca_reduction=4, use_hfe=True,
                 use_lfde=True, use_dsconv=True, use_cca=True, dtype=np.float64):
        if channels % 4:
            raise ValueError(f"{name}: channels must be divisible by 4; got {channels}")
        self.name = name
        self.channels = channels
        self.half = channels // 2
        self.entry = ConvLayer(name + ".entry", channels, channels, 1, rng, dtype=dtype)
        if use_hfe:
            self.hf = HighFreqBranch(name + ".hf", self.half, rng, dtype=dtype)
        else:
            self.hf = ConvLayer(name + ".hf", self.half, self.half, 3, rng, dtype=dtype)
        if use_lfde:
            self.lf = LowFreqBranch(
                name + ".lf", self.half, rng,
                cca_reduction=cca_reduction, use_dsconv=use_dsconv, use_cca=use_cca,
                dtype=dtype,
            )
        else:
            self.lf = ConvLayer(name + ".lf", self.half, self.half, 3, rng, dtype=dtype)
        self.fuse = ConvLayer(name + ".fuse", channels, channels, 1, rng, dtype=dtype)

    @property
    def has_freq_probe(self):
        return isinstance(self.hf, HighFreqBranch)

    def forward(self, eng, x, record=None):
        if record is not None and not self.has_freq_probe:
            raise ValueError(f"{self.name}: high-frequency branch is disabled, nothing to probe")
        z = self.entry.forward(eng, x)
        hf_in, lf_in = eng.channel_split(z, self.half)
        if isinstance(self.hf, HighFreqBranch):
            hf_out = self.hf.forward(eng, hf_in, record=record)
        else:
            hf_out = self.hf.forward(eng, hf_in)
        lf_out = self.lf.forward(eng, lf_in)
        fused = self.fuse.forward(eng, eng.channel_concat([hf_out, lf_out]))
        return eng.add(fused, x)

    def parameters(self):
        yield from self.entry.parameters()
        yield from self.hf.parameters()
        yield from self.lf.parameters()
        yield from self.fuse.parameters()

    def macs(self, h, w):
        return (
            self.entry.macs(h, w)
            + self.hf.macs(h, w)
            + self.lf.macs(h, w)
            + self.fuse.macs(h, w)
        )


class BlockGroup:
    """A chain of feature blocks with dense aggregation and a group residual.

    The outputs of all ``m`` chained blocks are concatenated, fused by a 1x1
    conv back to the working width, passed through a contrast gate, and the
    group input is added. A zeroed fuse layer therefore makes the whole
    group an exact identity.
    """

    def __init__(self, name, channels, m, rng, *, cca_reduction=4, use_hfe=True,
                 use_lfde=True, use_dsconv=True, use_cca=True, dtype=np.float64):
        if m < 1:
            raise ValueError(f"{name}: need at least one block; got m={m}")
        self.name = name
        self.channels = channels
        self.m = m
        self.blocks = [
            FreqSplitBlock(
                f"{name}.block.{i}", channels, rng,
                cca_reduction=cca_reduction, use_hfe=use_hfe, use_lfde=use_lfde,
                use_dsconv=use_dsconv, use_cca=use_cca, dtype=dtype,
            )
            for i in range(m)
        ]
        self.fuse = ConvLayer(name + ".fuse", m * channels, channels, 1, rng, dtype=dtype)
        self.cca = CCA(name + ".cca", channels, cca_reduction, rng, dtype=dtype)

    def forward(self, eng, x, probe_inner=None, record=None):
        outs = []
        h = x
        for i, blk in enumerate(self.blocks):
            rec = record if (probe_inner is not None and i == probe_inner) else None
            h = blk.forward(eng, h, record=rec)
            outs.append(h)
        fused = self.fuse.forward(eng, eng.channel_concat(outs))
        return eng.add(self.cca.forward(eng, fused), x)

    def parameters(self):
        for blk in self.blocks:
            yield from blk.parameters()
        yield from self.fuse.parameters()
        yield from self.cca.parameters()

    def macs(self, h, w):
        total = sum(blk.macs(h, w) for blk in self.blocks)
        return total + self.fuse.macs(h, w) + self.cca.macs(h, w)
