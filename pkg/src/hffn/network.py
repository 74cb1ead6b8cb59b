"""Network assembly, complexity accounting and weight serialization.

The model is: a 3x3 shallow feature extractor, ``n`` block groups (each a
chain of ``m`` frequency-split blocks, see :mod:`hffn.blocks`), global
fusion of the concatenated group outputs (1x1 then 3x3 conv), a long
residual from the shallow features, and a reconstruction head (3x3 conv to
scale^2 sub-pixel channels, pixel shuffle). With block groups disabled the
n*m blocks run as one flat chain and the global fusion concatenates every
block output.

Inputs with odd spatial dims are reflect-padded to even before the trunk
and the output is cropped back to exactly (H*scale, W*scale).
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import asdict, dataclass, fields

import numpy as np

from . import tensor as T
from .autodiff import EVAL, Node, Tape
from .blocks import BlockGroup, FreqSplitBlock
from .layers import ConvLayer, ReconstructionHead

__all__ = [
    "ModelConfig",
    "Model",
    "build",
    "save_weights",
    "load_weights",
    "dihedral_average",
    "WeightFileError",
]

_MAGIC = b"HFFN"
_VERSION = 1


class WeightFileError(RuntimeError):
    """A weight file is malformed or does not match the target model."""


@dataclass(frozen=True)
class ModelConfig:
    """Architecture hyperparameters. Instances are immutable and hashable."""

    scale: int = 4
    channels: int = 48
    n_groups: int = 6
    m_blocks: int = 5
    cca_reduction: int = 4
    hfe_enabled: bool = True
    lfde_enabled: bool = True
    groups_enabled: bool = True
    dsconv_enabled: bool = True
    cca_enabled: bool = True

    def validate(self):
        """Raise ValueError naming every violated constraint."""
        problems = []
        if self.scale not in (2, 3, 4):
            problems.append(f"scale must be 2, 3 or 4; got {self.scale}")
        if self.channels < 4 or self.channels % 4:
            problems.append(
                f"channels must be a positive multiple of 4; got {self.channels}"
            )
        if self.n_groups < 1:
            problems.append(f"n_groups must be >= 1; got {self.n_groups}")
        if self.m_blocks < 1:
            problems.append(f"m_blocks must be >= 1; got {self.m_blocks}")
        if self.cca_reduction < 1:
            problems.append(f"cca_reduction must be >= 1; got {self.cca_reduction}")
        else:
            if self.channels % 4 == 0:
                if self.lfde_enabled and self.cca_enabled:
                    quarter = self.channels // 4
                    if quarter % self.cca_reduction:
                        problems.append(
                            f"low-frequency branch width {quarter} not divisible by "
                            f"cca_reduction {self.cca_reduction}"
                        )
                if self.groups_enabled and self.channels % self.cca_reduction:
                    problems.append(
                        f"channels {self.channels} not divisible by "
                        f"cca_reduction {self.cca_reduction}"
                    )
        if problems:
            raise ValueError("invalid model config: " + "; ".join(problems))
        return self

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config fields: {sorted(unknown)}")
        return cls(**d).validate()

    def canonical_json(self):
        """Key-sorted, whitespace-free JSON; the fingerprint input."""
        return json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))

    def fingerprint(self):
        """sha256 of the canonical JSON (32 bytes)."""
        return hashlib.sha256(self.canonical_json().encode("ascii")).digest()


class Model:
    """The assembled network. Build via :func:`build`."""

    def __init__(self, config, seed=0, dtype=np.float64):
        config.validate()
        self.config = config
        self.seed = seed
        rng = np.random.default_rng(seed)
        c = config.channels
        kw = dict(
            cca_reduction=config.cca_reduction,
            use_hfe=config.hfe_enabled,
            use_lfde=config.lfde_enabled,
            use_dsconv=config.dsconv_enabled,
            use_cca=config.cca_enabled,
            dtype=dtype,
        )
        self.sfe = ConvLayer("sfe", 3, c, 3, rng, dtype=dtype)
        if config.groups_enabled:
            self.groups = [
                BlockGroup(f"group.{i}", c, config.m_blocks, rng, **kw)
                for i in range(config.n_groups)
            ]
            self.chain = None
            fuse_in = config.n_groups * c
        else:
            self.groups = None
            self.chain = [
                FreqSplitBlock(f"block.{i}", c, rng, **kw)
                for i in range(config.n_groups * config.m_blocks)
            ]
            fuse_in = config.n_groups * config.m_blocks * c
        self.fuse_mix = ConvLayer("fuse.mix", fuse_in, c, 1, rng, dtype=dtype)
        self.fuse_smooth = ConvLayer("fuse.smooth", c, c, 3, rng, dtype=dtype)
        self.head = ReconstructionHead("head", c, config.scale, rng, dtype=dtype)

        self._params = list(self._iter_parameters())
        names = [p.name for p in self._params]
        if len(names) != len(set(names)):
            raise RuntimeError("duplicate parameter names in model")

    def _iter_parameters(self):
        yield from self.sfe.parameters()
        for unit in self.groups if self.groups is not None else self.chain:
            yield from unit.parameters()
        yield from self.fuse_mix.parameters()
        yield from self.fuse_smooth.parameters()
        yield from self.head.parameters()

    # -- parameter access ----------------------------------------------------

    def parameters(self):
        """All parameters in deterministic construction order."""
        return list(self._params)

    def parameter_dict(self):
        return {p.name: p.value for p in self._params}

    def load_parameter_dict(self, values):
        """Reassign every parameter from name -> Tensor (shapes must match)."""
        missing = [p.name for p in self._params if p.name not in values]
        if missing:
            raise ValueError(f"missing parameters: {missing[:5]}")
        for p in self._params:
            v = values[p.name]
            if v.shape != p.value.shape:
                raise ValueError(
                    f"parameter {p.name}: shape {v.shape} != expected {p.value.shape}"
                )
            p.value = v

    @property
    def dtype(self):
        return self._params[0].value.dtype

    def astype(self, dtype):
        """Cast every parameter in place; returns self."""
        for p in self._params:
            p.value = p.value.astype(dtype)
        return self

    def num_blocks(self):
        """Total count of frequency-split blocks (the probe index range)."""
        cfg = self.config
        return cfg.n_groups * cfg.m_blocks

    def _block_at(self, index):
        if not (0 <= index < self.num_blocks()):
            raise IndexError(
                f"block index {index} outside [0, {self.num_blocks()})"
            )
        if self.chain is not None:
            return self.chain[index]
        return self.groups[index // self.config.m_blocks].blocks[
            index % self.config.m_blocks
        ]

    # -- forward -------------------------------------------------------------

    def forward(self, x, engine=None, probe_index=None):
        """Super-resolve ``x`` (B, 3, H, W) to (B, 3, H*scale, W*scale).

        ``engine`` may be a recording Tape (then ``x`` is a tape node and
        spatial dims must already be even). With ``probe_index`` set, also
        returns a dict holding the probed block's smooth/detail split.
        """
        eng = EVAL if engine is None else engine
        tracing = isinstance(eng, Tape)
        if tracing and not isinstance(x, Node):
            raise TypeError("traced forward needs a tape node input")
        if not tracing and not isinstance(x, T.Tensor):
            raise TypeError(f"forward needs a Tensor input, not {type(x).__name__}")
        value = x.value if tracing else x
        if value.channels != 3:
            raise ValueError(f"input must have 3 channels; got {value.channels}")
        h_in, w_in = value.height, value.width
        pad_h, pad_w = h_in % 2, w_in % 2
        if pad_h or pad_w:
            if tracing:
                raise ValueError(
                    f"traced forward requires even spatial dims; got {h_in}x{w_in}"
                )
            x = T.reflect_pad2d(x, pad_h, pad_w)

        record = None
        if probe_index is not None:
            self._block_at(probe_index)  # range check up front
            record = {}

        f0 = self.sfe.forward(eng, x)
        feats = []
        h = f0
        if self.groups is not None:
            m = self.config.m_blocks
            for i, grp in enumerate(self.groups):
                inner = None
                if record is not None and probe_index // m == i:
                    inner = probe_index % m
                h = grp.forward(eng, h, probe_inner=inner, record=record)
                feats.append(h)
        else:
            for i, blk in enumerate(self.chain):
                rec = record if (record is not None and probe_index == i) else None
                h = blk.forward(eng, h, record=rec)
                feats.append(h)
        fused = self.fuse_smooth.forward(eng, self.fuse_mix.forward(eng, eng.channel_concat(feats)))
        out = self.head.forward(eng, eng.add(f0, fused))
        if pad_h or pad_w:
            out = T.crop_hw(out, h_in * self.config.scale, w_in * self.config.scale)
        if record is not None:
            return out, record
        return out

    def self_ensemble(self, x):
        """Average the de-transformed forwards over all 8 dihedral variants."""
        return dihedral_average(self.forward, x)

    # -- accounting ----------------------------------------------------------

    def param_count(self):
        """Total parameter count and a per-component breakdown."""
        by_block = {}
        for p in self._params:
            parts = p.name.split(".")
            key = ".".join(parts[:2]) if parts[0] in ("group", "block") else parts[0]
            by_block[key] = by_block.get(key, 0) + p.value.size
        return ParamCount(total=sum(by_block.values()), by_block=by_block)

    def multi_adds(self, out_h, out_w):
        """Multiply-accumulate count to produce one out_h x out_w output.

        Convention: convolutions count h*w*c_out*c_in*k*k at their operating
        resolution, the depthwise pass counts h*w*c*k*k, the transposed
        upsampler counts every scatter multiply, and the channel-gate convs
        run on 1x1 summaries. Pooling, additions and activations are free.
        """
        s = self.config.scale
        if out_h % s or out_w % s:
            raise ValueError(
                f"output size {out_h}x{out_w} not divisible by scale {s}"
            )
        h, w = out_h // s, out_w // s
        by_block = {"sfe": self.sfe.macs(h, w)}
        for unit in self.groups if self.groups is not None else self.chain:
            key = ".".join(unit.name.split(".")[:2])
            by_block[key] = unit.macs(h, w)
        by_block["fuse"] = self.fuse_mix.macs(h, w) + self.fuse_smooth.macs(h, w)
        by_block["head"] = self.head.macs(h, w)
        return MacCount(total=sum(by_block.values()), by_block=by_block)


@dataclass(frozen=True)
class ParamCount:
    total: int
    by_block: dict


@dataclass(frozen=True)
class MacCount:
    total: int
    by_block: dict


def build(config, seed=0, dtype=np.float64):
    """Construct a model with fan-in uniform weights drawn from ``seed``."""
    return Model(config, seed=seed, dtype=dtype)


# ---------------------------------------------------------------------------
# self-ensemble
# ---------------------------------------------------------------------------

def _dihedral(arr, k, flip):
    out = np.rot90(arr, k, axes=(2, 3))
    if flip:
        out = out[:, :, :, ::-1]
    return np.ascontiguousarray(out)


def _dihedral_inv(arr, k, flip):
    if flip:
        arr = arr[:, :, :, ::-1]
    return np.ascontiguousarray(np.rot90(arr, -k, axes=(2, 3)))


def dihedral_average(fn, x):
    """Mean of t^-1(fn(t(x))) over the 8 axis-aligned flips/rotations.

    ``fn`` maps Tensor -> Tensor and must scale both spatial dims by the
    same factor (so the inverse transform is well defined).

    The eight terms are combined as a balanced pairwise tree so that when
    all terms are equal the mean reproduces them bit-exactly (every partial
    sum is then a power-of-two multiple).
    """
    outs = []
    for t in range(8):
        k, flip = t % 4, bool(t // 4)
        xt = T.Tensor._wrap(_dihedral(x.data, k, flip))
        yt = fn(xt)
        outs.append(_dihedral_inv(yt.data, k, flip))
    while len(outs) > 1:
        outs = [outs[i] + outs[i + 1] for i in range(0, len(outs), 2)]
    return T.Tensor._wrap(outs[0] / 8.0)


# ---------------------------------------------------------------------------
# weight file format
# ---------------------------------------------------------------------------
#
# All little-endian:
#   bytes 0..3    magic "HFFN"
#   bytes 4..7    format version (u32) == 1
#   bytes 8..39   sha256 fingerprint of the canonical config JSON
#   bytes 40..47  parameter count (u64, number of f32 scalars)
#   bytes 48..51  config JSON length (u32)
#   ...           canonical config JSON (ascii)
#   ...           parameters as f32, deterministic construction order

def save_weights(model, path):
    """Write the model's weights (cast to f32) with a self-describing header."""
    cfg_blob = model.config.canonical_json().encode("ascii")
    count = sum(p.value.size for p in model.parameters())
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<I", _VERSION))
        fh.write(model.config.fingerprint())
        fh.write(struct.pack("<Q", count))
        fh.write(struct.pack("<I", len(cfg_blob)))
        fh.write(cfg_blob)
        for p in model.parameters():
            fh.write(p.value.data.astype("<f4").tobytes())


def load_weights(path, config=None, dtype=np.float32):
    """Rebuild a model from a weight file.

    The file's embedded config is authoritative; if ``config`` is given it
    must match the stored fingerprint. Weights load as float32 by default
    (pass dtype=np.float64 to upcast).
    """
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < 52:
        raise WeightFileError(f"{path}: truncated header ({len(blob)} bytes)")
    if blob[:4] != _MAGIC:
        raise WeightFileError(f"{path}: bad magic {blob[:4]!r}")
    (version,) = struct.unpack_from("<I", blob, 4)
    if version != _VERSION:
        raise WeightFileError(f"{path}: unsupported format version {version}")
    stored_fp = blob[8:40]
    (count,) = struct.unpack_from("<Q", blob, 40)
    (cfg_len,) = struct.unpack_from("<I", blob, 48)
    if len(blob) < 52 + cfg_len:
        raise WeightFileError(f"{path}: truncated config block")
    cfg_blob = blob[52 : 52 + cfg_len]
    try:
        stored_cfg = ModelConfig.from_dict(json.loads(cfg_blob.decode("ascii")))
    except (ValueError, UnicodeDecodeError) as exc:
        raise WeightFileError(f"{path}: unreadable embedded config: {exc}") from exc
    if stored_cfg.fingerprint() != stored_fp:
        raise WeightFileError(f"{path}: header fingerprint does not match embedded config")
    if config is not None and config.fingerprint() != stored_fp:
        raise WeightFileError(
            f"{path}: file was saved for config {stored_cfg.canonical_json()}, "
            f"not the requested one"
        )

    model = build(stored_cfg, seed=0, dtype=np.float64)
    expected = sum(p.value.size for p in model.parameters())
    if count != expected:
        raise WeightFileError(
            f"{path}: header says {count} parameters, model needs {expected}"
        )
    payload = blob[52 + cfg_len :]
    if len(payload) != 4 * count:
        raise WeightFileError(
            f"{path}: payload holds {len(payload)} bytes, expected {4 * count}"
        )
    offset = 0
    values = {}
    for p in model.parameters():
        n = p.value.size
        arr = np.frombuffer(payload, dtype="<f4", count=n, offset=offset)
        offset += 4 * n
        arr = arr.astype(dtype).reshape(p.value.shape)
        values[p.name] = T.Tensor._wrap(arr)
    model.load_parameter_dict(values)
    return model
