"""Lightweight single-image super-resolution toolkit.

A from-scratch NCHW tensor engine with reverse-mode differentiation, the
frequency-split network blocks built on it, image quality metrics, bicubic
resampling, a toy trainer and a command-line interface.

The names re-exported here cover the common workflow — build a model, load
or save weights, move images in and out of tensors, score results, run the
toy trainer. Everything else stays importable from its home module
(:mod:`hffn.tensor`, :mod:`hffn.autodiff`, :mod:`hffn.layers`,
:mod:`hffn.blocks`, :mod:`hffn.imaging`, :mod:`hffn.network`,
:mod:`hffn.training`, :mod:`hffn.cli`).
"""

from .tensor import NonFiniteError, Tensor
from .autodiff import EVAL, Tape, backward, finite_diff_check
from .imaging import (
    Image,
    ImageIOError,
    ImagePair,
    bicubic_resize,
    decompose,
    from_tensor,
    load_png,
    make_pair,
    psnr,
    save_png,
    ssim,
    to_tensor,
)
from .network import (
    Model,
    ModelConfig,
    WeightFileError,
    build,
    dihedral_average,
    load_weights,
    save_weights,
)
from .training import TrainConfig, TrainingDiverged, smoothed, train_toy

__version__ = "0.1.0"

__all__ = [
    "EVAL",
    "Image",
    "ImageIOError",
    "ImagePair",
    "Model",
    "ModelConfig",
    "NonFiniteError",
    "Tape",
    "Tensor",
    "TrainConfig",
    "TrainingDiverged",
    "WeightFileError",
    "backward",
    "bicubic_resize",
    "build",
    "decompose",
    "dihedral_average",
    "finite_diff_check",
    "from_tensor",
    "load_png",
    "load_weights",
    "make_pair",
    "psnr",
    "save_png",
    "save_weights",
    "smoothed",
    "ssim",
    "to_tensor",
    "train_toy",
    "__version__",
]
