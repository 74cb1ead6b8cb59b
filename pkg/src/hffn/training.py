"""Adam training loop at toy scale.

Updates are functional: a step takes the current weight dict plus gradient
dict and returns fresh tensors, leaving the inputs untouched. Batches are
aligned random crops of LR/HR pairs with a per-sample dihedral transform
(rotations and a horizontal flip). Runs are bit-reproducible for a fixed
seed and thread count.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .autodiff import Tape, backward
from .tensor import NonFiniteError

__all__ = [
    "TrainConfig",
    "OptimizerState",
    "TrainingDiverged",
    "l1_loss",
    "init_optimizer",
    "adam_step",
    "sample_batch",
    "train_toy",
]


@dataclass(frozen=True)
class TrainConfig:
    """Optimizer and batching hyperparameters."""

    steps: int = 500
    batch: int = 4
    patch: int = 48  # LR-side crop, must be even (the trunk needs even dims)
    lr_init: float = 6e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0
    augment: bool = True  # random flip/rotation per sample; off = plain crops

    def validate(self):
        problems = []
        if self.steps < 1:
            problems.append(f"steps must be >= 1; got {self.steps}")
        if self.batch < 1:
            problems.append(f"batch must be >= 1; got {self.batch}")
        if self.patch < 2 or self.patch % 2:
            problems.append(f"patch must be even and >= 2; got {self.patch}")
        if not 0.0 < self.lr_init:
            problems.append(f"lr_init must be positive; got {self.lr_init}")
        if not 0.0 <= self.beta1 < 1.0:
            problems.append(f"beta1 must be in [0, 1); got {self.beta1}")
        if not 0.0 <= self.beta2 < 1.0:
            problems.append(f"beta2 must be in [0, 1); got {self.beta2}")
        if self.eps <= 0.0:
            problems.append(f"eps must be positive; got {self.eps}")
        if problems:
            raise ValueError("invalid train config: " + "; ".join(problems))
        return self


class TrainingDiverged(RuntimeError):
    """Loss or gradients went non-finite; carries step diagnostics."""

    def __init__(self, step, loss, grad_norm):
        self.step = step
        self.loss = loss
        self.grad_norm = grad_norm
        super().__init__(
            f"training diverged at step {step}: loss={loss}, grad_norm={grad_norm}"
        )


def l1_loss(pred, target):
    """Mean absolute error between two tensors, as a float."""
    if pred.shape != target.shape:
        raise ValueError(f"l1_loss: shape mismatch {pred.shape} vs {target.shape}")
    return float(np.mean(np.abs(pred.data - target.data)))


@dataclass
class OptimizerState:
    """Adam moments, keyed and shaped exactly like the weight dict."""

    step: int
    m: dict
    v: dict


def init_optimizer(weights):
    return OptimizerState(
        step=0,
        m={k: np.zeros(w.shape, dtype=w.dtype) for k, w in weights.items()},
        v={k: np.zeros(w.shape, dtype=w.dtype) for k, w in weights.items()},
    )


def adam_step(weights, grads, state, config):
    """One Adam update with bias correction.

    Returns (new_weights, new_state); inputs are left untouched. Every
    weight must come with a gradient (zeros count; absence is an error).
    """
    missing = sorted(set(weights) - set(grads))
    if missing:
        raise ValueError(f"adam_step: no gradient for {missing[:5]}")
    b1, b2, eps, lr = config.beta1, config.beta2, config.eps, config.lr_init
    t = state.step + 1
    bc1 = 1.0 - b1 ** t
    bc2 = 1.0 - b2 ** t
    new_w, new_m, new_v = {}, {}, {}
    for k, w in weights.items():
        g = grads[k].data
        m = b1 * state.m[k] + (1.0 - b1) * g
        v = b2 * state.v[k] + (1.0 - b2) * np.square(g)
        update = lr * (m / bc1) / (np.sqrt(v / bc2) + eps)
        new_w[k] = T.Tensor._wrap(w.data - update)
        new_m[k] = m
        new_v[k] = v
    return new_w, OptimizerState(step=t, m=new_m, v=new_v)


_NUM_DIHEDRAL = 8


def _apply_dihedral(arr, t):
    out = np.rot90(arr, t % 4, axes=(1, 2))
    if t >= 4:
        out = out[:, :, ::-1]
    return np.ascontiguousarray(out)


def sample_batch(pairs, config, rng, dtype=np.float64):
    """Draw an aligned (lr_batch, hr_batch) of random augmented crops.

    Per sample: pick a pair, pick an LR crop origin, take the patch x patch
    LR crop and the exactly corresponding scaled HR crop, then apply the
    same random dihedral transform to both (skipped when ``config.augment``
    is off).
    """
    if not pairs:
        raise ValueError("sample_batch: no training pairs")
    scale = pairs[0].scale
    p = config.patch
    lr_crops, hr_crops = [], []
    for _ in range(config.batch):
        pair = pairs[int(rng.integers(len(pairs)))]
        if pair.scale != scale:
            raise ValueError(
                f"sample_batch: mixed scales {scale} and {pair.scale} "
                f"(pair {pair.name or '<unnamed>'})"
            )
        if pair.lr.height < p or pair.lr.width < p:
            raise ValueError(
                f"sample_batch: image {pair.name or '<unnamed>'} LR is "
                f"{pair.lr.height}x{pair.lr.width}, smaller than patch {p}"
            )
        oy = int(rng.integers(pair.lr.height - p + 1))
        ox = int(rng.integers(pair.lr.width - p + 1))
        lr = pair.lr.pixels[:, oy : oy + p, ox : ox + p]
        hr = pair.hr.pixels[
            :, oy * scale : (oy + p) * scale, ox * scale : (ox + p) * scale
        ]
        t = int(rng.integers(_NUM_DIHEDRAL)) if config.augment else 0
        lr_crops.append(_apply_dihedral(lr, t))
        hr_crops.append(_apply_dihedral(hr, t))
    return (
        T.Tensor(np.stack(lr_crops).astype(dtype)),
        T.Tensor(np.stack(hr_crops).astype(dtype)),
    )


def _grad_norm(grads):
    total = 0.0
    for g in grads.values():
        total += float(np.sum(np.square(g.data, dtype=np.float64)))
    return float(np.sqrt(total))


def train_toy(model, pairs, config):
    """Optimize ``model`` in place on ``pairs``; returns the loss curve.

    L1 loss, Adam with bias correction, deterministic batch stream from
    ``config.seed``. Non-finite losses or gradients abort with step, loss
    and gradient-norm diagnostics rather than training on garbage.
    """
    config.validate()
    for pair in pairs:
        if pair.scale != model.config.scale:
            raise ValueError(
                f"pair {pair.name or '<unnamed>'} has scale {pair.scale}, "
                f"model expects {model.config.scale}"
            )
    rng = np.random.default_rng(config.seed)
    weights = model.parameter_dict()
    state = init_optimizer(weights)
    curve = []
    for step in range(1, config.steps + 1):
        lr_b, hr_b = sample_batch(pairs, config, rng, dtype=model.dtype)
        try:
            tape = Tape()
            out = model.forward(tape.constant(lr_b), engine=tape)
            loss_node = tape.l1_loss(out, tape.constant(hr_b))
            loss = loss_node.value.item()
            grads = backward(tape, loss_node)
        except NonFiniteError as exc:
            raise TrainingDiverged(step, float("nan"), float("nan")) from exc
        gnorm = _grad_norm(grads)
        if not (np.isfinite(loss) and np.isfinite(gnorm)):
            raise TrainingDiverged(step, loss, gnorm)
        weights, state = adam_step(weights, grads, state, config)
        model.load_parameter_dict(weights)
        curve.append(loss)
    return curve


def smoothed(curve, window=25):
    """Moving-average view of a loss curve (trailing window, same length)."""
    if window < 1:
        raise ValueError(f"window must be >= 1; got {window}")
    out = []
    acc = 0.0
    for i, v in enumerate(curve):
        acc += v
        if i >= window:
            acc -= curve[i - window]
        out.append(acc / min(i + 1, window))
    return out
