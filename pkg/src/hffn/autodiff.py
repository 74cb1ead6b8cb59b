"""Reverse-mode differentiation over the tensor op set.

A :class:`Tape` records one node per traced operation; :func:`backward`
walks the records in reverse and accumulates vector-Jacobian products into
every named leaf. Backward rules live in a registry keyed by op name, so an
op recorded without a matching rule fails loudly rather than silently
dropping gradient.

Layers are written against the small "engine" protocol shared by
:class:`Tape` (recording, for training and gradient checks) and
:class:`EvalEngine` (plain execution). Both expose the same op methods;
the tape operates on :class:`Node` handles, the eval engine on bare
tensors. Tapes are single-use and not safe for concurrent writes; record
on one tape per thread.
"""

from __future__ import annotations

import numpy as np

from . import tensor as T

__all__ = ["Node", "Tape", "EvalEngine", "EVAL", "backward", "finite_diff_check"]


class Node:
    """Handle to one traced value. ``value`` is the forward-pass tensor."""

    __slots__ = ("value", "_slot")

    def __init__(self, value, slot):
        self.value = value
        self._slot = slot

    @property
    def shape(self):
        return self.value.shape

    @property
    def dtype(self):
        return self.value.dtype

    def __repr__(self):
        return f"Node(slot={self._slot}, shape={self.shape})"


class _Record:
    __slots__ = ("op", "out_slot", "in_slots", "saved")

    def __init__(self, op, out_slot, in_slots, saved):
        self.op = op
        self.out_slot = out_slot
        self.in_slots = in_slots
        self.saved = saved


_RULES = {}


def _rule(name):
    def register(fn):
        _RULES[name] = fn
        return fn

    return register


class EvalEngine:
    """Executes the op protocol directly on tensors, recording nothing."""

    @staticmethod
    def param(p):
        return p.value

    @staticmethod
    def constant(t):
        return t

    @staticmethod
    def conv2d(x, w, b=None, stride=1, padding=0):
        return T.conv2d(x, w, b, stride=stride, padding=padding)

    @staticmethod
    def conv_transpose2d(x, w, b=None, stride=1):
        return T.conv_transpose2d(x, w, b, stride=stride)

    @staticmethod
    def depthwise_conv2d(x, w, b=None, padding=0):
        return T.depthwise_conv2d(x, w, b, padding=padding)

    avg_pool2d = staticmethod(T.avg_pool2d)
    pixel_shuffle = staticmethod(T.pixel_shuffle)
    channel_slice = staticmethod(T.channel_slice)
    channel_split = staticmethod(T.channel_split)
    channel_concat = staticmethod(T.channel_concat)
    add = staticmethod(T.add)
    sub = staticmethod(T.sub)
    mul = staticmethod(T.mul)
    sigmoid = staticmethod(T.sigmoid)
    leaky_relu = staticmethod(T.leaky_relu)
    scale_channels = staticmethod(T.scale_channels)
    channel_contrast = staticmethod(T.channel_contrast)
    sum_all = staticmethod(T.sum_all)
    mean_all = staticmethod(T.mean_all)


EVAL = EvalEngine()


class Tape:
    """Records a computation so :func:`backward` can differentiate it.

    Leaves are named entry points (weights, and any input being
    differentiated); constants participate in the forward pass but collect
    no gradient. Node handles are only valid on the tape that made them.
    """

    def __init__(self):
        self._records = []
        self._num_slots = 0
        self._leaves = {}  # name -> Node

    # -- node management ----------------------------------------------------

    def _new_node(self, value):
        node = Node(value, self._num_slots)
        self._num_slots += 1
        return node

    def leaf(self, name, value):
        """Register (or fetch) the named gradient entry point."""
        if not isinstance(value, T.Tensor):
            raise TypeError(f"leaf {name!r} must wrap a Tensor, not {type(value).__name__}")
        node = self._leaves.get(name)
        if node is not None:
            if node.value is not value:
                raise ValueError(f"leaf {name!r} already holds a different tensor")
            return node
        node = self._new_node(value)
        self._leaves[name] = node
        return node

    def constant(self, value):
        """A traced value that collects no gradient."""
        if not isinstance(value, T.Tensor):
            raise TypeError(f"constant must wrap a Tensor, not {type(value).__name__}")
        return self._new_node(value)

    def param(self, p):
        """Leaf node for a layer parameter (cached per name)."""
        return self.leaf(p.name, p.value)

    def _check_node(self, arg, what):
        if not isinstance(arg, Node):
            raise TypeError(f"{what} must be a tape Node, not {type(arg).__name__}")
        if arg._slot >= self._num_slots:
            raise ValueError(f"{what} belongs to a different tape")
        return arg

    def _emit(self, op, value, inputs, **saved):
        out = self._new_node(value)
        in_slots = tuple(None if n is None else n._slot for n in inputs)
        self._records.append(_Record(op, out._slot, in_slots, saved))
        return out

    # -- traced ops ----------------------------------------------------------

    def conv2d(self, x, w, b=None, stride=1, padding=0):
        self._check_node(x, "x")
        self._check_node(w, "w")
        bt = None
        if b is not None:
            bt = self._check_node(b, "b").value
        out = T.conv2d(x.value, w.value, bt, stride=stride, padding=padding)
        return self._emit(
            "conv2d", out, (x, w, b),
            x=x.value, w=w.value, stride=stride, padding=padding,
        )

    def conv_transpose2d(self, x, w, b=None, stride=1):
        self._check_node(x, "x")
        self._check_node(w, "w")
        bt = None
        if b is not None:
            bt = self._check_node(b, "b").value
        out = T.conv_transpose2d(x.value, w.value, bt, stride=stride)
        return self._emit(
            "conv_transpose2d", out, (x, w, b), x=x.value, w=w.value, stride=stride
        )

    def depthwise_conv2d(self, x, w, b=None, padding=0):
        self._check_node(x, "x")
        self._check_node(w, "w")
        bt = None
        if b is not None:
            bt = self._check_node(b, "b").value
        out = T.depthwise_conv2d(x.value, w.value, bt, padding=padding)
        return self._emit(
            "depthwise_conv2d", out, (x, w, b), x=x.value, w=w.value, padding=padding
        )

    def avg_pool2d(self, x, kernel, stride):
        self._check_node(x, "x")
        out = T.avg_pool2d(x.value, kernel, stride)
        return self._emit(
            "avg_pool2d", out, (x,),
            kernel=kernel, stride=stride, in_hw=(x.value.height, x.value.width),
        )

    def pixel_shuffle(self, x, r):
        self._check_node(x, "x")
        out = T.pixel_shuffle(x.value, r)
        return self._emit("pixel_shuffle", out, (x,), r=r)

    def channel_slice(self, x, c0, c1):
        self._check_node(x, "x")
        out = T.channel_slice(x.value, c0, c1)
        return self._emit("channel_slice", out, (x,), c0=c0, c1=c1, in_shape=x.shape)

    def channel_split(self, x, at):
        self._check_node(x, "x")
        if not (0 < at < x.value.channels):
            raise ValueError(
                f"channel_split: split point {at} outside (0, {x.value.channels})"
            )
        return (
            self.channel_slice(x, 0, at),
            self.channel_slice(x, at, x.value.channels),
        )

    def channel_concat(self, parts):
        parts = list(parts)
        for p in parts:
            self._check_node(p, "parts[i]")
        out = T.channel_concat([p.value for p in parts])
        widths = tuple(p.value.channels for p in parts)
        return self._emit("channel_concat", out, tuple(parts), widths=widths)

    def add(self, a, b):
        self._check_node(a, "a")
        self._check_node(b, "b")
        return self._emit("add", T.add(a.value, b.value), (a, b))

    def sub(self, a, b):
        self._check_node(a, "a")
        self._check_node(b, "b")
        return self._emit("sub", T.sub(a.value, b.value), (a, b))

    def mul(self, a, b):
        self._check_node(a, "a")
        self._check_node(b, "b")
        return self._emit("mul", T.mul(a.value, b.value), (a, b), a=a.value, b=b.value)

    def sigmoid(self, x):
        self._check_node(x, "x")
        out = T.sigmoid(x.value)
        return self._emit("sigmoid", out, (x,), out=out)

    def leaky_relu(self, x, slope=0.05):
        self._check_node(x, "x")
        out = T.leaky_relu(x.value, slope)
        return self._emit("leaky_relu", out, (x,), x=x.value, slope=slope)

    def scale_channels(self, x, gate):
        self._check_node(x, "x")
        self._check_node(gate, "gate")
        out = T.scale_channels(x.value, gate.value)
        return self._emit(
            "scale_channels", out, (x, gate), x=x.value, gate=gate.value
        )

    def channel_contrast(self, x, eps=1e-8):
        self._check_node(x, "x")
        out = T.channel_contrast(x.value, eps)
        return self._emit("channel_contrast", out, (x,), x=x.value, eps=eps)

    def sum_all(self, x):
        self._check_node(x, "x")
        return self._emit("sum_all", T.sum_all(x.value), (x,), in_shape=x.shape)

    def mean_all(self, x):
        self._check_node(x, "x")
        return self._emit("mean_all", T.mean_all(x.value), (x,), in_shape=x.shape)

    def l1_loss(self, pred, target):
        """Mean absolute error with subgradient 0 at exact ties."""
        self._check_node(pred, "pred")
        self._check_node(target, "target")
        if pred.shape != target.shape:
            raise ValueError(f"l1_loss: shape mismatch {pred.shape} vs {target.shape}")
        diff = pred.value.data - target.value.data
        out = T.Tensor._wrap(np.abs(diff).mean(dtype=diff.dtype).reshape(1, 1, 1, 1))
        return self._emit(
            "l1_loss", out, (pred, target), sign=np.sign(diff), n=diff.size
        )


# ---------------------------------------------------------------------------
# backward rules
# ---------------------------------------------------------------------------

@_rule("add")
def _add_vjp(saved, g):
    return g, g


@_rule("sub")
def _sub_vjp(saved, g):
    return g, -g


@_rule("mul")
def _mul_vjp(saved, g):
    return g * saved["b"].data, g * saved["a"].data


@_rule("sigmoid")
def _sigmoid_vjp(saved, g):
    y = saved["out"].data
    return (g * y * (1.0 - y),)


@_rule("leaky_relu")
def _leaky_relu_vjp(saved, g):
    xa = saved["x"].data
    slope = xa.dtype.type(saved["slope"])
    return (g * np.where(xa >= 0, xa.dtype.type(1.0), slope),)


@_rule("conv2d")
def _conv2d_vjp(saved, g):
    xa, wa = saved["x"].data, saved["w"].data
    stride, padding = saved["stride"], saved["padding"]
    dx = T._conv2d_input_grad(g, wa, stride, padding, (xa.shape[2], xa.shape[3]))
    dw = T._conv2d_weight_grad(xa, g, stride, padding, wa.shape)
    db = g.sum(axis=(0, 2, 3)).reshape(1, -1, 1, 1)
    return dx, dw, db


@_rule("conv_transpose2d")
def _conv_transpose2d_vjp(saved, g):
    xa, wa = saved["x"].data, saved["w"].data
    stride = saved["stride"]
    dx = T._conv2d_forward(g, wa, None, stride, 0)
    dw = T._conv2d_weight_grad(g, xa, stride, 0, wa.shape)
    db = g.sum(axis=(0, 2, 3)).reshape(1, -1, 1, 1)
    return dx, dw, db


@_rule("depthwise_conv2d")
def _depthwise_vjp(saved, g):
    xa, wa = saved["x"].data, saved["w"].data
    padding = saved["padding"]
    dx = T._depthwise_input_grad(g, wa, padding, (xa.shape[2], xa.shape[3]))
    dw = T._depthwise_weight_grad(xa, g, padding, wa.shape)
    db = g.sum(axis=(0, 2, 3)).reshape(1, -1, 1, 1)
    return dx, dw, db


@_rule("avg_pool2d")
def _avg_pool_vjp(saved, g):
    return (T._avg_pool_grad(g, saved["kernel"], saved["stride"], saved["in_hw"]),)


@_rule("pixel_shuffle")
def _pixel_shuffle_vjp(saved, g):
    return (T._pixel_unshuffle_forward(g, saved["r"]),)


@_rule("channel_slice")
def _channel_slice_vjp(saved, g):
    dx = np.zeros(saved["in_shape"], dtype=g.dtype)
    dx[:, saved["c0"] : saved["c1"]] = g
    return (dx,)


@_rule("channel_concat")
def _channel_concat_vjp(saved, g):
    parts = []
    c = 0
    for w in saved["widths"]:
        parts.append(np.ascontiguousarray(g[:, c : c + w]))
        c += w
    return tuple(parts)


@_rule("scale_channels")
def _scale_channels_vjp(saved, g):
    xa, ga = saved["x"].data, saved["gate"].data
    return g * ga, (g * xa).sum(axis=(2, 3), keepdims=True)


@_rule("channel_contrast")
def _channel_contrast_vjp(saved, g):
    xa = saved["x"].data
    m, sd = T._channel_contrast_stats(xa, saved["eps"])
    hw = xa.shape[2] * xa.shape[3]
    return (g * (1.0 + (xa - m) / sd) / hw,)


@_rule("sum_all")
def _sum_all_vjp(saved, g):
    return (np.full(saved["in_shape"], g.reshape(()), dtype=g.dtype),)


@_rule("mean_all")
def _mean_all_vjp(saved, g):
    shape = saved["in_shape"]
    n = int(np.prod(shape))
    return (np.full(shape, g.reshape(()) / n, dtype=g.dtype),)


@_rule("l1_loss")
def _l1_loss_vjp(saved, g):
    da = saved["sign"] * (g.reshape(()) / saved["n"])
    return da, -da


# ---------------------------------------------------------------------------
# the reverse sweep
# ---------------------------------------------------------------------------

def backward(tape, loss):
    """Gradients of the scalar ``loss`` node with respect to every tape leaf.

    Returns a dict mapping leaf name to a gradient tensor of the leaf's
    shape. Leaves the loss does not depend on get explicit zeros. Forward
    values on the tape are left untouched.
    """
    if not isinstance(tape, Tape):
        raise TypeError(f"backward expects a Tape, not {type(tape).__name__}")
    tape._check_node(loss, "loss")
    if loss.value.size != 1:
        raise ValueError(f"loss must be a one-element tensor; got shape {loss.shape}")

    grads = [None] * tape._num_slots
    grads[loss._slot] = np.ones(loss.value.shape, dtype=loss.value.dtype)

    for rec in reversed(tape._records):
        g = grads[rec.out_slot]
        if g is None:
            continue
        rule = _RULES.get(rec.op)
        if rule is None:
            raise LookupError(f"no backward rule registered for op {rec.op!r}")
        parts = rule(rec.saved, g)
        if len(parts) != len(rec.in_slots):
            raise RuntimeError(
                f"backward rule for {rec.op!r} returned {len(parts)} gradients "
                f"for {len(rec.in_slots)} inputs"
            )
        for slot, part in zip(rec.in_slots, parts):
            if slot is None or part is None:
                continue
            grads[slot] = part if grads[slot] is None else grads[slot] + part
        grads[rec.out_slot] = None  # each slot is written once; free eagerly

    out = {}
    for name, node in tape._leaves.items():
        ga = grads[node._slot]
        if ga is None:
            out[name] = T.zeros(node.value.shape, dtype=node.value.dtype)
        else:
            out[name] = T.Tensor._wrap(np.ascontiguousarray(ga))
    return out


def finite_diff_check(f, point, step=1e-5, *, seed=0):
    """Worst-case relative error of the taped gradient of ``f`` at ``point``.

    ``f(tape, node) -> node`` may return any shape; the output is contracted
    against a fixed random cotangent so a single scalar is differentiated.
    Central differences with the given step are compared coordinate by
    coordinate: max |analytic - numeric| / (|numeric| + 1e-12).
    """
    if not isinstance(point, T.Tensor):
        raise TypeError(f"point must be a Tensor, not {type(point).__name__}")
    rng = np.random.default_rng(seed)
    probe = Tape()
    y0 = f(probe, probe.leaf("x", point))
    u = T.Tensor(rng.uniform(0.5, 1.5, size=y0.value.shape), dtype=point.dtype)

    tape = Tape()
    y = f(tape, tape.leaf("x", point))
    loss = tape.sum_all(tape.mul(y, tape.constant(u)))
    analytic = backward(tape, loss)["x"].data

    def scalar_at(arr):
        t = Tape()
        yn = f(t, t.leaf("x", T.Tensor(arr)))
        return float((yn.value.data * u.data).sum())

    base = point.data
    numeric = np.empty_like(base)
    flat = numeric.reshape(-1)
    for i in range(base.size):
        bump = np.zeros_like(base)
        bump.reshape(-1)[i] = step
        flat[i] = (scalar_at(base + bump) - scalar_at(base - bump)) / (2.0 * step)

    rel = np.abs(analytic - numeric) / (np.abs(numeric) + 1e-12)
    return float(rel.max())
