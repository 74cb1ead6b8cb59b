"""Backend selection for the convolution hot path.

Every convolution variant (forward, input gradient, weight gradient,
transposed) routes through im2col/col2im, so these two functions are the
only code worth compiling. A Cython extension provides the fast path and
``numpy_backend`` an equivalent fallback; both produce bit-identical
results. Selection happens at import time, honouring the HFFN_BACKEND
environment variable ("cython" or "numpy"), and can be changed later with
:func:`set_backend` (used by the backend parity tests and the benchmark).
"""

from __future__ import annotations

import os

from . import numpy_backend

try:
    from . import _fastconv
except ImportError:
    _fastconv = None

_IMPLS = {"numpy": numpy_backend}
if _fastconv is not None:
    _IMPLS["cython"] = _fastconv

_active = ""
im2col = None
col2im = None


def available_backends():
    """Names of the usable backends, sorted."""
    return tuple(sorted(_IMPLS))


def get_backend():
    """Name of the backend currently bound to im2col/col2im."""
    return _active


def set_backend(name):
    """Bind im2col/col2im to the named backend."""
    global _active, im2col, col2im
    if name not in _IMPLS:
        raise ValueError(
            f"unknown backend {name!r}; available: {', '.join(available_backends())}"
        )
    impl = _IMPLS[name]
    im2col = impl.im2col
    col2im = impl.col2im
    _active = name


_requested = os.environ.get("HFFN_BACKEND", "").strip().lower()
if _requested:
    if _requested not in _IMPLS:
        raise ImportError(
            f"HFFN_BACKEND={_requested!r} is not available; "
            f"available: {', '.join(available_backends())}"
        )
    set_backend(_requested)
else:
    set_backend("cython" if _fastconv is not None else "numpy")
