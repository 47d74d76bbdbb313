"""Kernel backend selection.

The hot kernels (row softmax and GELU, forward and backward) exist twice:
as a compiled Cython module (mldrkd._fastkernels) and as numpy fallbacks
(mldrkd._kernels_np).  One implementation is selected at import time;
MLDRKD_BACKEND=auto|ext|py overrides the default ("auto" prefers the
compiled module and silently falls back, "ext" makes its absence fatal).

All entry points accept arrays of any shape; softmax acts on the last
axis.  Inputs are copied to C-contiguous float64 before the kernel runs.
"""

import os

import numpy as np

from . import _kernels_np
from .errors import ConfigError


def _select(choice):
    if choice not in ("auto", "ext", "py"):
        raise ConfigError(f"MLDRKD_BACKEND must be auto, ext or py, got {choice!r}")
    if choice == "py":
        return _kernels_np, "py"
    try:
        from . import _fastkernels
    except ImportError:
        if choice == "ext":
            raise
        return _kernels_np, "py"
    return _fastkernels, "ext"


_impl, BACKEND = _select(os.environ.get("MLDRKD_BACKEND", "auto").lower())


def _set_backend(name):
    """Swap kernels at runtime.  For benchmarks and backend-parity tests only."""
    global _impl, BACKEND
    _impl, BACKEND = _select(name)


def _rows(x):
    x = np.ascontiguousarray(x, dtype=np.float64)
    return x.reshape(-1, x.shape[-1]) if x.ndim != 2 else x


def _flat(x):
    return np.ascontiguousarray(x, dtype=np.float64).reshape(-1)


def softmax_last(x):
    return np.asarray(_impl.softmax2d_fwd(_rows(x))).reshape(x.shape)


def softmax_last_bwd(y, g):
    out = _impl.softmax2d_bwd(_rows(y), _rows(g))
    return np.asarray(out).reshape(y.shape)


def gelu(x):
    return np.asarray(_impl.gelu1d_fwd(_flat(x))).reshape(x.shape)


def gelu_bwd(x, g):
    return np.asarray(_impl.gelu1d_bwd(_flat(x), _flat(g))).reshape(x.shape)
