"""Numpy fallback for the fused kernels in _fastkernels.pyx.

Same contracts as the compiled module: float64 C-contiguous arrays in,
fresh float64 arrays out.  Kept vectorized but unfused, so it is the
reference the compiled kernels are checked against.
"""

import numpy as np

GELU_K = 0.7978845608028654  # sqrt(2/pi)
GELU_A = 0.044715


def softmax2d_fwd(x):
    m = x.max(axis=1, keepdims=True)
    e = np.exp(x - m)
    return e / e.sum(axis=1, keepdims=True)


def softmax2d_bwd(y, g):
    dot = (g * y).sum(axis=1, keepdims=True)
    return (g - dot) * y


def gelu1d_fwd(x):
    t = np.tanh(GELU_K * (x + GELU_A * x**3))
    return 0.5 * x * (1.0 + t)


def gelu1d_bwd(x, g):
    t = np.tanh(GELU_K * (x + GELU_A * x**3))
    d = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_K * (1.0 + 3.0 * GELU_A * x * x)
    return g * d
