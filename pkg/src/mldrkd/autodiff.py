"""Dense float64 tensors with reverse-mode autodiff on an explicit tape.

A Tape is opened as a context manager around one forward pass.  Every
operation that touches a gradient-bearing tensor appends a node (inputs,
output, backward rule) in execution order; backward() replays the nodes
in exact reverse order and accumulates d(loss)/d(leaf) into the .grad of
every requires_grad leaf.  There is no global implicit graph: code that
runs outside any tape (teacher forward passes, evaluation) records
nothing and produces plain constants.

Tensors are plain values and safe to move between threads; a tape is
single-threaded and private to one forward/backward pass.
"""

import threading

import numpy as np

from . import backend as _B
from .errors import ContractError, ShapeError

LOG_FLOOR = 1e-12  # log() clamps its input here; KL terms can see tiny probabilities


class Tensor:
    """N-dimensional float64 array, optionally participating in a tape."""

    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, requires_grad=False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def item(self):
        if self.data.size != 1:
            raise ContractError(f"item() needs a single-element tensor, shape {self.data.shape}")
        return float(self.data.reshape(()))

    def detach(self):
        """Same data, no grad participation (shares the underlying array)."""
        return Tensor(self.data, requires_grad=False)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    # operator sugar; all routed through the module-level ops
    def __add__(self, other):
        return add(self, _as_tensor(other))

    def __radd__(self, other):
        return add(_as_tensor(other), self)

    def __sub__(self, other):
        return sub(self, _as_tensor(other))

    def __rsub__(self, other):
        return sub(_as_tensor(other), self)

    def __mul__(self, other):
        return mul(self, _as_tensor(other))

    def __rmul__(self, other):
        return mul(_as_tensor(other), self)

    def __truediv__(self, other):
        return div(self, _as_tensor(other))

    def __rtruediv__(self, other):
        return div(_as_tensor(other), self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def reshape(self, shape):
        return reshape(self, shape)

    def transpose(self, axes=None):
        return transpose(self, axes)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis=axis, keepdims=keepdims)


def _as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float64))


class _Node:
    __slots__ = ("out", "inputs", "bwd")

    def __init__(self, out, inputs, bwd):
        self.out = out
        self.inputs = inputs
        self.bwd = bwd


_local = threading.local()


def _stack():
    if not hasattr(_local, "tapes"):
        _local.tapes = []
    return _local.tapes


def _active_tape():
    s = _stack()
    return s[-1] if s else None


class Tape:
    """Ordered record of operations for one forward pass."""

    __slots__ = ("_nodes", "_tracked")

    def __init__(self):
        self._nodes = []
        self._tracked = set()

    def __enter__(self):
        _stack().append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        popped = _stack().pop()
        assert popped is self, "tapes must nest"
        return False

    def __len__(self):
        return len(self._nodes)

    def watches(self, t):
        return t.requires_grad or id(t) in self._tracked

    def _record(self, out, inputs, bwd):
        self._nodes.append(_Node(out, inputs, bwd))
        self._tracked.add(id(out))


def _emit(out, inputs, make_bwd):
    """Record `out = op(inputs)` on the active tape, if any input is watched.

    make_bwd(needs) returns bwd(gout) -> per-input gradients; entries whose
    `needs` flag is False may be returned as None and are skipped.
    """
    tape = _active_tape()
    if tape is not None:
        needs = tuple(tape.watches(t) for t in inputs)
        if any(needs):
            tape._record(out, inputs, make_bwd(needs))
    return out


def backward(loss, tape):
    """Populate .grad of every requires_grad leaf with d(loss)/d(leaf).

    Repeated calls without zero_grad accumulate.  The loss must be a
    single-element tensor recorded on `tape`.
    """
    if loss.data.size != 1:
        raise ContractError(f"backward() needs a scalar loss, got shape {loss.data.shape}")
    if id(loss) not in tape._tracked:
        raise ContractError("loss was not recorded on this tape")
    adjoint = {id(loss): np.ones_like(loss.data)}
    leaves = {}
    for node in reversed(tape._nodes):
        g = adjoint.pop(id(node.out), None)
        if g is None:
            continue
        for t, gi in zip(node.inputs, node.bwd(g)):
            if gi is None:
                continue
            key = id(t)
            if key in adjoint:
                adjoint[key] = adjoint[key] + gi
            else:
                adjoint[key] = gi
            if t.requires_grad:
                leaves[key] = t
    for key, t in leaves.items():
        g = adjoint[key]
        t.grad = g.copy() if t.grad is None else t.grad + g


def _unbroadcast(g, shape):
    """Sum g down to `shape`, inverting numpy broadcasting."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _check_broadcast(a, b, opname):
    try:
        return np.broadcast_shapes(a.data.shape, b.data.shape)
    except ValueError:
        raise ShapeError(
            f"{opname}: shapes {a.data.shape} and {b.data.shape} do not broadcast"
        ) from None


# ---------------------------------------------------------------- elementwise


def add(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast(a, b, "add")
    out = Tensor(a.data + b.data)

    def make_bwd(needs):
        def bwd(g):
            return (
                _unbroadcast(g, a.data.shape) if needs[0] else None,
                _unbroadcast(g, b.data.shape) if needs[1] else None,
            )

        return bwd

    return _emit(out, (a, b), make_bwd)


def sub(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast(a, b, "sub")
    out = Tensor(a.data - b.data)

    def make_bwd(needs):
        def bwd(g):
            return (
                _unbroadcast(g, a.data.shape) if needs[0] else None,
                _unbroadcast(-g, b.data.shape) if needs[1] else None,
            )

        return bwd

    return _emit(out, (a, b), make_bwd)


def mul(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast(a, b, "mul")
    out = Tensor(a.data * b.data)

    def make_bwd(needs):
        def bwd(g):
            return (
                _unbroadcast(g * b.data, a.data.shape) if needs[0] else None,
                _unbroadcast(g * a.data, b.data.shape) if needs[1] else None,
            )

        return bwd

    return _emit(out, (a, b), make_bwd)


def div(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast(a, b, "div")
    out = Tensor(a.data / b.data)

    def make_bwd(needs):
        def bwd(g):
            return (
                _unbroadcast(g / b.data, a.data.shape) if needs[0] else None,
                _unbroadcast(-g * a.data / (b.data * b.data), b.data.shape) if needs[1] else None,
            )

        return bwd

    return _emit(out, (a, b), make_bwd)


def neg(t):
    out = Tensor(-t.data)
    return _emit(out, (t,), lambda needs: lambda g: (-g,))


def texp(t):
    y = np.exp(t.data)
    out = Tensor(y)
    return _emit(out, (t,), lambda needs: lambda g: (g * y,))


def tlog(t):
    """Natural log with the input clamped to >= LOG_FLOOR.

    The clamped region has zero derivative, matching the piecewise function.
    """
    xc = np.maximum(t.data, LOG_FLOOR)
    mask = t.data > LOG_FLOOR
    out = Tensor(np.log(xc))
    return _emit(out, (t,), lambda needs: lambda g: (g * mask / xc,))


def gelu(t):
    """Elementwise GELU, tanh approximation: 0.5*x*(1+tanh(sqrt(2/pi)*(x+0.044715*x^3)))."""
    x = t.data
    out = Tensor(_B.gelu(x))
    return _emit(out, (t,), lambda needs: lambda g: (_B.gelu_bwd(x, g),))


# ------------------------------------------------------------- linear algebra


def matmul(a, b):
    """Batched matrix product; trailing dims contract, leading dims broadcast."""
    if a.data.ndim < 2 or b.data.ndim < 2:
        raise ShapeError(f"matmul needs >=2-d operands, got {a.data.shape} @ {b.data.shape}")
    if a.data.shape[-1] != b.data.shape[-2]:
        raise ShapeError(f"matmul: inner dims differ for {a.data.shape} @ {b.data.shape}")
    try:
        y = np.matmul(a.data, b.data)
    except ValueError:
        raise ShapeError(
            f"matmul: batch dims do not broadcast for {a.data.shape} @ {b.data.shape}"
        ) from None
    out = Tensor(y)

    def make_bwd(needs):
        def bwd(g):
            ga = gb = None
            if needs[0]:
                ga = _unbroadcast(np.matmul(g, b.data.swapaxes(-1, -2)), a.data.shape)
            if needs[1]:
                gb = _unbroadcast(np.matmul(a.data.swapaxes(-1, -2), g), b.data.shape)
            return ga, gb

        return bwd

    return _emit(out, (a, b), make_bwd)


def linear(x, weight, bias):
    """x @ weight + bias for x[..., D_in], weight[D_in, D_out], bias[D_out]."""
    if weight.data.ndim != 2 or bias.data.ndim != 1:
        raise ShapeError(
            f"linear: weight must be 2-d and bias 1-d, got {weight.data.shape}, {bias.data.shape}"
        )
    if bias.data.shape[0] != weight.data.shape[1]:
        raise ShapeError(
            f"linear: bias size {bias.data.shape[0]} != output dim {weight.data.shape[1]}"
        )
    return add(matmul(x, weight), bias)


# ------------------------------------------------------------------ softmax


def softmax(t, axis=-1):
    """Softmax along `axis`, computed with max-subtraction."""
    nd = t.data.ndim
    ax = axis + nd if axis < 0 else axis
    if not 0 <= ax < nd:
        raise ShapeError(f"softmax: axis {axis} invalid for shape {t.data.shape}")
    moved = ax != nd - 1
    x_last = np.moveaxis(t.data, ax, -1) if moved else t.data
    y_last = _B.softmax_last(x_last)
    out = Tensor(np.ascontiguousarray(np.moveaxis(y_last, -1, ax)) if moved else y_last)

    def make_bwd(needs):
        def bwd(g):
            g_last = np.moveaxis(g, ax, -1) if moved else g
            dx = _B.softmax_last_bwd(y_last, np.ascontiguousarray(g_last))
            return (np.ascontiguousarray(np.moveaxis(dx, -1, ax)) if moved else dx,)

        return bwd

    return _emit(out, (t,), make_bwd)


# ------------------------------------------------------- shape manipulation


def reshape(t, shape):
    shape = tuple(shape) if not isinstance(shape, int) else (shape,)
    try:
        y = t.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"cannot reshape {t.data.shape} to {shape}") from None
    out = Tensor(y)
    return _emit(out, (t,), lambda needs: lambda g: (g.reshape(t.data.shape),))


def transpose(t, axes=None):
    """Permute axes; None reverses them."""
    nd = t.data.ndim
    perm = tuple(range(nd - 1, -1, -1)) if axes is None else tuple(axes)
    if sorted(perm) != list(range(nd)):
        raise ShapeError(f"transpose: {perm} is not a permutation of axes for shape {t.data.shape}")
    inv = np.argsort(perm)
    out = Tensor(t.data.transpose(perm))
    return _emit(out, (t,), lambda needs: lambda g: (g.transpose(inv),))


def broadcast_to(t, shape):
    shape = tuple(shape)
    try:
        y = np.broadcast_to(t.data, shape)
    except ValueError:
        raise ShapeError(f"cannot broadcast {t.data.shape} to {shape}") from None
    out = Tensor(y.copy())
    return _emit(out, (t,), lambda needs: lambda g: (_unbroadcast(g, t.data.shape),))


def stack(tensors, axis=0):
    tensors = list(tensors)
    if not tensors:
        raise ShapeError("stack needs at least one tensor")
    shapes = {t.data.shape for t in tensors}
    if len(shapes) != 1:
        raise ShapeError(f"stack: mismatched shapes {sorted(shapes)}")
    out = Tensor(np.stack([t.data for t in tensors], axis=axis))
    nd = out.data.ndim
    ax = axis + nd if axis < 0 else axis

    def make_bwd(needs):
        def bwd(g):
            idx = [slice(None)] * nd
            grads = []
            for i, need in enumerate(needs):
                if need:
                    idx[ax] = i
                    grads.append(np.ascontiguousarray(g[tuple(idx)]))
                else:
                    grads.append(None)
            return grads

        return bwd

    return _emit(out, tuple(tensors), make_bwd)


def concat(tensors, axis=0):
    tensors = list(tensors)
    if not tensors:
        raise ShapeError("concat needs at least one tensor")
    try:
        y = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError:
        raise ShapeError(
            f"concat: incompatible shapes {[t.data.shape for t in tensors]} on axis {axis}"
        ) from None
    out = Tensor(y)
    nd = y.ndim
    ax = axis + nd if axis < 0 else axis
    sizes = [t.data.shape[ax] for t in tensors]

    def make_bwd(needs):
        def bwd(g):
            grads = []
            offset = 0
            idx = [slice(None)] * nd
            for size, need in zip(sizes, needs):
                if need:
                    idx[ax] = slice(offset, offset + size)
                    grads.append(np.ascontiguousarray(g[tuple(idx)]))
                else:
                    grads.append(None)
                offset += size
            return grads

        return bwd

    return _emit(out, tuple(tensors), make_bwd)


def narrow(t, axis, start, length):
    """Contiguous slice [start, start+length) along one axis."""
    nd = t.data.ndim
    ax = axis + nd if axis < 0 else axis
    if not 0 <= ax < nd:
        raise ShapeError(f"narrow: axis {axis} invalid for shape {t.data.shape}")
    if start < 0 or length < 0 or start + length > t.data.shape[ax]:
        raise ShapeError(
            f"narrow: [{start}, {start + length}) out of range for axis {ax} of {t.data.shape}"
        )
    idx = [slice(None)] * nd
    idx[ax] = slice(start, start + length)
    idx = tuple(idx)
    out = Tensor(np.ascontiguousarray(t.data[idx]))

    def make_bwd(needs):
        def bwd(g):
            full = np.zeros_like(t.data)
            full[idx] = g
            return (full,)

        return bwd

    return _emit(out, (t,), make_bwd)


# -------------------------------------------------------------- reductions


def _norm_axes(axis, nd):
    if axis is None:
        return tuple(range(nd))
    axes = (axis,) if isinstance(axis, int) else tuple(axis)
    axes = tuple(a + nd if a < 0 else a for a in axes)
    for a in axes:
        if not 0 <= a < nd:
            raise ShapeError(f"reduction axis {axis} invalid for {nd}-d tensor")
    if len(set(axes)) != len(axes):
        raise ShapeError(f"duplicate reduction axes {axis}")
    return axes


def tsum(t, axis=None, keepdims=False):
    axes = _norm_axes(axis, t.data.ndim)
    out = Tensor(t.data.sum(axis=axes, keepdims=keepdims))

    def make_bwd(needs):
        def bwd(g):
            if not keepdims:
                g = np.expand_dims(g, axes)
            return (np.broadcast_to(g, t.data.shape).copy(),)

        return bwd

    return _emit(out, (t,), make_bwd)


def tmean(t, axis=None, keepdims=False):
    axes = _norm_axes(axis, t.data.ndim)
    count = int(np.prod([t.data.shape[a] for a in axes])) if axes else 1
    out = Tensor(t.data.mean(axis=axes, keepdims=keepdims))

    def make_bwd(needs):
        def bwd(g):
            if not keepdims:
                g = np.expand_dims(g, axes)
            return (np.broadcast_to(g / count, t.data.shape).copy(),)

        return bwd

    return _emit(out, (t,), make_bwd)


def global_avg_pool(t, axes=None):
    """Mean over the spatial axes (default: every axis after the first two)."""
    if axes is None:
        if t.data.ndim < 3:
            raise ShapeError(f"global_avg_pool expects >=3-d features, got {t.data.shape}")
        axes = tuple(range(2, t.data.ndim))
    return tmean(t, axis=axes)
