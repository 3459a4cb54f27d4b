"""Dense float tensors with an explicit reverse-mode gradient tape.

The model only needs a small closed set of differentiable operations, so the
core is deliberately minimal: every operation produces one output tensor and,
while a tape is active, appends one node holding references to its inputs and
a backward callback.  backward() walks the node list once in reverse and
accumulates gradients in a fixed order, which keeps results bit-reproducible
across runs.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy.special import erf as _erf, expit as _expit

_DEFAULT_DTYPE = np.float32
_INV_SQRT2 = 0.7071067811865476
_INV_SQRT2PI = 0.3989422804014327


def default_dtype():
    return _DEFAULT_DTYPE


def set_default_dtype(dtype) -> None:
    """Set the dtype used for tensors created from python data (float32 or float64)."""
    global _DEFAULT_DTYPE
    dtype = np.dtype(dtype).type
    if dtype not in (np.float32, np.float64):
        raise ValueError("default dtype must be float32 or float64")
    _DEFAULT_DTYPE = dtype


@contextlib.contextmanager
def precision(dtype):
    """Temporarily switch the default dtype, e.g. float64 for gradient checks."""
    prev = _DEFAULT_DTYPE
    set_default_dtype(dtype)
    try:
        yield
    finally:
        set_default_dtype(prev)


class Tensor:
    """A numpy array plus grad-tracking metadata.  Hash/eq are identity."""

    __slots__ = ("data", "requires_grad", "tape_node")

    def __init__(self, data, requires_grad: bool = False):
        if isinstance(data, Tensor):
            data = data.data
        self.data = np.asarray(data, dtype=_DEFAULT_DTYPE)
        self.requires_grad = bool(requires_grad)
        self.tape_node = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype.name}{flag})"

    def __len__(self):
        return len(self.data)

    # arithmetic sugar; constants are wrapped as non-tracked tensors
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __neg__(self):
        return neg(self)


class _Node:
    __slots__ = ("out", "inputs", "backward")

    def __init__(self, out, inputs, backward):
        self.out = out
        self.inputs = inputs
        self.backward = backward


class GradientTape:
    """Append-only list of operation nodes in execution order."""

    _next_gen = 0

    def __init__(self):
        GradientTape._next_gen += 1
        self.gen = GradientTape._next_gen
        self.nodes: list[_Node] = []


_ACTIVE: GradientTape | None = None


@contextlib.contextmanager
def recording():
    """Activate a fresh tape.  Operations run inside record backward nodes."""
    global _ACTIVE
    prev = _ACTIVE
    _ACTIVE = GradientTape()
    try:
        yield _ACTIVE
    finally:
        _ACTIVE = prev


def active_tape() -> GradientTape | None:
    return _ACTIVE


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _tracked(x: Tensor) -> bool:
    if x.requires_grad:
        return True
    node = x.tape_node
    return node is not None and _ACTIVE is not None and node[0] == _ACTIVE.gen


def record_node(out_data: np.ndarray, inputs: Sequence[Tensor],
                backward: Callable[[np.ndarray], Iterable[np.ndarray | None]]) -> Tensor:
    """Wrap out_data in a Tensor and, if a tape is active and any input is
    tracked, register a backward node.  This is the extension point custom
    primitives (scan, pooling) use; every built-in op goes through it too."""
    out = Tensor.__new__(Tensor)
    out.data = out_data
    out.requires_grad = False
    out.tape_node = None
    tape = _ACTIVE
    if tape is not None and any(_tracked(x) for x in inputs):
        tape.nodes.append(_Node(out, tuple(inputs), backward))
        out.tape_node = (tape.gen, len(tape.nodes) - 1)
    return out


def backward(loss: Tensor) -> dict[Tensor, Tensor]:
    """Reverse sweep from a scalar loss.  Returns {leaf tensor: gradient} for
    every requires_grad leaf that was reached, then clears the tape."""
    tape = _ACTIVE
    if tape is None:
        raise RuntimeError("backward() called with no active tape; wrap the forward pass in recording()")
    if loss.data.size != 1:
        raise ValueError(f"loss must be a scalar, got shape {loss.data.shape}")
    grads: dict[Tensor, np.ndarray] = {loss: np.ones_like(loss.data)}
    for node in reversed(tape.nodes):
        gout = grads.pop(node.out, None)
        if gout is None:
            continue
        gins = node.backward(gout)
        for inp, gin in zip(node.inputs, gins):
            if gin is None or not isinstance(inp, Tensor) or not _tracked(inp):
                continue
            if gin.shape != inp.data.shape:
                raise RuntimeError(
                    f"backward produced gradient of shape {gin.shape} for input of shape {inp.data.shape}")
            held = grads.get(inp)
            grads[inp] = gin if held is None else held + gin
    tape.nodes.clear()
    return {t: Tensor(g) for t, g in grads.items() if t.requires_grad}


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a broadcast gradient back down to the original operand shape."""
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def _check_binary_shapes(a: np.ndarray, b: np.ndarray, opname: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ValueError(f"{opname}: shapes {a.shape} and {b.shape} do not broadcast") from None


# ---------------------------------------------------------------------------
# binary operations

def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_binary_shapes(a.data, b.data, "add")
    out = a.data + b.data

    def bwd(g):
        return _unbroadcast(g, a.data.shape), _unbroadcast(g, b.data.shape)

    return record_node(out, (a, b), bwd)


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_binary_shapes(a.data, b.data, "sub")
    out = a.data - b.data

    def bwd(g):
        return _unbroadcast(g, a.data.shape), _unbroadcast(-g, b.data.shape)

    return record_node(out, (a, b), bwd)


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_binary_shapes(a.data, b.data, "mul")
    out = a.data * b.data

    def bwd(g):
        return _unbroadcast(g * b.data, a.data.shape), _unbroadcast(g * a.data, b.data.shape)

    return record_node(out, (a, b), bwd)


def div(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_binary_shapes(a.data, b.data, "div")
    out = a.data / b.data

    def bwd(g):
        ga = _unbroadcast(g / b.data, a.data.shape)
        gb = _unbroadcast(-g * a.data / (b.data * b.data), b.data.shape)
        return ga, gb

    return record_node(out, (a, b), bwd)


def matmul(a, b) -> Tensor:
    """a[..., m, k] @ b[k, n].  The right operand is a 2-d weight matrix."""
    a, b = _as_tensor(a), _as_tensor(b)
    if b.data.ndim != 2:
        raise ValueError(f"matmul: right operand must be 2-d, got shape {b.data.shape}")
    if a.data.ndim < 1 or a.data.shape[-1] != b.data.shape[0]:
        raise ValueError(f"matmul: inner dims disagree, {a.data.shape} @ {b.data.shape}")
    out = a.data @ b.data

    def bwd(g):
        ga = g @ b.data.T
        k = a.data.shape[-1]
        gb = a.data.reshape(-1, k).T @ g.reshape(-1, b.data.shape[1])
        return ga, gb

    return record_node(out, (a, b), bwd)


# ---------------------------------------------------------------------------
# unary operations

def neg(x) -> Tensor:
    x = _as_tensor(x)
    return record_node(-x.data, (x,), lambda g: (-g,))


def exp(x) -> Tensor:
    x = _as_tensor(x)
    out = np.exp(x.data)
    return record_node(out, (x,), lambda g: (g * out,))


def expm1(x) -> Tensor:
    x = _as_tensor(x)
    out = np.expm1(x.data)
    return record_node(out, (x,), lambda g: (g * np.exp(x.data),))


def log(x) -> Tensor:
    x = _as_tensor(x)
    out = np.log(x.data)
    return record_node(out, (x,), lambda g: (g / x.data,))


def sqrt(x) -> Tensor:
    x = _as_tensor(x)
    out = np.sqrt(x.data)
    return record_node(out, (x,), lambda g: (g * (0.5 / out),))


def square(x) -> Tensor:
    x = _as_tensor(x)
    return record_node(x.data * x.data, (x,), lambda g: (g * (2.0 * x.data),))


def sin(x) -> Tensor:
    x = _as_tensor(x)
    return record_node(np.sin(x.data), (x,), lambda g: (g * np.cos(x.data),))


def cos(x) -> Tensor:
    x = _as_tensor(x)
    return record_node(np.cos(x.data), (x,), lambda g: (-g * np.sin(x.data),))


def sigmoid(x) -> Tensor:
    x = _as_tensor(x)
    out = _expit(x.data)

    def bwd(g):
        return (g * out * (1.0 - out),)

    return record_node(out, (x,), bwd)


def softplus(x) -> Tensor:
    """log(1 + exp(x)), computed stably for large |x|."""
    x = _as_tensor(x)
    out = np.logaddexp(np.zeros((), dtype=x.data.dtype), x.data)

    def bwd(g):
        return (g * _expit(x.data),)

    return record_node(out, (x,), bwd)


def gelu(x) -> Tensor:
    """Exact Gaussian-error-linear unit x * Phi(x), not the tanh surrogate."""
    x = _as_tensor(x)
    cdf = 0.5 * (1.0 + _erf(x.data * _INV_SQRT2))
    out = x.data * cdf

    def bwd(g):
        pdf = _INV_SQRT2PI * np.exp(-0.5 * x.data * x.data)
        return (g * (cdf + x.data * pdf),)

    return record_node(out, (x,), bwd)


def maximum_scalar(x, c: float) -> Tensor:
    """Elementwise max(x, c) against a constant; gradient passes where x > c."""
    x = _as_tensor(x)
    out = np.maximum(x.data, np.asarray(c, dtype=x.data.dtype))

    def bwd(g):
        return (np.where(x.data > c, g, np.zeros((), dtype=g.dtype)),)

    return record_node(out, (x,), bwd)


def stop_gradient(x) -> Tensor:
    """Detach from the tape: same values, no backward node."""
    x = _as_tensor(x)
    out = Tensor.__new__(Tensor)
    out.data = x.data
    out.requires_grad = False
    out.tape_node = None
    return out


# ---------------------------------------------------------------------------
# reductions

def _axis_tuple(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def reduce_sum(x, axis=None, keepdims: bool = False) -> Tensor:
    x = _as_tensor(x)
    out = x.data.sum(axis=axis, keepdims=keepdims)
    axes = _axis_tuple(axis, x.data.ndim)

    def bwd(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, x.data.shape).copy(),)

    return record_node(out, (x,), bwd)


def reduce_mean(x, axis=None, keepdims: bool = False) -> Tensor:
    # accumulate in 64-bit: means of constant inputs stay exact at any count
    x = _as_tensor(x)
    out = x.data.mean(axis=axis, keepdims=keepdims, dtype=np.float64).astype(x.data.dtype)
    axes = _axis_tuple(axis, x.data.ndim)
    count = 1
    for a in axes:
        count *= x.data.shape[a]

    def bwd(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g / count, x.data.shape).copy(),)

    return record_node(out, (x,), bwd)


def reduce_max(x, axis=None, keepdims: bool = False) -> np.ndarray:
    """Plain numpy max.  Deliberately not differentiable: only used on
    detached values (e.g. the shift inside a stable log-sum-exp)."""
    x = _as_tensor(x)
    return x.data.max(axis=axis, keepdims=keepdims)


def logsumexp(x, axis: int = -1, keepdims: bool = False) -> Tensor:
    """Stable log(sum(exp(x))).  The max shift is detached, which leaves the
    gradient exact because the shift contributes d(shift) - d(shift) = 0."""
    x = _as_tensor(x)
    shift = reduce_max(x, axis=axis, keepdims=True)
    shifted = sub(x, Tensor(shift))
    out = add(log(reduce_sum(exp(shifted), axis=axis, keepdims=True)), Tensor(shift))
    if not keepdims:
        out = reshape(out, np.delete(np.array(out.data.shape), axis % x.data.ndim).tolist())
    return out


# ---------------------------------------------------------------------------
# shape operations

def reshape(x, shape) -> Tensor:
    x = _as_tensor(x)
    shape = tuple(int(s) for s in shape)
    out = x.data.reshape(shape)
    return record_node(out, (x,), lambda g: (g.reshape(x.data.shape),))


def moveaxis(x, src: int, dst: int) -> Tensor:
    x = _as_tensor(x)
    out = np.ascontiguousarray(np.moveaxis(x.data, src, dst))
    return record_node(out, (x,), lambda g: (np.ascontiguousarray(np.moveaxis(g, dst, src)),))


def broadcast_to(x, shape) -> Tensor:
    x = _as_tensor(x)
    shape = tuple(int(s) for s in shape)
    out = np.broadcast_to(x.data, shape).copy()
    return record_node(out, (x,), lambda g: (_unbroadcast(g, x.data.shape),))


def concat(parts, axis: int = 0) -> Tensor:
    parts = [_as_tensor(p) for p in parts]
    out = np.concatenate([p.data for p in parts], axis=axis)
    sizes = [p.data.shape[axis] for p in parts]
    splits = np.cumsum(sizes)[:-1]

    def bwd(g):
        return tuple(np.ascontiguousarray(piece) for piece in np.split(g, splits, axis=axis))

    return record_node(out, tuple(parts), bwd)


def slice_axis(x, axis: int, start: int, stop: int) -> Tensor:
    x = _as_tensor(x)
    index = [slice(None)] * x.data.ndim
    index[axis] = slice(start, stop)
    index = tuple(index)
    out = np.ascontiguousarray(x.data[index])

    def bwd(g):
        full = np.zeros_like(x.data)
        full[index] = g
        return (full,)

    return record_node(out, (x,), bwd)


# ---------------------------------------------------------------------------
# gather operations

def lookup(table, idx: np.ndarray) -> Tensor:
    """Row gather table[idx] for integer idx of any shape; duplicate rows
    accumulate gradient."""
    table = _as_tensor(table)
    idx = np.asarray(idx)
    out = table.data[idx]

    def bwd(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, idx.reshape(-1), g.reshape(-1, table.data.shape[-1]))
        return (gt,)

    return record_node(out, (table,), bwd)


def take_last(x, idx: np.ndarray) -> Tensor:
    """Pick x[..., idx[...]] along the final axis, one element per row."""
    x = _as_tensor(x)
    idx = np.asarray(idx)
    if idx.shape != x.data.shape[:-1]:
        raise ValueError(f"take_last: index shape {idx.shape} must match leading dims {x.data.shape[:-1]}")
    expanded = np.expand_dims(idx, -1)
    out = np.take_along_axis(x.data, expanded, axis=-1)[..., 0]

    def bwd(g):
        gx = np.zeros_like(x.data)
        np.put_along_axis(gx, expanded, np.expand_dims(g, -1), axis=-1)
        return (gx,)

    return record_node(out, (x,), bwd)
