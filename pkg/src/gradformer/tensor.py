"""Reverse-mode automatic differentiation over dense numpy arrays.

Every differentiable operation records a node carrying its parents and a
backward rule. Nodes are numbered in creation order, so replaying them in
reverse sequence order is a valid reverse topological order of the graph.
"""

import contextlib
import itertools
import math

import numpy as np

from .errors import ContractError, DimensionError, NumericDomainError

_DEFAULT_DTYPE = np.float32
_GRAD_ENABLED = True
_SEQ = itertools.count()

_GELU_C = math.sqrt(2.0 / math.pi)


def default_dtype():
    return _DEFAULT_DTYPE


def set_default_dtype(dtype):
    global _DEFAULT_DTYPE
    dtype = np.dtype(dtype).type
    if dtype not in (np.float32, np.float64):
        raise ValueError(f"unsupported dtype {dtype!r}")
    _DEFAULT_DTYPE = dtype


@contextlib.contextmanager
def precision(dtype):
    """Temporarily switch the default floating dtype (``float64`` for gradcheck)."""
    previous = _DEFAULT_DTYPE
    set_default_dtype(dtype)
    try:
        yield
    finally:
        set_default_dtype(previous)


def float64_mode():
    return precision(np.float64)


def is_grad_enabled():
    return _GRAD_ENABLED


@contextlib.contextmanager
def no_grad():
    global _GRAD_ENABLED
    previous = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = previous


class Tensor:
    """N-dimensional real array with an optional gradient accumulator."""

    __array_priority__ = 100

    def __init__(self, data, requires_grad=False, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        if dtype is None:
            # numpy float arrays keep their precision; lists and scalars take the default
            is_float_array = isinstance(data, (np.ndarray, np.generic)) and data.dtype in (np.float32, np.float64)
            dtype = data.dtype if is_float_array else _DEFAULT_DTYPE
        arr = np.asarray(data, dtype=dtype)
        self.data = arr if arr.flags.c_contiguous else arr.copy(order="C")
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._parents = ()
        self._backward = None
        self._seq = -1

    # -- introspection -------------------------------------------------
    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self):
        return self.data.size

    def numpy(self):
        return self.data

    def item(self):
        return self.data.item()

    def __len__(self):
        return self.data.shape[0]

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype.name}{flag})"

    def detach(self):
        return Tensor(self.data.copy())

    def zero_grad(self):
        self.grad = np.zeros_like(self.data)

    def backward(self, retain_graph=False):
        backward(self, retain_graph=retain_graph)

    # -- operator sugar --------------------------------------------------
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

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return index_select(self, index)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def permute(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return permute(self, axes)

    def sum(self, axis=None, keepdims=False):
        return sum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)


def as_tensor(x):
    if isinstance(x, Tensor):
        return x
    return Tensor(x)


def _record(data, parents, backward_fn):
    """Wrap ``data`` and attach a graph node when any parent needs gradients."""
    out = Tensor(data, dtype=data.dtype if data.dtype in (np.float32, np.float64) else None)
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
        out._seq = next(_SEQ)
    return out


def _unbroadcast(grad, shape):
    """Sum ``grad`` down to ``shape`` (inverse of numpy broadcasting)."""
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _coerce(a, b):
    """Tensor-ify a binary op's operands; bare scalars adopt the other operand's dtype."""
    if isinstance(a, Tensor) and not isinstance(b, Tensor):
        return a, Tensor(np.asarray(b, dtype=a.dtype))
    if isinstance(b, Tensor) and not isinstance(a, Tensor):
        return Tensor(np.asarray(a, dtype=b.dtype)), b
    return as_tensor(a), as_tensor(b)


def _broadcast_shape(a, b):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError(f"shapes {a.shape} and {b.shape} are not broadcastable") from None


# ---------------------------------------------------------------------------
# Elementwise binary ops
# ---------------------------------------------------------------------------

def add(a, b):
    a, b = _coerce(a, b)
    _broadcast_shape(a, b)

    def backward_fn(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _record(a.data + b.data, (a, b), backward_fn)


def sub(a, b):
    a, b = _coerce(a, b)
    _broadcast_shape(a, b)

    def backward_fn(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _record(a.data - b.data, (a, b), backward_fn)


def mul(a, b):
    a, b = _coerce(a, b)
    _broadcast_shape(a, b)

    def backward_fn(g):
        ga = _unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return _record(a.data * b.data, (a, b), backward_fn)


def div(a, b):
    a, b = _coerce(a, b)
    _broadcast_shape(a, b)
    out = a.data / b.data

    def backward_fn(g):
        ga = _unbroadcast(g / b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(-g * out / b.data, b.shape) if b.requires_grad else None
        return ga, gb

    return _record(out, (a, b), backward_fn)


def neg(x):
    x = as_tensor(x)
    return _record(-x.data, (x,), lambda g: (-g,))


def square(x):
    x = as_tensor(x)
    return _record(x.data * x.data, (x,), lambda g: (2.0 * g * x.data,))


# ---------------------------------------------------------------------------
# Elementwise unary ops
# ---------------------------------------------------------------------------

def exp(x):
    x = as_tensor(x)
    out = np.exp(x.data)
    return _record(out, (x,), lambda g: (g * out,))


def log(x):
    x = as_tensor(x)
    if np.any(x.data <= 0):
        raise NumericDomainError("log of a non-positive value")
    return _record(np.log(x.data), (x,), lambda g: (g / x.data,))


def sqrt(x):
    x = as_tensor(x)
    if np.any(x.data < 0):
        raise NumericDomainError("sqrt of a negative value")
    out = np.sqrt(x.data)
    return _record(out, (x,), lambda g: (g * 0.5 / out,))


def tanh(x):
    x = as_tensor(x)
    out = np.tanh(x.data)
    return _record(out, (x,), lambda g: (g * (1.0 - out * out),))


def gelu(x):
    """GELU, tanh approximation."""
    x = as_tensor(x)
    d = x.data
    d2 = d * d
    inner = _GELU_C * (d + 0.044715 * d2 * d)
    t = np.tanh(inner)
    out = 0.5 * d * (1.0 + t)

    def backward_fn(g):
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * d2)
        return (g * (0.5 * (1.0 + t) + 0.5 * d * (1.0 - t * t) * dinner),)

    return _record(out.astype(d.dtype, copy=False), (x,), backward_fn)


# ---------------------------------------------------------------------------
# Softmax family
# ---------------------------------------------------------------------------

def _check_axis(x, axis):
    if not -x.ndim <= axis < x.ndim:
        raise DimensionError(f"axis {axis} out of range for {x.ndim}-d tensor")
    return axis % x.ndim


def softmax(x, axis=-1):
    x = as_tensor(x)
    axis = _check_axis(x, axis)
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def backward_fn(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _record(out, (x,), backward_fn)


def log_softmax(x, axis=-1):
    x = as_tensor(x)
    axis = _check_axis(x, axis)
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    out = shifted - np.log(np.exp(shifted).sum(axis=axis, keepdims=True))

    def backward_fn(g):
        return (g - np.exp(out) * g.sum(axis=axis, keepdims=True),)

    return _record(out, (x,), backward_fn)


# ---------------------------------------------------------------------------
# Reductions
# ---------------------------------------------------------------------------

def _norm_axes(x, axis):
    if axis is None:
        return tuple(range(x.ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(_check_axis(x, a) for a in axis)


def sum(x, axis=None, keepdims=False):  # noqa: A001 - mirrors numpy naming
    x = as_tensor(x)
    axes = _norm_axes(x, axis)
    out = x.data.sum(axis=axes, keepdims=keepdims)

    def backward_fn(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, x.shape),)

    return _record(np.asarray(out), (x,), backward_fn)


def mean(x, axis=None, keepdims=False):
    x = as_tensor(x)
    axes = _norm_axes(x, axis)
    count = 1
    for a in axes:
        count *= x.shape[a]
    out = x.data.mean(axis=axes, keepdims=keepdims)

    def backward_fn(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g / count, x.shape),)

    return _record(np.asarray(out, dtype=x.dtype), (x,), backward_fn)


# ---------------------------------------------------------------------------
# Shape manipulation
# ---------------------------------------------------------------------------

def reshape(x, shape):
    x = as_tensor(x)
    shape = tuple(int(s) for s in shape)
    try:
        out = x.data.reshape(shape)
    except ValueError:
        raise DimensionError(f"cannot reshape {x.shape} into {shape}") from None
    return _record(out, (x,), lambda g: (g.reshape(x.shape),))


def permute(x, axes):
    x = as_tensor(x)
    axes = tuple(int(a) % x.ndim for a in axes)
    if sorted(axes) != list(range(x.ndim)):
        raise DimensionError(f"{axes} is not a permutation of {x.ndim} axes")
    inverse = tuple(np.argsort(axes))
    return _record(x.data.transpose(axes), (x,), lambda g: (g.transpose(inverse),))


def transpose(x, axis1=-2, axis2=-1):
    axes = list(range(as_tensor(x).ndim))
    axes[axis1], axes[axis2] = axes[axis2], axes[axis1]
    return permute(x, axes)


def concat(parts, axis=0):
    parts = [as_tensor(p) for p in parts]
    if not parts:
        raise DimensionError("concat of an empty list")
    axis = _check_axis(parts[0], axis)
    for p in parts[1:]:
        if p.ndim != parts[0].ndim or any(
            p.shape[i] != parts[0].shape[i] for i in range(p.ndim) if i != axis
        ):
            raise DimensionError(f"cannot concat {parts[0].shape} with {p.shape} on axis {axis}")
    out = np.concatenate([p.data for p in parts], axis=axis)
    bounds = np.cumsum([0] + [p.shape[axis] for p in parts])

    def backward_fn(g):
        index = [slice(None)] * g.ndim
        grads = []
        for lo, hi in zip(bounds[:-1], bounds[1:]):
            index[axis] = slice(lo, hi)
            grads.append(g[tuple(index)])
        return tuple(grads)

    return _record(out, tuple(parts), backward_fn)


def slice_axis(x, axis, start, stop):
    """Contiguous ``x[..., start:stop, ...]`` along ``axis``."""
    x = as_tensor(x)
    axis = _check_axis(x, axis)
    index = [slice(None)] * x.ndim
    index[axis] = slice(start, stop)
    index = tuple(index)
    return index_select(x, index)


def index_select(x, index):
    x = as_tensor(x)
    out = x.data[index]

    def backward_fn(g):
        full = np.zeros_like(x.data)
        if _is_fancy(index):
            np.add.at(full, index, g)
        else:
            full[index] = g
        return (full,)

    return _record(np.array(out, copy=True), (x,), backward_fn)


def _is_fancy(index):
    items = index if isinstance(index, tuple) else (index,)
    return any(isinstance(i, (list, np.ndarray)) for i in items)


def split(x, pieces, axis=0):
    x = as_tensor(x)
    axis = _check_axis(x, axis)
    extent = x.shape[axis]
    if pieces <= 0 or extent % pieces:
        raise DimensionError(f"extent {extent} on axis {axis} does not split into {pieces}")
    step = extent // pieces
    return [slice_axis(x, axis, i * step, (i + 1) * step) for i in range(pieces)]


def repeat_nearest(x, factor):
    """Nearest-neighbour upsampling of the two trailing axes by an integer factor."""
    x = as_tensor(x)
    if factor == 1:
        return x
    out = x.data.repeat(factor, axis=-2).repeat(factor, axis=-1)

    def backward_fn(g):
        *lead, h, w = g.shape
        g = g.reshape(*lead, h // factor, factor, w // factor, factor)
        return (g.sum(axis=(-3, -1)),)

    return _record(out, (x,), backward_fn)


# ---------------------------------------------------------------------------
# Linear algebra
# ---------------------------------------------------------------------------

def matmul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError("matmul operands need at least two dimensions")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul inner extents differ: {a.shape} @ {b.shape}")
    if a.shape[:-2] != b.shape[:-2]:
        try:
            np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
        except ValueError:
            raise DimensionError(f"matmul batch extents differ: {a.shape} @ {b.shape}") from None
    out = np.matmul(a.data, b.data)

    def backward_fn(g):
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape)
        if b.requires_grad:
            gb = _unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape)
        return ga, gb

    return _record(out, (a, b), backward_fn)


def record_op(data, parents, backward_fn):
    """Register a custom differentiable op (used by convolution kernels).

    ``backward_fn`` receives the output gradient and returns one gradient
    (or ``None``) per parent.
    """
    return _record(data, tuple(parents), backward_fn)


# ---------------------------------------------------------------------------
# Backward pass
# ---------------------------------------------------------------------------

def backward(loss, retain_graph=False):
    """Accumulate d(loss)/d(t) into ``t.grad`` for every reachable tensor
    that requires gradients."""
    if loss.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise ContractError("loss does not depend on any tensor requiring gradients")

    nodes = []
    seen = set()
    stack = [loss]
    while stack:
        t = stack.pop()
        if id(t) in seen:
            continue
        seen.add(id(t))
        nodes.append(t)
        for p in t._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append(p)
    # leaves carry _seq == -1 and sort last; interior nodes replay in reverse tape order
    nodes.sort(key=lambda t: t._seq, reverse=True)

    pending = {id(loss): np.ones_like(loss.data)}
    for t in nodes:
        g = pending.pop(id(t), None)
        if g is None:
            continue
        if t.grad is None:
            t.grad = np.array(g, dtype=t.dtype, copy=True)
        else:
            t.grad = t.grad + g
        if t._backward is None:
            continue
        grads = t._backward(g)
        for p, pg in zip(t._parents, grads):
            if pg is None or not p.requires_grad:
                continue
            if id(p) in pending:
                pending[id(p)] = pending[id(p)] + pg
            else:
                pending[id(p)] = pg
        if not retain_graph:
            t._parents = ()
            t._backward = None


# ---------------------------------------------------------------------------
# Finite-difference gradient checking
# ---------------------------------------------------------------------------

class GradcheckReport:
    """Per-element comparison of analytic and central-difference gradients."""

    def __init__(self, analytic, numeric, tol, floor):
        self.analytic = np.asarray(analytic, dtype=np.float64)
        self.numeric = np.asarray(numeric, dtype=np.float64)
        denom = np.maximum(np.maximum(np.abs(self.analytic), np.abs(self.numeric)), floor)
        self.rel_errors = np.abs(self.analytic - self.numeric) / denom
        self.tol = tol

    @property
    def max_rel_error(self):
        return float(self.rel_errors.max()) if self.rel_errors.size else 0.0

    @property
    def passed(self):
        return self.max_rel_error < self.tol

    def __bool__(self):
        return self.passed

    def __repr__(self):
        status = "PASS" if self.passed else "FAIL"
        return f"GradcheckReport({status}, max_rel_error={self.max_rel_error:.3e}, n={self.rel_errors.size})"


def gradcheck(f, inputs, step=1e-6, tol=1e-5, floor=None, indices=None):
    """Compare analytic gradients of scalar ``f(*inputs)`` with central differences.

    ``inputs`` is a Tensor or a sequence of Tensors, each with
    ``requires_grad`` set. ``indices`` optionally maps input position to a
    list of flat element indices to probe (all elements by default).
    Inputs should be float64 for meaningful tolerances.

    The relative error divides by ``max(|analytic|, |numeric|, floor)``. By
    default ``floor`` is the gradient magnitude below which the rounding
    noise of the difference quotient (about ``eps * |f| / step``) would
    itself exceed ``tol``; structurally zero gradients are then judged on
    that noise scale instead of failing on it.
    """
    if isinstance(inputs, Tensor):
        inputs = [inputs]
    inputs = list(inputs)
    for t in inputs:
        t.grad = None
    out = f(*inputs)
    if out.size != 1:
        out = sum(out)
    backward(out)
    analytic, numeric = [], []
    for pos, t in enumerate(inputs):
        grad = t.grad if t.grad is not None else np.zeros_like(t.data)
        flat = t.data.reshape(-1)
        probe = range(flat.size) if indices is None or pos not in indices else indices[pos]
        for i in probe:
            orig = flat[i]
            flat[i] = orig + step
            with no_grad():
                fp = _scalar(f(*inputs))
            flat[i] = orig - step
            with no_grad():
                fm = _scalar(f(*inputs))
            flat[i] = orig
            numeric.append((fp - fm) / (2 * step))
            analytic.append(grad.reshape(-1)[i])
    if floor is None:
        noise = 4 * np.finfo(np.float64).eps * max(1.0, abs(_scalar(out))) / step
        floor = max(1e-8, noise / tol)
    return GradcheckReport(analytic, numeric, tol, floor)


def _scalar(t):
    return float(np.sum(t.data, dtype=np.float64))
