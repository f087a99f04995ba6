"""Reverse-mode autodiff on dense numpy arrays.

The workhorse value type is a rank-5 tensor laid out as
(batch, channel, depth, height, width) in row-major float32, but the same
class also carries the rank-2 matrices (pooled features, logits) that show
up at the end of the network.  Every differentiable operation records a
node on an implicit tape: the output tensor keeps references to its parent
tensors and a vjp closure.  ``Tensor.backward`` replays the tape once in
reverse topological order, accumulating gradients in a fixed order so that
results are bit-reproducible.

Set ``GFN_CHECK_FINITE=1`` in the environment to scan every op output for
NaN/Inf (debug runs only; it costs a full pass over each result).
"""

from __future__ import annotations

import os
import warnings

import numpy as np

from .errors import ConfigError

FLOAT_DTYPES = (np.float32, np.float64)

_grad_enabled = True


def finite_checks_enabled():
    return os.environ.get("GFN_CHECK_FINITE", "") == "1"


class no_grad:
    """Context manager that disables tape recording (inference mode)."""

    def __enter__(self):
        global _grad_enabled
        self._prev = _grad_enabled
        _grad_enabled = False
        return self

    def __exit__(self, *exc):
        global _grad_enabled
        _grad_enabled = self._prev
        return False


def _as_float_array(data):
    arr = np.asarray(data)
    if arr.dtype not in FLOAT_DTYPES:
        arr = arr.astype(np.float32)
    return arr


class Tensor:
    """A numpy array plus the tape node that produced it.

    ``data`` is never mutated by operations; parameter updates and
    batch-norm running statistics are the only sanctioned in-place writes
    in the package, and both happen outside any recorded graph.
    """

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_vjp", "op")

    def __init__(self, data, requires_grad=False, _parents=(), _vjp=None, op="leaf"):
        self.data = _as_float_array(data)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._parents = _parents
        self._vjp = _vjp
        self.op = op

    # -- basic introspection -------------------------------------------------

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

    def __repr__(self):
        return f"Tensor(op={self.op!r}, shape={self.data.shape}, grad={self.requires_grad})"

    def item(self):
        return float(self.data)

    def detach(self):
        return Tensor(self.data, requires_grad=False)

    # -- graph construction --------------------------------------------------

    def backward(self):
        """Accumulate d(self)/d(node) into ``.grad`` of every reachable node.

        ``self`` must hold a single scalar.  Nodes are visited exactly once
        in reverse topological order; accumulation is plain serial addition
        in that fixed order, so repeated runs are bit-identical.
        """
        if self.data.size != 1:
            raise ConfigError(f"backward requires a scalar loss, got shape {self.data.shape}")
        topo = []
        visited = set()
        stack = [(self, False)]
        while stack:
            node, done = stack.pop()
            if done:
                topo.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if id(parent) not in visited:
                    stack.append((parent, False))
        self.grad = np.ones_like(self.data)
        for node in reversed(topo):
            if node._vjp is None or node.grad is None:
                continue
            for parent, g in zip(node._parents, node._vjp(node.grad)):
                if g is None or not parent.requires_grad:
                    continue
                parent.grad = g if parent.grad is None else parent.grad + g

    # -- arithmetic ------------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __sub__(self, other):
        return add(self, mul(other, -1.0))

    def __rsub__(self, other):
        return add(mul(self, -1.0), other)

    def __neg__(self):
        return mul(self, -1.0)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __pow__(self, exponent):
        return pow_scalar(self, exponent)

    def exp(self):
        return exp(self)

    def log(self):
        return log(self)

    def sigmoid(self):
        return sigmoid(self)

    def relu(self):
        return relu(self)

    def elu(self):
        return elu(self)

    def softplus(self):
        return softplus(self)

    def sum(self, axis=None, keepdims=False):
        return reduce_sum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return reduce_mean(self, axis, keepdims)

    def max(self, axis=None, keepdims=False):
        return reduce_max(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


class Parameter(Tensor):
    """A learnable tensor with initialization metadata.

    ``fan_in`` drives fan-in-scaled uniform init; ``init_const`` pins the
    parameter to a constant instead (biases 0, BN gamma 1, gate theta0).
    """

    __slots__ = ("name", "fan_in", "init_const")

    def __init__(self, shape, dtype=np.float32, name="", fan_in=None, init_const=None):
        super().__init__(np.zeros(shape, dtype=dtype), requires_grad=True)
        self.name = name
        self.fan_in = fan_in
        self.init_const = init_const

    def __repr__(self):
        return f"Parameter(name={self.name!r}, shape={self.data.shape})"


def _wrap(value, like_dtype):
    if isinstance(value, Tensor):
        return value
    arr = np.asarray(value, dtype=like_dtype)
    return Tensor(arr)


def make_op(out_data, parents, vjp, op):
    """Build the output tensor of an op, recording a tape node if needed."""
    if finite_checks_enabled() and not np.all(np.isfinite(out_data)):
        raise FloatingPointError(f"non-finite values produced by op {op!r}")
    track = _grad_enabled and any(p.requires_grad for p in parents)
    if track:
        return Tensor(out_data, requires_grad=True, _parents=parents, _vjp=vjp, op=op)
    return Tensor(out_data, op=op)


def unbroadcast(grad, shape):
    """Reduce ``grad`` back to ``shape`` after numpy broadcasting."""
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


# -- elementwise ops ---------------------------------------------------------


def add(a, b):
    a = _wrap(a, getattr(b, "dtype", np.float32))
    b = _wrap(b, a.dtype)
    out = a.data + b.data

    def vjp(g):
        return unbroadcast(g, a.shape), unbroadcast(g, b.shape)

    return make_op(out, (a, b), vjp, "add")


def mul(a, b):
    a = _wrap(a, getattr(b, "dtype", np.float32))
    b = _wrap(b, a.dtype)
    out = a.data * b.data

    def vjp(g):
        return unbroadcast(g * b.data, a.shape), unbroadcast(g * a.data, b.shape)

    return make_op(out, (a, b), vjp, "mul")


def div(a, b):
    a = _wrap(a, getattr(b, "dtype", np.float32))
    b = _wrap(b, a.dtype)
    out = a.data / b.data

    def vjp(g):
        ga = unbroadcast(g / b.data, a.shape)
        gb = unbroadcast(-g * a.data / (b.data * b.data), b.shape)
        return ga, gb

    return make_op(out, (a, b), vjp, "div")


def pow_scalar(a, exponent):
    exponent = float(exponent)
    out = np.power(a.data, exponent)

    if exponent == 0.0:
        def vjp(g):
            return (np.zeros_like(a.data),)
    else:
        def vjp(g):
            return (g * exponent * np.power(a.data, exponent - 1.0),)

    return make_op(out, (a,), vjp, "pow")


def exp(a):
    out = np.exp(a.data)

    def vjp(g):
        return (g * out,)

    return make_op(out, (a,), vjp, "exp")


def log(a):
    out = np.log(a.data)

    def vjp(g):
        return (g / a.data,)

    return make_op(out, (a,), vjp, "log")


def sigmoid(a):
    """Logistic function, evaluated on a branch that never overflows."""
    x = a.data
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)

    def vjp(g):
        return (g * out * (1.0 - out),)

    return make_op(out, (a,), vjp, "sigmoid")


def softplus(a):
    """log(1 + e^x) via max(x, 0) + log1p(e^-|x|); exact sigmoid gradient."""
    x = a.data
    out = np.maximum(x, 0) + np.log1p(np.exp(-np.abs(x)))

    def vjp(g):
        s = np.empty_like(x)
        pos = x >= 0
        s[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
        ex = np.exp(x[~pos])
        s[~pos] = ex / (1.0 + ex)
        return (g * s,)

    return make_op(out, (a,), vjp, "softplus")


def elu(a):
    """ELU with unit alpha: x for x >= 0, e^x - 1 otherwise."""
    x = a.data
    neg = x < 0
    out = np.where(neg, np.expm1(np.minimum(x, 0.0)), x)

    def vjp(g):
        return (np.where(neg, out + 1.0, 1.0) * g,)

    return make_op(out, (a,), vjp, "elu")


def relu(a):
    out = np.maximum(a.data, 0.0)

    def vjp(g):
        return (g * (a.data > 0),)

    return make_op(out, (a,), vjp, "relu")


# -- shape and reduction ops -------------------------------------------------


def reshape(a, shape):
    old_shape = a.data.shape
    out = a.data.reshape(shape)

    def vjp(g):
        return (g.reshape(old_shape),)

    return make_op(out, (a,), vjp, "reshape")


def reduce_sum(a, axis=None, keepdims=False):
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def vjp(g):
        g = np.asarray(g)
        if axis is not None and not keepdims:
            axes = axis if isinstance(axis, tuple) else (axis,)
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, a.data.shape).copy(),)

    return make_op(out, (a,), vjp, "sum")


def reduce_mean(a, axis=None, keepdims=False):
    if axis is None:
        count = a.data.size
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        count = int(np.prod([a.data.shape[i] for i in axes]))
    return mul(reduce_sum(a, axis, keepdims), 1.0 / count)


def reduce_max(a, axis=None, keepdims=False):
    """Max reduction routing the gradient to the first-in-row-major argmax."""
    out = a.data.max(axis=axis, keepdims=keepdims)

    def vjp(g):
        g = np.asarray(g)
        out_k = out
        if axis is not None and not keepdims:
            axes = axis if isinstance(axis, tuple) else (axis,)
            g = np.expand_dims(g, axes)
            out_k = np.expand_dims(out, axes)
        hit = a.data == out_k
        first = _first_true(hit, _normalize_axes(axis, a.data.ndim), a.data.dtype)
        return (first * g,)

    return make_op(out, (a,), vjp, "max")


def _normalize_axes(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        return (axis % ndim,)
    return tuple(ax % ndim for ax in axis)


def _first_true(mask, axes, dtype):
    """Zero all True entries except the row-major first one along ``axes``."""
    tail = tuple(range(mask.ndim - len(axes), mask.ndim))
    moved = np.moveaxis(mask, axes, tail)
    flat = moved.reshape(moved.shape[: mask.ndim - len(axes)] + (-1,))
    idx = flat.argmax(axis=-1)
    keep = np.zeros(flat.shape, dtype=dtype)
    np.put_along_axis(keep, idx[..., None], 1.0, axis=-1)
    return np.moveaxis(keep.reshape(moved.shape), tail, axes)


def concat_channels(tensors):
    """Concatenate along the channel axis (axis 1); vjp splits by offsets."""
    if not tensors:
        raise ConfigError("concat_channels requires at least one tensor")
    base = tensors[0].data.shape
    for i, t in enumerate(tensors):
        s = t.data.shape
        if len(s) != len(base) or s[0] != base[0] or s[2:] != base[2:]:
            raise ConfigError(
                f"concat_channels input {i} has shape {s}, incompatible with {base} outside axis 1"
            )
    out = np.concatenate([t.data for t in tensors], axis=1)
    sizes = [t.data.shape[1] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def vjp(g):
        return tuple(g[:, offsets[i]:offsets[i + 1]] for i in range(len(tensors)))

    return make_op(out, tuple(tensors), vjp, "concat")


# -- tape extraction ---------------------------------------------------------


def backprop(loss, params):
    """Return d(loss)/d(p) for every tensor in ``params``.

    A parameter that the tape never reached is reported with a zero
    gradient and a warning rather than silently dropped.
    """
    loss.backward()
    grads = []
    for i, p in enumerate(params):
        if p.grad is None:
            label = getattr(p, "name", "") or f"parameter[{i}]"
            warnings.warn(f"{label} not reached by backprop; returning zero gradient")
            grads.append(np.zeros_like(p.data))
        else:
            grads.append(p.grad)
    return grads


def zero_grads(params):
    for p in params:
        p.grad = None
