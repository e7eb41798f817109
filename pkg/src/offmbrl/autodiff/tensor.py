"""Reverse-mode automatic differentiation over dense numpy arrays.

The engine is deliberately small: a ``Tensor`` wraps an ndarray, ops build a
tape of vector-Jacobian callbacks, and ``backward`` walks the tape in reverse
topological order. Production code runs in float32; float64 tensors are
accepted so verification oracles (finite differences) can run at full
precision through the exact same code path.
"""

from __future__ import annotations

import math
from contextlib import contextmanager

import numpy as np

from offmbrl.errors import ContractError, ShapeError

_GRAD_ENABLED = True


@contextmanager
def no_grad():
    """Disable tape construction inside the block (inference / target nets)."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def grad_enabled() -> bool:
    return _GRAD_ENABLED


class Tensor:
    """A dense float array plus an optional slot on the gradient tape.

    ``data`` is row-major float32 (float64 allowed for verification runs).
    ``grad`` is populated by ``backward`` for every tensor with
    ``requires_grad`` that the loss depends on; it accumulates across calls
    until reset.
    """

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_vjp")

    def __init__(self, data, requires_grad=False, _parents=(), _vjp=None):
        if isinstance(data, Tensor):
            raise ContractError("wrap ndarrays, not Tensors")
        if isinstance(data, np.ndarray) and data.dtype in (np.float32, np.float64):
            arr = data
        elif isinstance(data, (np.float32, np.float64)):
            arr = np.asarray(data)
        else:
            arr = np.asarray(data, dtype=np.float32)
        self.data = arr
        self.requires_grad = requires_grad
        self.grad = None
        self._parents = _parents
        self._vjp = _vjp

    # -- basic introspection ------------------------------------------------

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def __repr__(self):
        flag = ", grad" if self.requires_grad else ""
        return f"Tensor(shape={self.data.shape}{flag})"

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        """A view of the same buffer that is cut off from the tape."""
        return Tensor(self.data)

    # -- autograd -----------------------------------------------------------

    def backward(self):
        """Accumulate d(self)/d(leaf) into ``grad`` of every tracked tensor.

        ``self`` must be a finite scalar on the tape.
        """
        if self.data.size != 1:
            raise ContractError(f"backward requires a scalar loss, got shape {self.data.shape}")
        if not np.isfinite(self.data):
            raise ContractError("backward requires a finite loss")
        topo = _toposort(self)
        self.grad = np.ones_like(self.data)
        for node in topo:
            if node._vjp is None:
                continue
            g = node.grad
            if g is None:
                continue
            for parent, pg in zip(node._parents, node._vjp(g)):
                if pg is None or not parent.requires_grad:
                    continue
                if parent.grad is None:
                    # own the buffer: vjps may hand back views or aliases of g
                    parent.grad = np.array(pg, dtype=parent.data.dtype, copy=True)
                else:
                    parent.grad += pg

    # -- operator sugar -----------------------------------------------------

    def __add__(self, other):
        return add(self, _as_tensor(other, self.dtype))

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, _as_tensor(other, self.dtype))

    def __rsub__(self, other):
        return sub(_as_tensor(other, self.dtype), self)

    def __mul__(self, other):
        return mul(self, _as_tensor(other, self.dtype))

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, _as_tensor(other, self.dtype))

    def __neg__(self):
        return mul(self, _as_tensor(-1.0, self.dtype))

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return take(self, key)

    def sum(self, axis=None):
        return tsum(self, axis=axis)

    def mean(self, axis=None):
        return tmean(self, axis=axis)

    def reshape(self, *shape):
        return reshape(self, shape)


def _as_tensor(x, dtype) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype))


def _toposort(root: Tensor) -> list[Tensor]:
    """Reverse topological order via an explicit stack (graphs can be deep)."""
    order, visited = [], set()
    stack = [(root, iter(root._parents))]
    visited.add(id(root))
    while stack:
        node, parents = stack[-1]
        advanced = False
        for p in parents:
            if id(p) not in visited and p.requires_grad:
                visited.add(id(p))
                stack.append((p, iter(p._parents)))
                advanced = True
                break
        if not advanced:
            order.append(node)
            stack.pop()
    order.reverse()
    return order


def _make(data: np.ndarray, parents: tuple, vjp) -> Tensor:
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        return Tensor(data, requires_grad=True, _parents=parents, _vjp=vjp)
    return Tensor(data)


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum ``g`` down to ``shape`` (inverse of numpy broadcasting)."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# -- elementwise and reduction ops -------------------------------------------


def add(a: Tensor, b: Tensor) -> Tensor:
    out = a.data + b.data
    return _make(out, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a: Tensor, b: Tensor) -> Tensor:
    out = a.data - b.data
    return _make(out, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a: Tensor, b: Tensor) -> Tensor:
    out = a.data * b.data
    return _make(
        out,
        (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
    )


def div(a: Tensor, b: Tensor) -> Tensor:
    out = a.data / b.data
    return _make(
        out,
        (a, b),
        lambda g: (
            _unbroadcast(g / b.data, a.shape),
            _unbroadcast(-g * a.data / (b.data * b.data), b.shape),
        ),
    )


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ShapeError(f"matmul expects 2-D operands, got {a.shape} @ {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul inner dimensions differ: {a.shape} @ {b.shape}")
    out = a.data @ b.data
    return _make(out, (a, b), lambda g: (g @ b.data.T, a.data.T @ g))


def square(a: Tensor) -> Tensor:
    return _make(a.data * a.data, (a,), lambda g: (2.0 * a.data * g,))


def texp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _make(out, (a,), lambda g: (g * out,))


def tlog(a: Tensor) -> Tensor:
    return _make(np.log(a.data), (a,), lambda g: (g / a.data,))


def ttanh(a: Tensor) -> Tensor:
    out = np.tanh(a.data)
    return _make(out, (a,), lambda g: (g * (1.0 - out * out),))


def bounded_tanh(a: Tensor, eps: float = 1e-6) -> Tensor:
    """tanh clipped strictly inside (-1, 1); float32 tanh saturates exactly."""
    out = np.clip(np.tanh(a.data), -1.0 + eps, 1.0 - eps)
    return _make(out, (a,), lambda g: (g * (1.0 - out * out),))


def relu(a: Tensor) -> Tensor:
    out = np.maximum(a.data, 0.0)
    return _make(out, (a,), lambda g: (g * (a.data > 0),))


def elu(a: Tensor) -> Tensor:
    # branchless split: max(x,0) + expm1(min(x,0)) == elu(x)
    neg = np.expm1(np.minimum(a.data, 0.0))
    out = np.maximum(a.data, 0.0)
    out += neg
    # derivative: 1 for x>0, exp(x) otherwise == min(neg+1, 1)
    return _make(out, (a,), lambda g: (g * np.minimum(neg + 1.0, 1.0),))


def affine(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """Fused x @ w + b for 2-D x; one tape node per linear layer."""
    if x.data.ndim != 2:
        raise ShapeError(f"affine expects a 2-D input, got {x.shape}")
    if x.shape[1] != w.shape[0] or w.shape[1] != b.shape[-1]:
        raise ShapeError(f"affine shapes do not chain: {x.shape} @ {w.shape} + {b.shape}")
    out = x.data @ w.data
    out += b.data
    return _make(
        out, (x, w, b), lambda g: (g @ w.data.T, x.data.T @ g, g.sum(axis=0))
    )


def softplus(a: Tensor) -> Tensor:
    # log(1 + e^x) computed without overflow for large |x|
    out = np.maximum(a.data, 0.0) + np.log1p(np.exp(-np.abs(a.data)))
    return _make(out, (a,), lambda g: (g / (1.0 + np.exp(-a.data)),))


def tminimum(a: Tensor, b: Tensor) -> Tensor:
    mask = a.data <= b.data
    out = np.where(mask, a.data, b.data)
    return _make(
        out,
        (a, b),
        lambda g: (_unbroadcast(g * mask, a.shape), _unbroadcast(g * ~mask, b.shape)),
    )


def tsum(a: Tensor, axis=None) -> Tensor:
    out = a.data.sum(axis=axis)

    def vjp(g):
        if axis is None:
            return (np.broadcast_to(g, a.shape).astype(a.dtype, copy=False),)
        ge = np.expand_dims(g, axis)
        return (np.broadcast_to(ge, a.shape).astype(a.dtype, copy=False),)

    return _make(out, (a,), vjp)


def tmean(a: Tensor, axis=None) -> Tensor:
    n = a.data.size if axis is None else a.data.shape[axis]
    return mul(tsum(a, axis=axis), _as_tensor(1.0 / n, a.dtype))


def reshape(a: Tensor, shape) -> Tensor:
    if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
        shape = tuple(shape[0])
    out = a.data.reshape(shape)
    return _make(out, (a,), lambda g: (g.reshape(a.shape),))


def take(a: Tensor, key) -> Tensor:
    out = a.data[key]

    def vjp(g):
        full = np.zeros_like(a.data)
        full[key] = g
        return (full,)

    return _make(out, (a,), vjp)


def concat(tensors, axis=-1) -> Tensor:
    out = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.data.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def vjp(g):
        return tuple(np.split(g, splits, axis=axis))

    return _make(out, tuple(tensors), vjp)


def softmax(a: Tensor, axis=-1) -> Tensor:
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def vjp(g):
        dot = (g * out).sum(axis=axis, keepdims=True)
        return (out * (g - dot),)

    return _make(out, (a,), vjp)


def log_softmax(a: Tensor, axis=-1) -> Tensor:
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = shifted - lse
    probs = np.exp(out)

    def vjp(g):
        return (g - probs * g.sum(axis=axis, keepdims=True),)

    return _make(out, (a,), vjp)


def straight_through(soft: Tensor, hard: np.ndarray) -> Tensor:
    """Forward the discrete sample, backpropagate as if it were ``soft``."""
    if soft.shape != hard.shape:
        raise ShapeError(f"straight-through shapes differ: {soft.shape} vs {hard.shape}")
    return _make(hard.astype(soft.dtype, copy=False), (soft,), lambda g: (g,))


LOG_2PI = math.log(2.0 * math.pi)


def gaussian_log_prob(x: Tensor, mean: Tensor, log_std: Tensor) -> Tensor:
    """Diagonal-Gaussian log density, summed over the last axis."""
    z = (x - mean) * texp(-log_std)
    per_dim = -0.5 * square(z) - log_std - _as_tensor(0.5 * LOG_2PI, x.dtype)
    return tsum(per_dim, axis=-1)


def tanh_log_det_jacobian(x: Tensor) -> Tensor:
    """log(1 - tanh(x)^2) per dim via the overflow-safe softplus identity."""
    return 2.0 * (_as_tensor(math.log(2.0), x.dtype) - x - softplus(-2.0 * x))
