"""Reverse-mode automatic differentiation on small dense arrays.

Values are stored as float32; reductions (matmul, sums, log-sum-exp)
accumulate in float64 and round once. Every backward rule is written with
Tensor operations, so gradients can themselves be differentiated when
``grad(..., create_graph=True)`` is used (needed for Hessian-vector
products).
"""

from __future__ import annotations

import contextlib
import os
import threading

import numpy as np

from ..errors import ContractError, DimensionError, NumericError

DTYPE = np.float32

_state = threading.local()
_DEBUG = os.environ.get("MCULAB_DEBUG", "") not in ("", "0")


def grad_enabled() -> bool:
    return getattr(_state, "enabled", True)


@contextlib.contextmanager
def _grad_mode(enabled: bool):
    prev = grad_enabled()
    _state.enabled = enabled
    try:
        yield
    finally:
        _state.enabled = prev


def no_grad():
    """Context manager that stops graph recording in the current thread."""
    return _grad_mode(False)


def set_debug(flag: bool) -> None:
    """Toggle the finiteness assertion run after every operation."""
    global _DEBUG
    _DEBUG = bool(flag)


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "param_ref", "_parents", "_backward", "op", "_consumed")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=DTYPE)
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self.param_ref = None
        self._parents = ()
        self._backward = None
        self.op = "leaf"
        self._consumed = False

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def item(self) -> float:
        return float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"

    # arithmetic -----------------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(_lift(other)))

    def __rsub__(self, other):
        return add(_lift(other), neg(self))

    def __neg__(self):
        return neg(self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(_lift(other), self)

    def __matmul__(self, other):
        return matmul(self, other)

    @property
    def T(self):
        return transpose(self)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def exp(self):
        return exp(self)

    def log(self):
        return log(self)

    def tanh(self):
        return tanh(self)

    def relu(self):
        return relu(self)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def backward(self) -> None:
        """Populate ``.grad`` (numpy arrays) on every leaf that requires grad."""
        if self.data.size != 1:
            raise ContractError(f"backward needs a scalar loss, got shape {self.shape}")
        if self._consumed:
            raise ContractError("backward already ran on this graph; rebuild the forward pass first")
        self._consumed = True
        leaves = [n for n in _topo(self) if n._backward is None and n.requires_grad]
        grads = grad(self, leaves, allow_unused=True)
        for leaf, g in zip(leaves, grads):
            if g is None:
                continue
            leaf.grad = g.data.copy() if leaf.grad is None else leaf.grad + g.data


def _lift(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data, parents, backward, op) -> Tensor:
    data = np.asarray(data, dtype=DTYPE)
    if _DEBUG and not np.all(np.isfinite(data)):
        raise NumericError(f"non-finite values produced by {op}")
    out = Tensor(data)
    out.op = op
    if grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _topo(root: Tensor) -> list[Tensor]:
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen and p.requires_grad:
                stack.append((p, False))
    return order


def grad(output: Tensor, inputs, create_graph: bool = False, allow_unused: bool = True):
    """Gradients of scalar ``output`` with respect to each of ``inputs``.

    Unused inputs yield ``None`` when ``allow_unused`` is set, zeros otherwise.
    With ``create_graph`` the returned tensors are part of a new graph and
    can be differentiated again.
    """
    if output.data.size != 1:
        raise ContractError(f"grad needs a scalar output, got shape {output.shape}")
    inputs = list(inputs)
    if not output.requires_grad:
        found = {}
    else:
        found = {}
        with _grad_mode(create_graph):
            grads = {id(output): Tensor(np.ones_like(output.data))}
            for node in reversed(_topo(output)):
                g = grads.get(id(node))
                if g is None or node._backward is None:
                    continue
                for parent, pg in zip(node._parents, node._backward(g)):
                    if pg is None or not parent.requires_grad:
                        continue
                    prev = grads.get(id(parent))
                    grads[id(parent)] = pg if prev is None else prev + pg
            found = grads
    out = []
    for x in inputs:
        g = found.get(id(x))
        if g is None and not allow_unused:
            g = Tensor(np.zeros_like(x.data))
        out.append(g)
    return out


# primitive operations -------------------------------------------------------

def _f64(x: np.ndarray) -> np.ndarray:
    return x.astype(np.float64)


def add(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)

    def backward(g):
        return sum_to(g, a.shape), sum_to(g, b.shape)

    return _make(a.data + b.data, (a, b), backward, "add")


def neg(a) -> Tensor:
    return _make(-a.data, (a,), lambda g: (neg(g),), "neg")


def mul(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)

    def backward(g):
        ga = sum_to(mul(g, b), a.shape) if a.requires_grad else None
        gb = sum_to(mul(g, a), b.shape) if b.requires_grad else None
        return ga, gb

    return _make(a.data * b.data, (a, b), backward, "mul")


def div(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)

    def backward(g):
        ga = sum_to(div(g, b), a.shape) if a.requires_grad else None
        gb = sum_to(neg(div(mul(g, a), mul(b, b))), b.shape) if b.requires_grad else None
        return ga, gb

    return _make(a.data / b.data, (a, b), backward, "div")


def matmul(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul shape mismatch: {a.shape} @ {b.shape}")

    def backward(g):
        ga = matmul(g, transpose(b)) if a.requires_grad else None
        gb = matmul(transpose(a), g) if b.requires_grad else None
        return ga, gb

    return _make(_f64(a.data) @ _f64(b.data), (a, b), backward, "matmul")


def transpose(a) -> Tensor:
    return _make(a.data.T, (a,), lambda g: (transpose(g),), "transpose")


def reshape(a, shape) -> Tensor:
    src = a.shape
    return _make(a.data.reshape(shape), (a,), lambda g: (reshape(g, src),), "reshape")


def broadcast_to(a, shape) -> Tensor:
    src = a.shape
    return _make(np.broadcast_to(a.data, shape), (a,), lambda g: (sum_to(g, src),), "broadcast")


def sum_to(a: Tensor, shape) -> Tensor:
    """Sum ``a`` down to ``shape`` (the adjoint of broadcasting)."""
    shape = tuple(shape)
    if a.shape == shape:
        return a
    lead = a.ndim - len(shape)
    axes = tuple(range(lead)) + tuple(
        lead + i for i, s in enumerate(shape) if s == 1 and a.shape[lead + i] != 1
    )
    src = a.shape
    data = np.sum(_f64(a.data), axis=axes, keepdims=True)
    data = data.reshape(shape)
    return _make(data, (a,), lambda g: (broadcast_to(g, src),), "sum_to")


def _expand(g: Tensor, shape, axis, keepdims) -> Tensor:
    if axis is None:
        g = reshape(g, (1,) * len(shape))
    elif not keepdims:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        kept = list(g.shape)
        for ax in sorted(ax % len(shape) for ax in axes):
            kept.insert(ax, 1)
        g = reshape(g, tuple(kept))
    return broadcast_to(g, shape)


def tsum(a, axis=None, keepdims=False) -> Tensor:
    src = a.shape
    data = np.sum(_f64(a.data), axis=axis, keepdims=keepdims)
    return _make(data, (a,), lambda g: (_expand(g, src, axis, keepdims),), "sum")


def mean(a, axis=None, keepdims=False) -> Tensor:
    if axis is None:
        count = a.data.size
    else:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        count = int(np.prod([a.shape[ax] for ax in axes]))
    return mul(tsum(a, axis, keepdims), 1.0 / count)


def exp(a) -> Tensor:
    def backward(g):
        return (mul(g, out),)

    out = _make(np.exp(a.data), (a,), backward, "exp")
    return out


def log(a) -> Tensor:
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(a.data)
    return _make(out, (a,), lambda g: (div(g, a),), "log")


def tanh(a) -> Tensor:
    def backward(g):
        return (mul(g, 1.0 - mul(out, out)),)

    out = _make(np.tanh(a.data), (a,), backward, "tanh")
    return out


def relu(a) -> Tensor:
    mask = Tensor((a.data > 0).astype(DTYPE))
    return _make(a.data * mask.data, (a,), lambda g: (mul(g, mask),), "relu")


def sigmoid(a) -> Tensor:
    def backward(g):
        return (mul(g, mul(out, 1.0 - out)),)

    x = _f64(a.data)
    out = _make(np.exp(-np.logaddexp(0.0, -x)), (a,), backward, "sigmoid")
    return out


def softplus(a) -> Tensor:
    """``log(1 + exp(a))`` without overflow."""
    return _make(np.logaddexp(0.0, _f64(a.data)), (a,), lambda g: (mul(g, sigmoid(a)),), "softplus")


def logsumexp(a, axis=-1) -> Tensor:
    """Stabilised log-sum-exp along ``axis``, keeping the reduced dimension."""
    x = _f64(a.data)
    m = np.max(x, axis=axis, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    data = m + np.log(np.sum(np.exp(x - m), axis=axis, keepdims=True))

    def backward(g):
        return (mul(g, exp(a - out)),)

    out = _make(data, (a,), backward, "logsumexp")
    return out


def take(a, index) -> Tensor:
    """``a[i, index[i]]`` for a 2-D ``a``; the gather used for true-class scores."""
    index = np.asarray(index, dtype=np.int64)
    rows = np.arange(a.shape[0])
    ncols = a.shape[1]
    return _make(a.data[rows, index], (a,), lambda g: (scatter(g, index, ncols),), "take")


def scatter(g, index, ncols) -> Tensor:
    index = np.asarray(index, dtype=np.int64)
    rows = np.arange(g.shape[0])
    data = np.zeros((g.shape[0], ncols), dtype=DTYPE)
    data[rows, index] = g.data
    return _make(data, (g,), lambda h: (take(h, index),), "scatter")


def concat_rows(parts) -> Tensor:
    """Stack 2-D tensors along axis 0."""
    parts = [_lift(p) for p in parts]
    sizes = np.cumsum([0] + [p.shape[0] for p in parts])

    def backward(g):
        return tuple(_slice_rows(g, int(lo), int(hi)) for lo, hi in zip(sizes[:-1], sizes[1:]))

    return _make(np.concatenate([p.data for p in parts], axis=0), parts, backward, "concat")


def _slice_rows(a: Tensor, lo: int, hi: int) -> Tensor:
    total = a.shape[0]

    def backward(g):
        return (_pad_rows(g, lo, total),)

    return _make(a.data[lo:hi], (a,), backward, "slice")


def _pad_rows(g: Tensor, lo: int, total: int) -> Tensor:
    hi = lo + g.shape[0]
    data = np.zeros((total,) + g.shape[1:], dtype=DTYPE)
    data[lo:hi] = g.data
    return _make(data, (g,), lambda h: (_slice_rows(h, lo, hi),), "pad")
