"""Minimal reverse-mode automatic differentiation over dense float64 tensors.

Just enough machinery to train small MLPs: a handful of primitives recorded
on an explicit tape, and a single-pass backward that accumulates exact
vector-Jacobian products. No second-order support; the one-step lookahead
used by the reweighting trainer treats the updated parameter copy as fresh
leaves, so first-order backward is all that is ever needed.
"""

from __future__ import annotations

import math
import threading

import numpy as np


class ShapeError(ValueError):
    """Raised when operand shapes do not conform to a primitive's signature."""


class Tensor:
    """Dense n-d float64 array, optionally participating in gradient taping."""

    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, requires_grad=False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad = None

    @property
    def shape(self):
        return self.data.shape

    def item(self):
        return float(self.data)

    def detach(self):
        return Tensor(self.data.copy())

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    # Convenience arithmetic; constants are wrapped on the fly.
    def __add__(self, other):
        return add(self, _as_tensor(other))

    def __radd__(self, other):
        return add(_as_tensor(other), self)

    def __mul__(self, other):
        return mul(self, _as_tensor(other))

    def __rmul__(self, other):
        return mul(_as_tensor(other), self)

    def __sub__(self, other):
        return add(self, mul(_as_tensor(other), _as_tensor(-1.0)))

    def __rsub__(self, other):
        return add(_as_tensor(other), mul(self, _as_tensor(-1.0)))

    def __neg__(self):
        return mul(self, _as_tensor(-1.0))

    def __matmul__(self, other):
        return matmul(self, _as_tensor(other))


def _as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


class _Node:
    """One recorded primitive: the output plus (input, vjp) pairs."""

    __slots__ = ("out", "parents")

    def __init__(self, out, parents):
        self.out = out
        self.parents = parents


_active = threading.local()


def _current_tape():
    return getattr(_active, "tape", None)


class Tape:
    """Ordered record of primitive applications for one backward pass.

    Use as a context manager; operations executed inside record themselves
    whenever an input requires grad. Tapes are single-threaded; independent
    tapes on different threads never share state.
    """

    def __init__(self):
        self.nodes = []

    def __enter__(self):
        self._prev = _current_tape()
        _active.tape = self
        return self

    def __exit__(self, *exc):
        _active.tape = self._prev
        return False


def _record(out, parents):
    tape = _current_tape()
    if tape is not None and any(p.requires_grad for p, _ in parents):
        out.requires_grad = True
        tape.nodes.append(_Node(out, parents))
    return out


def _unbroadcast(grad, shape):
    """Sum `grad` down to `shape` (inverse of numpy broadcasting)."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, dim in enumerate(shape):
        if dim == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# ---------------------------------------------------------------------------
# Primitives


def matmul(a, b):
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: shapes {a.shape} and {b.shape} do not conform")
    out = Tensor(a.data @ b.data)
    return _record(out, [(a, lambda g: g @ b.data.T), (b, lambda g: a.data.T @ g)])


def add(a, b):
    try:
        out = Tensor(a.data + b.data)
    except ValueError:
        raise ShapeError(f"add: shapes {a.shape} and {b.shape} do not broadcast")
    return _record(out, [
        (a, lambda g: _unbroadcast(g, a.data.shape)),
        (b, lambda g: _unbroadcast(g, b.data.shape)),
    ])


def mul(a, b):
    try:
        out = Tensor(a.data * b.data)
    except ValueError:
        raise ShapeError(f"mul: shapes {a.shape} and {b.shape} do not broadcast")
    return _record(out, [
        (a, lambda g: _unbroadcast(g * b.data, a.data.shape)),
        (b, lambda g: _unbroadcast(g * a.data, b.data.shape)),
    ])


def relu(a):
    out = Tensor(np.maximum(a.data, 0.0))
    return _record(out, [(a, lambda g: g * (a.data > 0.0))])


def tanh(a):
    out = Tensor(np.tanh(a.data))
    return _record(out, [(a, lambda g: g * (1.0 - out.data ** 2))])


def sigmoid(a):
    out = Tensor(_sigmoid(a.data))
    return _record(out, [(a, lambda g: g * out.data * (1.0 - out.data))])


def _sigmoid(x):
    pos = x >= 0
    z = np.empty_like(x)
    z[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    e = np.exp(x[~pos])
    z[~pos] = e / (1.0 + e)
    return z


def softplus(a):
    # log(1 + e^x) computed as max(x, 0) + log1p(e^{-|x|}) for stability
    out = Tensor(np.maximum(a.data, 0.0) + np.log1p(np.exp(-np.abs(a.data))))
    return _record(out, [(a, lambda g: g * _sigmoid(a.data))])


def softmax_rows(a):
    if a.data.ndim != 2:
        raise ShapeError(f"softmax_rows: expected a 2-d tensor, got shape {a.shape}")
    shifted = a.data - a.data.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    out = Tensor(e / e.sum(axis=1, keepdims=True))

    def vjp(g):
        s = out.data
        return s * (g - (g * s).sum(axis=1, keepdims=True))

    return _record(out, [(a, vjp)])


def log(a):
    out = Tensor(np.log(a.data))
    return _record(out, [(a, lambda g: g / a.data)])


def reciprocal(a):
    out = Tensor(1.0 / a.data)
    return _record(out, [(a, lambda g: -g * out.data ** 2)])


def tsum(a):
    out = Tensor(a.data.sum())
    return _record(out, [(a, lambda g: np.broadcast_to(g, a.data.shape).copy())])


def tmean(a):
    n = a.data.size
    out = Tensor(a.data.mean())
    return _record(out, [(a, lambda g: np.broadcast_to(g / n, a.data.shape).copy())])


def index_select(a, indices):
    """Select rows of `a` (axis 0) by an integer index array."""
    idx = np.asarray(indices, dtype=np.intp)
    if idx.ndim != 1 or a.data.ndim < 1:
        raise ShapeError(f"index_select: need 1-d indices and a row-indexed tensor, got {idx.shape} / {a.shape}")
    if idx.size and (idx.min() < 0 or idx.max() >= a.data.shape[0]):
        raise ShapeError(f"index_select: index out of range for {a.data.shape[0]} rows")
    out = Tensor(a.data[idx])

    def vjp(g):
        full = np.zeros_like(a.data)
        np.add.at(full, idx, g)
        return full

    return _record(out, [(a, vjp)])


def reshape(a, shape):
    shape = tuple(shape)
    if int(np.prod(shape)) != a.data.size:
        raise ShapeError(f"reshape: cannot view shape {a.shape} as {shape}")
    out = Tensor(a.data.reshape(shape))
    return _record(out, [(a, lambda g: g.reshape(a.data.shape))])


_PRIMITIVES = {
    "matmul": matmul,
    "add": add,
    "mul": mul,
    "relu": relu,
    "tanh": tanh,
    "sigmoid": sigmoid,
    "softplus": softplus,
    "softmax_rows": softmax_rows,
    "log": log,
    "sum": tsum,
    "mean": tmean,
    "index_select": index_select,
    "reciprocal": reciprocal,
}


def forward_primitive(op, *inputs):
    """Apply a named primitive, recording it on the active tape."""
    if op not in _PRIMITIVES:
        raise ValueError(f"unknown primitive {op!r}")
    return _PRIMITIVES[op](*inputs)


def cross_entropy(logits, labels, reduction="mean"):
    """Softmax cross-entropy of `logits` [batch x classes] against class indices.

    reduction: "mean" (default), "sum", or "none" for the per-row loss vector.
    """
    if logits.data.ndim != 2:
        raise ShapeError(f"cross_entropy: logits must be 2-d, got shape {logits.shape}")
    y = np.asarray(labels, dtype=np.intp)
    n, c = logits.data.shape
    if y.shape != (n,):
        raise ShapeError(f"cross_entropy: labels shape {y.shape} does not match batch {n}")
    if y.size and (y.min() < 0 or y.max() >= c):
        raise ValueError(f"cross_entropy: label out of range [0, {c})")
    z = logits.data
    zmax = z.max(axis=1, keepdims=True)
    lse = zmax[:, 0] + np.log(np.exp(z - zmax).sum(axis=1))
    per_row = lse - z[np.arange(n), y]
    probs = np.exp(z - lse[:, None])
    onehot = np.zeros((n, c))
    onehot[np.arange(n), y] = 1.0

    if reduction == "none":
        out = Tensor(per_row)
        vjp = lambda g: (probs - onehot) * g[:, None]
    elif reduction == "sum":
        out = Tensor(per_row.sum())
        vjp = lambda g: (probs - onehot) * g
    elif reduction == "mean":
        out = Tensor(per_row.mean())
        vjp = lambda g: (probs - onehot) * (g / n)
    else:
        raise ValueError(f"cross_entropy: unknown reduction {reduction!r}")
    return _record(out, [(logits, vjp)])


def backward(root):
    """Populate .grad on every requires_grad leaf reachable from a scalar root.

    Gradients are overwritten, not accumulated across calls, so running
    backward twice over the same tape is idempotent.
    """
    tape = _current_tape()
    if tape is None:
        raise RuntimeError("backward: no active tape")
    if root.data.ndim != 0 and root.data.size != 1:
        raise ShapeError(f"backward: root must be scalar, got shape {root.shape}")

    recorded = {id(node.out) for node in tape.nodes}
    if id(root) not in recorded:
        raise RuntimeError("backward: root is not on the active tape")

    adjoint = {id(root): np.ones_like(root.data)}
    leaves = {}
    for node in reversed(tape.nodes):
        g = adjoint.pop(id(node.out), None)
        if g is None:
            continue
        for parent, vjp in node.parents:
            contrib = vjp(g)
            key = id(parent)
            if key in adjoint:
                adjoint[key] = adjoint[key] + contrib
            else:
                adjoint[key] = contrib
            if parent.requires_grad and key not in recorded:
                leaves[key] = parent

    for key, leaf in leaves.items():
        leaf.grad = adjoint[key]
