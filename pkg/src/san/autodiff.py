"""Minimal define-by-run reverse-mode autodiff over dense numpy arrays.

Every op returns a new :class:`Tensor` holding references to its inputs and a
closure that maps the upstream gradient to input gradients. When a
:class:`Tape` is active (``with tape:``), ops are also appended to it in
execution order, which is already a topological order for backprop.
"""

from __future__ import annotations

import threading
from typing import Callable, Optional, Sequence

import numpy as np

LOG_EPS = 1e-12
DEFAULT_DTYPE = np.float64

_local = threading.local()


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "op", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.array(data, dtype=dtype or _dtype_of(data), copy=True)
        arr.setflags(write=False)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self._parents: tuple = ()
        self._backward: Optional[Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]] = None
        self.op = "leaf"

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _raise_not_scalar(self)

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"

    # Operator sugar for the handful of elementwise ops used by the losses.
    def __add__(self, other):
        return add(self, _as_tensor(other, self))

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, scale(_as_tensor(other, self), -1.0))

    def __rsub__(self, other):
        return add(_as_tensor(other, self), scale(self, -1.0))

    def __neg__(self):
        return scale(self, -1.0)

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, float(other))

    __rmul__ = __mul__

    def __matmul__(self, other):
        return matmul(self, other)


def _dtype_of(data):
    if isinstance(data, Tensor):
        return data.data.dtype
    if isinstance(data, np.ndarray) and np.issubdtype(data.dtype, np.floating):
        return data.dtype
    return DEFAULT_DTYPE


def _raise_not_scalar(t: Tensor):
    raise ShapeError(f"item() needs a single-element tensor, got shape {t.shape}")


def _as_tensor(value, like: Tensor) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(np.full(like.shape, value, dtype=like.data.dtype))


class Tape:
    """Ordered record of the ops executed while the tape is active.

    A tape belongs to one thread for the duration of one forward/backward
    pass; ``backward`` consumes and resets it.
    """

    def __init__(self):
        self.nodes: list[Tensor] = []

    def __enter__(self) -> "Tape":
        stack = _tape_stack()
        stack.append(self)
        return self

    def __exit__(self, *exc) -> None:
        stack = _tape_stack()
        if stack and stack[-1] is self:
            stack.pop()

    def __len__(self) -> int:
        return len(self.nodes)

    def reset(self) -> None:
        self.nodes = []


def _tape_stack() -> list:
    stack = getattr(_local, "stack", None)
    if stack is None:
        stack = _local.stack = []
    return stack


def _make(data: np.ndarray, parents: Sequence[Tensor], backward, op: str) -> Tensor:
    out = Tensor.__new__(Tensor)
    data = np.asarray(data)
    data.setflags(write=False)
    out.data = data
    out.grad = None
    out.op = op
    out.requires_grad = any(p.requires_grad for p in parents)
    if out.requires_grad:
        out._parents = tuple(parents)
        out._backward = backward
        stack = _tape_stack()
        if stack:
            stack[-1].nodes.append(out)
    else:
        out._parents = ()
        out._backward = None
    return out


def _check_2d(name: str, t: Tensor) -> None:
    if t.ndim != 2:
        raise ShapeError(f"{name} expects a 2-d tensor, got shape {t.shape}")


# ---------------------------------------------------------------------------
# ops


def matmul(a: Tensor, b: Tensor) -> Tensor:
    _check_2d("matmul", a)
    _check_2d("matmul", b)
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul inner dimensions differ: {a.shape} x {b.shape}")
    A, B = a.data, b.data

    def backward(g):
        return g @ B.T, A.T @ g

    return _make(A @ B, (a, b), backward, "matmul")


def affine(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    _check_2d("affine", x)
    _check_2d("affine", w)
    if x.shape[1] != w.shape[0] or b.shape != (w.shape[1],):
        raise ShapeError(f"affine shapes disagree: x {x.shape}, w {w.shape}, b {b.shape}")
    X, W = x.data, w.data

    def backward(g):
        return g @ W.T, X.T @ g, g.sum(axis=0)

    return _make(X @ W + b.data, (x, w, b), backward, "affine")


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0

    def backward(g):
        return (g * mask,)

    return _make(np.where(mask, x.data, 0.0).astype(x.data.dtype), (x,), backward, "relu")


def softmax_rows(x: Tensor) -> Tensor:
    _check_2d("softmax_rows", x)
    if x.shape[1] < 1:
        raise ShapeError("softmax_rows needs at least one column")
    z = x.data - x.data.max(axis=1, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=1, keepdims=True)

    def backward(g):
        return (p * (g - (g * p).sum(axis=1, keepdims=True)),)

    return _make(p, (x,), backward, "softmax_rows")


def _check_labels(labels, m: int, k: int) -> np.ndarray:
    lab = np.asarray(labels)
    if lab.shape != (m,):
        raise ShapeError(f"expected {m} labels, got shape {lab.shape}")
    if lab.size and (not np.issubdtype(lab.dtype, np.integer)):
        if not np.all(lab == np.round(lab)):
            raise ValueError("labels must be integer class indices")
        lab = lab.astype(np.int64)
    if lab.size and (lab.min() < 0 or lab.max() >= k):
        raise ValueError(f"label out of range [0, {k}): min {lab.min()}, max {lab.max()}")
    return lab.astype(np.int64)


def nll_rows(probs: Tensor, labels) -> Tensor:
    """Per-row ``-log probs[i, labels[i]]`` with the log clamped at ``LOG_EPS``."""
    _check_2d("nll_rows", probs)
    m, k = probs.shape
    lab = _check_labels(labels, m, k)
    at = np.arange(m)
    picked = probs.data[at, lab]
    clamped = np.maximum(picked, LOG_EPS)
    live = picked > LOG_EPS

    def backward(g):
        gp = np.zeros_like(probs.data)
        gp[at, lab] = np.where(live, -g / clamped, 0.0)
        return (gp,)

    return _make(-np.log(clamped), (probs,), backward, "nll_rows")


def cross_entropy(probs: Tensor, labels) -> Tensor:
    """Mean over rows of ``-log probs[i, label_i]``."""
    if probs.shape[0] == 0:
        raise ShapeError("cross_entropy of an empty batch")
    return mean(nll_rows(probs, labels))


def log(x: Tensor) -> Tensor:
    """Elementwise natural log, clamped at ``LOG_EPS`` (zero gradient where clamped)."""
    clamped = np.maximum(x.data, LOG_EPS)
    live = x.data > LOG_EPS

    def backward(g):
        return (np.where(live, g / clamped, 0.0),)

    return _make(np.log(clamped), (x,), backward, "log")


def grad_reverse(x: Tensor, lam: float) -> Tensor:
    """Identity forward; backward multiplies the upstream gradient by ``-lam``."""
    lam = float(lam)
    if not lam >= 0.0:
        raise ValueError(f"gradient reversal coefficient must be >= 0, got {lam}")

    def backward(g):
        return (-lam * g,)

    return _make(x.data, (x,), backward, "grad_reverse")


def add(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"add shapes differ: {a.shape} vs {b.shape}")

    def backward(g):
        return g, g

    return _make(a.data + b.data, (a, b), backward, "add")


def mul(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"mul shapes differ: {a.shape} vs {b.shape}")
    A, B = a.data, b.data

    def backward(g):
        return g * B, g * A

    return _make(A * B, (a, b), backward, "mul")


def scale(x: Tensor, c: float) -> Tensor:
    c = float(c)

    def backward(g):
        return (c * g,)

    return _make(x.data * c, (x,), backward, "scale")


def weight(x: Tensor, w) -> Tensor:
    """Multiply by a constant array ``w`` of the same shape (no gradient to ``w``)."""
    W = np.asarray(w, dtype=x.data.dtype)
    if W.shape != x.shape:
        raise ShapeError(f"weight shape {W.shape} does not match tensor {x.shape}")

    def backward(g):
        return (g * W,)

    return _make(x.data * W, (x,), backward, "weight")


def sum(x: Tensor, axis: Optional[int] = None) -> Tensor:  # noqa: A001 - mirrors numpy
    shape = x.shape

    def backward(g):
        if axis is None:
            return (np.broadcast_to(g, shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis), shape).copy(),)

    return _make(np.asarray(x.data.sum(axis=axis)), (x,), backward, "sum")


def mean(x: Tensor) -> Tensor:
    n = x.data.size
    if n == 0:
        raise ShapeError("mean of an empty tensor")
    return scale(sum(x), 1.0 / n)


def column(x: Tensor, k: int) -> Tensor:
    _check_2d("column", x)
    shape = x.shape

    def backward(g):
        gx = np.zeros(shape, dtype=g.dtype)
        gx[:, k] = g
        return (gx,)

    return _make(x.data[:, k].copy(), (x,), backward, "column")


def rows(x: Tensor, index) -> Tensor:
    """Select rows by integer index (gradient scatters back)."""
    idx = np.asarray(index, dtype=np.int64)
    shape = x.shape

    def backward(g):
        gx = np.zeros(shape, dtype=g.dtype)
        np.add.at(gx, idx, g)
        return (gx,)

    return _make(x.data[idx], (x,), backward, "rows")


def stack(items: Sequence[Tensor]) -> Tensor:
    """Stack scalar tensors into a 1-d tensor."""
    items = list(items)
    for t in items:
        if t.data.size != 1:
            raise ShapeError(f"stack expects scalars, got shape {t.shape}")

    def backward(g):
        return tuple(np.asarray(g[i]).reshape(t.shape) for i, t in enumerate(items))

    data = np.array([t.data.reshape(()) for t in items], dtype=items[0].data.dtype if items else DEFAULT_DTYPE)
    return _make(data, items, backward, "stack")


# ---------------------------------------------------------------------------
# backprop


def _topological(loss: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack = [(loss, False)]
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
            if id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor, tape: Optional[Tape] = None) -> dict:
    """Backpropagate from a scalar ``loss``.

    Returns ``{tensor: gradient}`` for every ``requires_grad`` leaf reachable
    from ``loss`` and also stores it on ``tensor.grad`` (overwriting any
    previous value). The tape, if given, is consumed and reset.
    """
    if loss.data.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    try:
        if not loss.requires_grad:
            return {}
        if loss._backward is None:
            loss.grad = np.ones_like(loss.data)
            return {loss: loss.grad}
        if tape is not None:
            end = next((i for i in range(len(tape.nodes) - 1, -1, -1) if tape.nodes[i] is loss), None)
            if end is None:
                raise ValueError("loss was not recorded on the given tape")
            nodes = tape.nodes[: end + 1]
        else:
            nodes = _topological(loss)

        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        leaves: dict[int, Tensor] = {}
        for node in reversed(nodes):
            if node._backward is None:
                continue
            g = grads.pop(id(node), None)
            if g is None:
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                grads[key] = grads[key] + pg if key in grads else pg
                if parent._backward is None:
                    leaves[key] = parent
    finally:
        if tape is not None:
            tape.reset()

    result = {}
    for key, leaf in leaves.items():
        g = np.asarray(grads[key], dtype=leaf.data.dtype).reshape(leaf.shape)
        leaf.grad = g
        result[leaf] = g
    return result
