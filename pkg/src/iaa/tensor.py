"""Dense tensors with reverse-mode automatic differentiation, backed by numpy.

Every operation records its parents and a backward closure while grad mode
is on. ``Tensor.backward`` walks the resulting DAG once in reverse
topological order. Leaves flagged ``trainable`` accumulate into ``.grad``;
frozen leaves never receive a gradient.

Broadcasting is deliberately narrow: operands must have equal shapes, or one
of them is a scalar, or one of them is a 1-D vector whose length equals the
other's last dimension.
"""

from __future__ import annotations

import contextlib
import threading
from typing import Iterator, Sequence

import numpy as np



class _ModeState(threading.local):
    """Grad mode and default dtype, private to each thread."""

    def __init__(self):
        self.grad = True
        self.dtype = np.float32

    def __getitem__(self, key):
        return getattr(self, key)

    def __setitem__(self, key, value):
        setattr(self, key, value)


_state = _ModeState()


class DimensionError(ValueError):
    """Operand shapes are incompatible."""


class FreezeError(RuntimeError):
    """A frozen tensor was asked to behave like a trainable one."""


@contextlib.contextmanager
def no_grad():
    prev = _state["grad"]
    _state["grad"] = False
    try:
        yield
    finally:
        _state["grad"] = prev


@contextlib.contextmanager
def precision(dtype):
    """Temporarily change the default float dtype for newly created tensors."""
    prev = _state["dtype"]
    _state["dtype"] = np.dtype(dtype).type
    try:
        yield
    finally:
        _state["dtype"] = prev


def default_dtype():
    return _state["dtype"]


def grad_enabled() -> bool:
    return _state["grad"]


class Tensor:
    __slots__ = ("data", "grad", "trainable", "needs_grad", "op", "parents", "_backward", "name")

    def __init__(self, data, trainable: bool = False, name: str | None = None, dtype=None):
        if dtype is None:
            if isinstance(data, np.ndarray) and data.dtype.kind == "f":
                dtype = data.dtype
            else:
                dtype = _state["dtype"]
        self.data = np.asarray(data, dtype=dtype)
        self.grad = None
        self.trainable = bool(trainable)
        self.needs_grad = self.trainable
        self.op = "leaf"
        self.parents: tuple[Tensor, ...] = ()
        self._backward = None
        self.name = name

    # -- introspection -------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def __repr__(self):
        tag = "trainable" if self.trainable else ("grad" if self.needs_grad else "const")
        label = f" {self.name!r}" if self.name else ""
        return f"Tensor{label}(shape={self.shape}, dtype={self.dtype}, {tag}, op={self.op})"

    def zero_grad(self):
        self.grad = None

    def detach(self) -> Tensor:
        return Tensor(self.data)

    # -- operator sugar ------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return slice_(self, idx)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes if axes else None)

    def sum(self):
        return sum_(self)

    def mean(self):
        return mean(self)

    def backward(self):
        backward(self)


def as_tensor(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype or _state["dtype"]))


def _make(data, op, parents, backward_fn) -> Tensor:
    out = Tensor(data)
    if _state["grad"]:
        out.op = op
        out.parents = tuple(parents)
        if any(p.needs_grad for p in parents):
            out.needs_grad = True
            out._backward = backward_fn
    return out


# -- broadcasting -------------------------------------------------------


def _check_broadcast(a: Tensor, b: Tensor, op: str):
    sa, sb = a.shape, b.shape
    if sa == sb or a.size == 1 or b.size == 1:
        return
    if b.ndim == 1 and a.ndim >= 1 and sb[0] == sa[-1]:
        return
    if a.ndim == 1 and b.ndim >= 1 and sa[0] == sb[-1]:
        return
    raise DimensionError(f"{op}: cannot combine shapes {sa} and {sb}")


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    if int(np.prod(shape)) == 1:
        return np.asarray(g.sum(), dtype=g.dtype).reshape(shape)
    return g.reshape(-1, shape[-1]).sum(axis=0).reshape(shape)


# -- elementwise ----------------------------------------------------------


def add(a, b) -> Tensor:
    a = as_tensor(a, b if isinstance(b, Tensor) else None)
    b = as_tensor(b, a)
    _check_broadcast(a, b, "add")

    def bw(g):
        return (
            _unbroadcast(g, a.shape) if a.needs_grad else None,
            _unbroadcast(g, b.shape) if b.needs_grad else None,
        )

    return _make(a.data + b.data, "add", (a, b), bw)


def sub(a, b) -> Tensor:
    a = as_tensor(a, b if isinstance(b, Tensor) else None)
    b = as_tensor(b, a)
    _check_broadcast(a, b, "sub")

    def bw(g):
        return (
            _unbroadcast(g, a.shape) if a.needs_grad else None,
            _unbroadcast(-g, b.shape) if b.needs_grad else None,
        )

    return _make(a.data - b.data, "sub", (a, b), bw)


def mul(a, b) -> Tensor:
    a = as_tensor(a, b if isinstance(b, Tensor) else None)
    b = as_tensor(b, a)
    _check_broadcast(a, b, "mul")

    def bw(g):
        return (
            _unbroadcast(g * b.data, a.shape) if a.needs_grad else None,
            _unbroadcast(g * a.data, b.shape) if b.needs_grad else None,
        )

    return _make(a.data * b.data, "mul", (a, b), bw)


def _sigmoid(x: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def silu(x: Tensor) -> Tensor:
    s = _sigmoid(x.data)

    def bw(g):
        return (g * (s * (1.0 + x.data * (1.0 - s))),)

    return _make(x.data * s, "silu", (x,), bw)


def sum_(x: Tensor) -> Tensor:
    def bw(g):
        return (np.broadcast_to(g, x.shape).astype(x.dtype),)

    return _make(np.asarray(x.data.sum(), dtype=x.dtype), "sum", (x,), bw)


def mean(x: Tensor) -> Tensor:
    n = x.size

    def bw(g):
        return (np.broadcast_to(g / n, x.shape).astype(x.dtype),)

    return _make(np.asarray(x.data.mean(), dtype=x.dtype), "mean", (x,), bw)


# -- shape ops ----------------------------------------------------------


def reshape(x: Tensor, shape) -> Tensor:
    shape = tuple(shape)

    def bw(g):
        return (g.reshape(x.shape),)

    return _make(x.data.reshape(shape), "reshape", (x,), bw)


def transpose(x: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(x.ndim)))
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))

    def bw(g):
        return (g.transpose(inv),)

    return _make(x.data.transpose(axes), "transpose", (x,), bw)


def swapaxes(x: Tensor, a: int, b: int) -> Tensor:
    axes = list(range(x.ndim))
    axes[a], axes[b] = axes[b], axes[a]
    return transpose(x, axes)


def slice_(x: Tensor, idx) -> Tensor:
    out = x.data[idx]
    if not isinstance(out, np.ndarray):
        out = np.asarray(out, dtype=x.dtype)

    def bw(g):
        full = np.zeros_like(x.data)
        full[idx] += g
        return (full,)

    return _make(out, "slice", (x,), bw)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    if not tensors:
        raise DimensionError("concat: no tensors given")
    ref = tensors[0].shape
    ax = axis % len(ref)
    for t in tensors[1:]:
        if t.ndim != len(ref) or any(t.shape[i] != ref[i] for i in range(len(ref)) if i != ax):
            raise DimensionError(f"concat: shapes {ref} and {t.shape} disagree off axis {axis}")
    sizes = [t.shape[ax] for t in tensors]
    bounds = np.cumsum([0] + sizes)

    def bw(g):
        grads = []
        for t, lo, hi in zip(tensors, bounds[:-1], bounds[1:]):
            if t.needs_grad:
                sl = [slice(None)] * g.ndim
                sl[ax] = slice(lo, hi)
                grads.append(g[tuple(sl)])
            else:
                grads.append(None)
        return tuple(grads)

    return _make(np.concatenate([t.data for t in tensors], axis=ax), "concat", tensors, bw)


# -- linear algebra --------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul: inner dimensions disagree for {a.shape} @ {b.shape}")
    if b.ndim == 2:
        k, n = b.shape
        a2 = a.data.reshape(-1, k)

        def bw(g):
            g2 = g.reshape(-1, n)
            ga = (g2 @ b.data.T).reshape(a.shape) if a.needs_grad else None
            gb = a2.T @ g2 if b.needs_grad else None
            return ga, gb

        return _make((a2 @ b.data).reshape(*a.shape[:-1], n), "matmul", (a, b), bw)

    elif a.ndim == b.ndim and a.shape[:-2] == b.shape[:-2]:

        def bw(g):
            ga = g @ np.swapaxes(b.data, -1, -2) if a.needs_grad else None
            gb = np.swapaxes(a.data, -1, -2) @ g if b.needs_grad else None
            return ga, gb

    else:
        raise DimensionError(f"matmul: batch dimensions disagree for {a.shape} @ {b.shape}")
    return _make(a.data @ b.data, "matmul", (a, b), bw)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return _make(y, "softmax", (x,), bw)


def causal_softmax(scores: Tensor, offset: int = 0) -> Tensor:
    """Softmax over the last axis with key j masked out when j > i + offset."""
    tq, tk = scores.shape[-2:]
    mask = np.arange(tk)[None, :] > (np.arange(tq)[:, None] + offset)
    z = np.where(mask, -np.inf, scores.data)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=-1, keepdims=True)

    def bw(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return _make(y, "causal_softmax", (scores,), bw)


def rms_norm(x: Tensor, weight: Tensor, eps: float = 1e-6) -> Tensor:
    if x.ndim == 0 or x.shape[-1] == 0:
        raise DimensionError("rms_norm: last dimension is empty")
    if weight.shape != (x.shape[-1],):
        raise DimensionError(f"rms_norm: weight {weight.shape} does not match last dim of {x.shape}")
    r = 1.0 / np.sqrt((x.data * x.data).mean(axis=-1, keepdims=True) + eps)
    xhat = x.data * r
    d = x.shape[-1]

    def bw(g):
        gx = gw = None
        if weight.needs_grad:
            gw = (g * xhat).reshape(-1, d).sum(axis=0)
        if x.needs_grad:
            gh = g * weight.data
            gx = r * (gh - xhat * (gh * xhat).mean(axis=-1, keepdims=True))
        return gx, gw

    return _make(xhat * weight.data, "rms_norm", (x, weight), bw)


def embedding(table: Tensor, ids) -> Tensor:
    ids = np.asarray(ids, dtype=np.int64)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise DimensionError(f"embedding: ids outside [0, {table.shape[0]})")
    d = table.shape[1]

    def bw(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, ids.ravel(), g.reshape(-1, d))
        return (gt,)

    return _make(table.data[ids], "embedding", (table,), bw)


def rope(x: Tensor, cos: np.ndarray, sin: np.ndarray) -> Tensor:
    """Rotary position embedding over the last axis (half-split pairing).

    ``cos`` and ``sin`` have shape [T, dh/2] and align with axis -2 of ``x``.
    """
    half = x.shape[-1] // 2
    x1, x2 = x.data[..., :half], x.data[..., half:]
    out = np.concatenate([x1 * cos - x2 * sin, x2 * cos + x1 * sin], axis=-1)

    def bw(g):
        g1, g2 = g[..., :half], g[..., half:]
        return (np.concatenate([g1 * cos + g2 * sin, g2 * cos - g1 * sin], axis=-1),)

    return _make(out, "rope", (x,), bw)


def cross_entropy(logits: Tensor, targets, mask=None) -> Tensor:
    """Mean negative log-likelihood over positions where ``mask`` is true."""
    targets = np.asarray(targets, dtype=np.int64)
    v = logits.shape[-1]
    if targets.shape != logits.shape[:-1]:
        raise DimensionError(f"cross_entropy: targets {targets.shape} vs logits {logits.shape}")
    mask = np.ones(targets.shape, bool) if mask is None else np.asarray(mask, bool)
    if mask.shape != targets.shape:
        raise DimensionError(f"cross_entropy: mask {mask.shape} vs targets {targets.shape}")
    n = int(mask.sum())
    if n == 0:
        raise ValueError("cross_entropy: every position is masked out")
    if targets[mask].min() < 0 or targets[mask].max() >= v:
        raise DimensionError(f"cross_entropy: target ids outside [0, {v})")
    safe = np.where(mask, targets, 0)
    z = logits.data - logits.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1))
    picked = np.take_along_axis(z, safe[..., None], axis=-1)[..., 0]
    nll = lse - picked
    loss = np.asarray((nll * mask).sum() / n, dtype=logits.dtype)

    def bw(g):
        p = np.exp(z - lse[..., None])
        np.put_along_axis(p, safe[..., None], np.take_along_axis(p, safe[..., None], -1) - 1.0, -1)
        p *= (mask * (g / n))[..., None]
        return (p.astype(logits.dtype, copy=False),)

    return _make(loss, "cross_entropy", (logits,), bw)


# -- graph traversal ----------------------------------------------------


def iter_graph(root: Tensor) -> Iterator[Tensor]:
    """Yield every tensor reachable from ``root`` through recorded parents."""
    seen = set()
    stack = [root]
    while stack:
        t = stack.pop()
        if id(t) in seen:
            continue
        seen.add(id(t))
        yield t
        stack.extend(t.parents)


def _topo_order(root: Tensor) -> list[Tensor]:
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen or not node.needs_grad:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            if p.needs_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor):
    if loss.ndim != 0:
        raise DimensionError(f"backward: loss must be a scalar, got shape {loss.shape}")
    if not loss.needs_grad:
        return
    grads = {id(loss): np.ones_like(loss.data)}
    for node in reversed(_topo_order(loss)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            if node.trainable:
                node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node.parents, node._backward(g)):
            if pg is None or not parent.needs_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg
