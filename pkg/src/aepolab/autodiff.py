"""Minimal reverse-mode automatic differentiation over numpy arrays.

Each :class:`Tensor` remembers the tensors it was computed from and a closure
that maps its output gradient to gradients of those parents.  Calling
:func:`backward` on a scalar walks the graph in reverse topological order.

Only the operations the policy and the training objectives need are
provided; heavy fused operations (attention, layer norm, log-softmax) route
their numerics through :mod:`aepolab.kernels`.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Sequence

import numpy as np

from aepolab import kernels

_GRAD_ENABLED = True


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


class Tensor:
    __slots__ = ("value", "grad", "parents", "backward_fn", "requires_grad")
    __array_priority__ = 100

    def __init__(self, value, parents: Sequence["Tensor"] = (), backward_fn: Callable | None = None,
                 requires_grad: bool = False):
        self.value = np.asarray(value, dtype=np.float64)
        self.grad: np.ndarray | None = None
        track = _GRAD_ENABLED and (requires_grad or any(p.requires_grad for p in parents))
        self.requires_grad = track
        self.parents = tuple(parents) if track else ()
        self.backward_fn = backward_fn if track else None

    @property
    def shape(self):
        return self.value.shape

    @property
    def ndim(self):
        return self.value.ndim

    def item(self) -> float:
        return float(self.value)

    def __repr__(self):
        return f"Tensor(shape={self.value.shape}, requires_grad={self.requires_grad})"

    # arithmetic
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(as_tensor(other)))

    def __rsub__(self, other):
        return add(as_tensor(other), neg(self))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            return mul(self, reciprocal(other))
        return mul(self, 1.0 / np.asarray(other, dtype=np.float64))

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def sum(self, axis=None):
        return tsum(self, axis)

    def reshape(self, *shape):
        return reshape(self, shape[0] if len(shape) == 1 and isinstance(shape[0], tuple) else shape)

    def transpose(self, *axes):
        return transpose(self, axes)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def leaf(value) -> Tensor:
    """A tensor whose gradient is wanted."""
    return Tensor(np.array(value, dtype=np.float64), requires_grad=True)


def _unbroadcast(grad: np.ndarray, shape) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and grad.shape[i] != 1:
            grad = grad.sum(axis=i, keepdims=True)
    return grad


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return Tensor(a.value + b.value, (a, b),
                  lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def neg(a: Tensor) -> Tensor:
    return Tensor(-a.value, (a,), lambda g: (-g,))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    av, bv = a.value, b.value
    return Tensor(av * bv, (a, b),
                  lambda g: (_unbroadcast(g * bv, av.shape), _unbroadcast(g * av, bv.shape)))


def reciprocal(a: Tensor) -> Tensor:
    out = 1.0 / a.value
    return Tensor(out, (a,), lambda g: (-g * out * out,))


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    av, bv = a.value, b.value
    if bv.ndim == 2 and av.ndim > 2:
        a2 = av.reshape(-1, av.shape[-1])
        out = (a2 @ bv).reshape(av.shape[:-1] + (bv.shape[-1],))

        def back(g):
            g2 = g.reshape(-1, g.shape[-1])
            return (g2 @ bv.T).reshape(av.shape), a2.T @ g2

        return Tensor(out, (a, b), back)

    def back(g):
        if bv.ndim == 2:
            return _unbroadcast(g @ bv.T, av.shape), np.outer(av, g) if av.ndim == 1 else av.T @ g
        ga = g @ np.swapaxes(bv, -1, -2)
        gb = np.swapaxes(av, -1, -2) @ g
        return _unbroadcast(ga, av.shape), _unbroadcast(gb, bv.shape)

    return Tensor(av @ bv, (a, b), back)


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.value)
    return Tensor(out, (a,), lambda g: (g * out,))


def log(a: Tensor) -> Tensor:
    av = a.value
    return Tensor(np.log(av), (a,), lambda g: (g / av,))


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.value)
    return Tensor(out, (a,), lambda g: (g * (1.0 - out * out),))


def sigmoid(a: Tensor) -> Tensor:
    out = 1.0 / (1.0 + np.exp(-a.value))
    return Tensor(out, (a,), lambda g: (g * out * (1.0 - out),))


def tabs(a: Tensor) -> Tensor:
    av = a.value
    return Tensor(np.abs(av), (a,), lambda g: (g * np.sign(av),))


def minimum(a, b) -> Tensor:
    """Elementwise minimum; ties send the gradient to ``a``."""
    a, b = as_tensor(a), as_tensor(b)
    pick_a = a.value <= b.value
    return Tensor(np.minimum(a.value, b.value), (a, b),
                  lambda g: (_unbroadcast(np.where(pick_a, g, 0.0), a.shape),
                             _unbroadcast(np.where(pick_a, 0.0, g), b.shape)))


def clip(a: Tensor, lo: float, hi: float) -> Tensor:
    av = a.value
    inside = (av >= lo) & (av <= hi)
    return Tensor(np.clip(av, lo, hi), (a,), lambda g: (np.where(inside, g, 0.0),))


def tsum(a: Tensor, axis=None) -> Tensor:
    shape = a.shape
    if axis is None:
        return Tensor(a.value.sum(), (a,), lambda g: (np.broadcast_to(g, shape).copy(),))
    axes = (axis,) if isinstance(axis, int) else tuple(axis)
    axes = tuple(ax % len(shape) for ax in axes)

    def back(g):
        return (np.broadcast_to(np.expand_dims(g, axes), shape).copy(),)

    return Tensor(a.value.sum(axis=axes), (a,), back)


def reshape(a: Tensor, shape) -> Tensor:
    old = a.shape
    return Tensor(a.value.reshape(shape), (a,), lambda g: (g.reshape(old),))


def transpose(a: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return Tensor(a.value.transpose(axes), (a,), lambda g: (g.transpose(inv),))


def getitem(a: Tensor, idx) -> Tensor:
    shape = a.shape
    parts = idx if isinstance(idx, tuple) else (idx,)
    basic = all(isinstance(p, (slice, int, type(Ellipsis))) for p in parts)

    def back(g):
        out = np.zeros(shape)
        if basic:
            out[idx] += g
        else:
            np.add.at(out, idx, g)
        return (out,)

    return Tensor(a.value[idx], (a,), back)


def embedding(table: Tensor, ids: np.ndarray) -> Tensor:
    """Row lookup ``table[ids]`` with scatter-add backward."""
    ids = np.asarray(ids, dtype=np.intp)
    shape = table.shape

    def back(g):
        out = np.zeros(shape)
        np.add.at(out, ids.reshape(-1), g.reshape(-1, shape[-1]))
        return (out,)

    return Tensor(table.value[ids], (table,), back)


def take_last(a: Tensor, ids: np.ndarray) -> Tensor:
    """Select ``a[..., ids[...]]`` along the last axis."""
    ids = np.asarray(ids, dtype=np.intp)[..., None]
    shape = a.shape

    def back(g):
        out = np.zeros(shape)
        np.put_along_axis(out, ids, g[..., None], axis=-1)
        return (out,)

    return Tensor(np.take_along_axis(a.value, ids, axis=-1)[..., 0], (a,), back)


def concat(parts: Sequence[Tensor], axis: int = 0) -> Tensor:
    parts = [as_tensor(p) for p in parts]
    sizes = np.cumsum([p.shape[axis] for p in parts])[:-1]

    def back(g):
        return tuple(np.split(g, sizes, axis=axis))

    return Tensor(np.concatenate([p.value for p in parts], axis=axis), parts, back)


def gelu(a: Tensor) -> Tensor:
    out, cache = kernels.gelu_forward(a.value)
    return Tensor(out, (a,), lambda g: (kernels.gelu_backward(g, cache),))


def layer_norm(a: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean and unit variance (no affine)."""
    out, inv_std = kernels.layer_norm_forward(a.value, eps)
    return Tensor(out, (a,), lambda g: (kernels.layer_norm_backward(g, out, inv_std),))


def log_softmax(a: Tensor) -> Tensor:
    out = kernels.log_softmax(a.value)

    def back(g):
        return (g - np.exp(out) * g.sum(axis=-1, keepdims=True),)

    return Tensor(out, (a,), back)


def entropy_from_logp(logp: Tensor) -> Tensor:
    """Shannon entropy in nats of the last axis given log-probabilities."""
    lv = logp.value
    p = np.exp(lv)
    plogp = np.where(p > 0.0, p * lv, 0.0)
    return Tensor(-plogp.sum(axis=-1), (logp,),
                  lambda g: (-g[..., None] * np.where(p > 0.0, p * (lv + 1.0), 0.0),))


def causal_attention(q: Tensor, k: Tensor, v: Tensor) -> Tensor:
    """Scaled dot-product attention with a causal mask; inputs (B, H, T, dh)."""
    out, probs = kernels.attention_forward(q.value, k.value, v.value)
    qv, kv, vv = q.value, k.value, v.value

    def back(g):
        return kernels.attention_backward(g, qv, kv, vv, probs)

    return Tensor(out, (q, k, v), back)


def _toposort(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(root: Tensor) -> None:
    """Accumulate d(root)/d(x) into ``x.grad`` for every tracked ancestor."""
    if root.value.size != 1:
        raise ValueError("backward needs a scalar output")
    order = _toposort(root)
    grads: dict[int, np.ndarray] = {id(root): np.ones_like(root.value)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node.backward_fn is None:
            node.grad = g if node.grad is None else node.grad + g
            continue
        for p, pg in zip(node.parents, node.backward_fn(g)):
            if not p.requires_grad:
                continue
            if id(p) in grads:
                grads[id(p)] = grads[id(p)] + pg
            else:
                grads[id(p)] = np.asarray(pg, dtype=np.float64)


def depends_on(root: Tensor, target: Tensor) -> bool:
    return any(node is target for node in _toposort(root)) if root.requires_grad else False


def stack_scalars(items: Iterable[Tensor]) -> Tensor:
    items = [as_tensor(t).reshape((1,)) for t in items]
    return concat(items, axis=0)
