"""Minimal float64 tensor with a reverse-mode gradient tape.

Only the operations the attention network and the policy trainer need are
provided. Each op records its parents and a closure mapping the output
gradient to parent gradients; ``Tensor.backward`` walks the tape in reverse
topological order.
"""

from __future__ import annotations

import contextlib
import string
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import BackwardWithoutForward, DimensionError

_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    global _grad_enabled
    prev, _grad_enabled = _grad_enabled, False
    try:
        yield
    finally:
        _grad_enabled = prev


def _as_array(x) -> np.ndarray:
    return np.asarray(x, dtype=np.float64)


def unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` after numpy broadcasting."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and grad.shape[i] != 1:
            grad = grad.sum(axis=i, keepdims=True)
    return grad


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None,
                 _parents: tuple = (), _backward: Callable | None = None):
        self.data = _as_array(data)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents = _parents
        self._backward = _backward
        self.name = name

    # -- bookkeeping
    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def has_tape(self) -> bool:
        return self._backward is not None

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag}, requires_grad={self.requires_grad})"

    def backward(self, grad=None) -> None:
        if not self.requires_grad:
            raise BackwardWithoutForward("tensor is not part of a recorded graph")
        g = np.ones_like(self.data) if grad is None else _as_array(grad)
        if g.shape != self.shape:
            raise DimensionError(f"upstream grad {g.shape} vs output {self.shape}")
        order = _topo(self)
        grads = {id(self): g}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node.grad = g if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                grads[key] = pg if key not in grads else grads[key] + pg

    # -- operator sugar
    def __add__(self, other): return add(self, other)
    def __radd__(self, other): return add(other, self)
    def __sub__(self, other): return sub(self, other)
    def __rsub__(self, other): return sub(other, self)
    def __mul__(self, other): return mul(self, other)
    def __rmul__(self, other): return mul(other, self)
    def __truediv__(self, other): return div(self, other)
    def __rtruediv__(self, other): return div(other, self)
    def __neg__(self): return mul(self, -1.0)
    def __pow__(self, p: float): return power(self, p)
    def __matmul__(self, other): return matmul(self, other)
    def __getitem__(self, key): return getitem(self, key)

    def sum(self, axis=None, keepdims=False): return tsum(self, axis, keepdims)
    def mean(self, axis=None, keepdims=False): return tmean(self, axis, keepdims)
    def reshape(self, *shape): return reshape(self, shape[0] if len(shape) == 1 and isinstance(shape[0], (tuple, list)) else shape)
    def transpose(self, *axes): return transpose(self, axes if axes else None)
    def exp(self): return exp(self)
    def log(self): return log(self)
    def tanh(self): return tanh(self)
    def sqrt(self): return power(self, 0.5)
    def softmax(self, axis=-1): return softmax(self, axis)


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
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def parameter(data, name: str | None = None) -> Tensor:
    return Tensor(data, requires_grad=True, name=name)


def _make(data, parents: Sequence[Tensor], backward: Callable) -> Tensor:
    if _grad_enabled and any(p.requires_grad for p in parents):
        return Tensor(data, True, None, tuple(parents), backward)
    return Tensor(data)


# ---------------------------------------------------------------- elementwise

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _make(a.data + b.data, (a, b),
                 lambda g: (unbroadcast(g, a.shape), unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _make(a.data - b.data, (a, b),
                 lambda g: (unbroadcast(g, a.shape), unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _make(a.data * b.data, (a, b),
                 lambda g: (unbroadcast(g * b.data, a.shape), unbroadcast(g * a.data, b.shape)))


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data / b.data
    return _make(out, (a, b),
                 lambda g: (unbroadcast(g / b.data, a.shape), unbroadcast(-g * out / b.data, b.shape)))


def power(a, p: float) -> Tensor:
    a = as_tensor(a)
    out = a.data ** p
    return _make(out, (a,), lambda g: (g * p * a.data ** (p - 1.0),))


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return _make(out, (a,), lambda g: (g * out,))


def log(a) -> Tensor:
    a = as_tensor(a)
    return _make(np.log(a.data), (a,), lambda g: (g / a.data,))


def tanh(a) -> Tensor:
    a = as_tensor(a)
    out = np.tanh(a.data)
    return _make(out, (a,), lambda g: (g * (1.0 - out * out),))


def identity(a) -> Tensor:
    return as_tensor(a)


def clip(a, lo: float, hi: float) -> Tensor:
    a = as_tensor(a)
    inside = (a.data >= lo) & (a.data <= hi)
    return _make(np.clip(a.data, lo, hi), (a,), lambda g: (np.where(inside, g, 0.0),))


def minimum(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    take_a = a.data <= b.data
    return _make(np.where(take_a, a.data, b.data), (a, b),
                 lambda g: (unbroadcast(np.where(take_a, g, 0.0), a.shape),
                            unbroadcast(np.where(take_a, 0.0, g), b.shape)))


def masked_fill(a, keep: np.ndarray, value: float) -> Tensor:
    """``a`` where ``keep`` is true, ``value`` elsewhere; no gradient reaches filled slots."""
    a = as_tensor(a)
    keep = np.broadcast_to(np.asarray(keep, dtype=bool), a.shape)
    return _make(np.where(keep, a.data, value), (a,), lambda g: (np.where(keep, g, 0.0),))


# ---------------------------------------------------------------- reductions / shape

def tsum(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def back(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)
    return _make(out, (a,), back)


def tmean(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    count = a.size if axis is None else int(np.prod([a.shape[i] for i in np.atleast_1d(axis)]))
    return tsum(a, axis, keepdims) * (1.0 / count)


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    return _make(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),))


def transpose(a, axes=None) -> Tensor:
    a = as_tensor(a)
    axes = tuple(reversed(range(a.ndim))) if axes is None else tuple(axes)
    inv = tuple(np.argsort(axes))
    return _make(a.data.transpose(axes), (a,), lambda g: (g.transpose(inv),))


def getitem(a, key) -> Tensor:
    a = as_tensor(a)

    def back(g):
        full = np.zeros_like(a.data)
        np.add.at(full, key, g)
        return (full,)
    return _make(a.data[key], (a,), back)


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in ts]
    cuts = np.cumsum(sizes)[:-1]
    return _make(np.concatenate([t.data for t in ts], axis=axis), ts,
                 lambda g: tuple(np.split(g, cuts, axis=axis)))


def gather_last2(a, index: np.ndarray) -> Tensor:
    """Remap the last two axes of ``a`` through a flat index table.

    ``index`` has the output's trailing shape; entry ``k >= 0`` selects flat
    element ``k`` of ``a``'s trailing block, ``-1`` yields 0. Entries must be
    unique so the backward pass is a plain scatter.
    """
    a = as_tensor(a)
    lead = a.shape[:-2]
    flat = a.data.reshape(lead + (-1,))
    index = np.asarray(index)
    valid = index >= 0
    src = np.where(valid, index, 0)
    out = np.where(valid, flat[..., src], 0.0)

    def back(g):
        full = np.zeros_like(flat)
        full[..., src[valid]] = g[..., valid]
        return (full.reshape(a.shape),)
    return _make(out, (a,), back)


# ---------------------------------------------------------------- contractions

def einsum(subscripts: str, *operands) -> Tensor:
    """``np.einsum`` with an explicit ``->`` output and no repeated index per operand."""
    ops = [as_tensor(o) for o in operands]
    lhs, out_sub = subscripts.replace(" ", "").split("->")
    in_subs = lhs.split(",")
    if len(in_subs) != len(ops):
        raise DimensionError(f"{subscripts}: {len(ops)} operands")
    data = np.einsum(subscripts, *[o.data for o in ops], optimize=len(ops) > 2)

    def back(g):
        grads = []
        for i, (sub_i, op) in enumerate(zip(in_subs, ops)):
            if not op.requires_grad:
                grads.append(None)
                continue
            others = [(s, o.data) for j, (s, o) in enumerate(zip(in_subs, ops)) if j != i]
            avail = set(out_sub).union(*[set(s) for s, _ in others])
            reduced = "".join(ch for ch in sub_i if ch in avail)
            spec = ",".join([out_sub] + [s for s, _ in others]) + "->" + reduced
            gi = np.einsum(spec, g, *[d for _, d in others], optimize=len(others) > 1)
            if reduced != sub_i:
                shape = [op.shape[k] if ch in avail else 1 for k, ch in enumerate(sub_i)]
                gi = np.broadcast_to(gi.reshape(shape), op.shape).copy()
            grads.append(gi)
        return tuple(grads)
    return _make(data, ops, back)


def matmul(a, b) -> Tensor:
    """Batched ``a @ b`` over the last two axes (both at least 2-D)."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError("matmul needs operands with ndim >= 2")
    out = a.data @ b.data
    return _make(out, (a, b),
                 lambda g: (unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape),
                            unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape)))


def linear(x, weight, bias=None) -> Tensor:
    """``x @ weight.T + bias`` over the last axis of ``x``; weight is (out, in)."""
    x = as_tensor(x)
    letters = string.ascii_lowercase[: x.ndim - 1]
    y = einsum(f"{letters}i,oi->{letters}o", x, weight)
    return y if bias is None else y + bias


# ---------------------------------------------------------------- nonlinear reductions

def softmax(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    z = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)
    return _make(out, (a,), lambda g: (out * (g - (g * out).sum(axis=axis, keepdims=True)),))


def log_softmax(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    z = a.data - a.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out = z - lse
    p = np.exp(out)
    return _make(out, (a,), lambda g: (g - p * g.sum(axis=axis, keepdims=True),))


# ---------------------------------------------------------------- optimisation

class Adam:
    """Adaptive-moment gradient descent over a list of parameter tensors."""

    def __init__(self, params: Iterable[Tensor], lr: float = 3e-4, betas=(0.9, 0.999),
                 eps: float = 1e-8, max_grad_norm: float | None = None):
        self.params = list(params)
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.max_grad_norm = max_grad_norm
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def grad_norm(self) -> float:
        return float(np.sqrt(sum(float(np.sum(p.grad ** 2)) for p in self.params if p.grad is not None)))

    def step(self) -> None:
        self.t += 1
        scale = 1.0
        if self.max_grad_norm is not None:
            norm = self.grad_norm()
            if norm > self.max_grad_norm:
                scale = self.max_grad_norm / (norm + 1e-12)
        c1 = 1.0 - self.b1 ** self.t
        c2 = 1.0 - self.b2 ** self.t
        for p, m, v in zip(self.params, self.m, self.v):
            if p.grad is None:
                continue
            g = p.grad * scale
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * g * g
            p.data -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)

    def state_dict(self) -> dict:
        return {"t": self.t, "m": [m.copy() for m in self.m], "v": [v.copy() for v in self.v]}

    def load_state_dict(self, state: dict) -> None:
        self.t = int(state["t"])
        self.m = [np.array(m, dtype=np.float64) for m in state["m"]]
        self.v = [np.array(v, dtype=np.float64) for v in state["v"]]


def numerical_grad(f: Callable[[], float], x: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central finite differences of scalar ``f()`` w.r.t. array ``x`` (perturbed in place)."""
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        idx = it.multi_index
        orig = x[idx]
        x[idx] = orig + h
        fp = f()
        x[idx] = orig - h
        fm = f()
        x[idx] = orig
        g[idx] = (fp - fm) / (2.0 * h)
    return g
