"""Small reverse-mode autodiff kernel over numpy arrays.

Every op returns a :class:`Tensor` that remembers its parents and a closure
mapping the upstream gradient to per-parent gradients. :func:`backward` walks
the recorded graph in reverse topological order and accumulates gradients on
leaf parameters. Recording is switched off inside :func:`no_grad`.
"""
from __future__ import annotations

import contextlib
import math
from typing import Callable, Iterable

import numpy as np

_RECORDING = True
_DTYPE = np.float64


@contextlib.contextmanager
def precision(dtype):
    """Temporarily change the dtype used for new tensors and parameters."""
    global _DTYPE
    prev, _DTYPE = _DTYPE, np.dtype(dtype).type
    try:
        yield
    finally:
        _DTYPE = prev


@contextlib.contextmanager
def no_grad():
    global _RECORDING
    prev, _RECORDING = _RECORDING, False
    try:
        yield
    finally:
        _RECORDING = prev


class ShapeError(ValueError):
    pass


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad=False, name=None, _parents=(), _backward=None):
        self.data = np.asarray(data, dtype=_DTYPE)
        self.requires_grad = requires_grad
        self.grad = None
        self._parents = _parents
        self._backward = _backward
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def is_leaf(self):
        return not self._parents

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag})"

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return index(self, key)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data, parents, backward):
    parents = tuple(parents)
    if _RECORDING and any(p.requires_grad for p in parents):
        return Tensor(data, requires_grad=True, _parents=parents, _backward=backward)
    return Tensor(data)


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


def _check_broadcast(op, a, b):
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: incompatible shapes {a.shape} and {b.shape}") from None


# ---------------------------------------------------------------- elementwise


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("add", a, b)
    return _make(
        a.data + b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
    )


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("sub", a, b)
    return _make(
        a.data - b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)),
    )


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("mul", a, b)
    return _make(
        a.data * b.data,
        (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
    )


def gelu(x: Tensor) -> Tensor:
    """tanh-approximated GELU."""
    c = math.sqrt(2.0 / math.pi)
    x2 = x.data * x.data
    t = np.tanh(c * x.data * (1.0 + 0.044715 * x2))
    out = 0.5 * x.data * (1.0 + t)

    def backward(g):
        du = c * (1.0 + 3 * 0.044715 * x2)
        return (g * (0.5 * (1.0 + t) + 0.5 * x.data * (1.0 - t * t) * du),)

    return _make(out, (x,), backward)


# ---------------------------------------------------------------- linear algebra


def matmul(a, b) -> Tensor:
    """2D matrix product."""
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    return _make(a.data @ b.data, (a, b), lambda g: (g @ b.data.T, a.data.T @ g))


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """``x @ w + b`` over the last axis of ``x`` (any leading shape)."""
    if x.shape[-1] != w.shape[0] or w.data.ndim != 2:
        raise ShapeError(f"linear: input {x.shape} does not match weight {w.shape}")
    if b is not None and b.shape != (w.shape[1],):
        raise ShapeError(f"linear: bias {b.shape} does not match weight {w.shape}")
    out = x.data @ w.data
    if b is not None:
        out = out + b.data
    lead = x.shape[:-1]

    def backward(g):
        g2 = g.reshape(-1, w.shape[1])
        x2 = x.data.reshape(-1, w.shape[0])
        gx = (g2 @ w.data.T).reshape(*lead, w.shape[0])
        gw = x2.T @ g2
        if b is None:
            return gx, gw
        return gx, gw, g2.sum(axis=0)

    parents = (x, w) if b is None else (x, w, b)
    return _make(out, parents, backward)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise ShapeError(f"layer_norm: input {x.shape} with scale {gamma.shape} / shift {beta.shape}")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gamma.data + beta.data

    def backward(g):
        gxhat = g * gamma.data
        gx = inv * (gxhat - gxhat.mean(axis=-1, keepdims=True) - xhat * (gxhat * xhat).mean(axis=-1, keepdims=True))
        lead = tuple(range(g.ndim - 1))
        return gx, (g * xhat).sum(axis=lead), g.sum(axis=lead)

    return _make(out, (x, gamma, beta), backward)


def _softmax(z: np.ndarray, axis: int) -> np.ndarray:
    z = z - z.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    p = _softmax(x.data, axis)

    def backward(g):
        return (p * (g - (g * p).sum(axis=axis, keepdims=True)),)

    return _make(p, (x,), backward)


def causal_mask(n: int) -> np.ndarray:
    """Boolean (n, n) mask, True where query i may attend key j (j <= i)."""
    return np.tril(np.ones((n, n), dtype=bool))


def attention(q: Tensor, k: Tensor, v: Tensor, mask: np.ndarray) -> Tensor:
    """Masked scaled dot-product attention.

    ``k, v`` have shape (..., n, dh) and ``q`` (..., m, dh) with m <= n, the
    queries standing for the last m positions. ``mask`` broadcasts to
    (..., m, n) and may not admit keys after a query's own position. Masked
    scores are set to ``-inf`` so their weights are exactly zero.
    """
    if k.shape != v.shape or q.shape[:-2] != k.shape[:-2] or q.shape[-1] != k.shape[-1]:
        raise ShapeError(f"attention: q {q.shape}, k {k.shape}, v {v.shape} are incompatible")
    m, n, dh = q.shape[-2], k.shape[-2], q.shape[-1]
    if m > n:
        raise ShapeError(f"attention: {m} queries for {n} keys")
    mask = np.asarray(mask, dtype=bool)
    if mask.shape[-2:] != (m, n):
        raise ShapeError(f"attention: mask {mask.shape} does not cover ({m}, {n})")
    if np.triu(mask, k=1 + n - m).any():
        raise ValueError("attention: mask admits future positions")
    scale = 1.0 / math.sqrt(dh)
    scores = np.matmul(q.data, np.swapaxes(k.data, -1, -2)) * scale
    scores = np.where(mask, scores, -np.inf)
    p = _softmax(scores, -1)
    out = np.matmul(p, v.data)

    def backward(g):
        gv = np.matmul(np.swapaxes(p, -1, -2), g)
        gp = np.matmul(g, np.swapaxes(v.data, -1, -2))
        gs = p * (gp - (gp * p).sum(axis=-1, keepdims=True)) * scale
        gq = np.matmul(gs, k.data)
        gk = np.matmul(np.swapaxes(gs, -1, -2), q.data)
        return gq, gk, gv

    return _make(out, (q, k, v), backward)


# ---------------------------------------------------------------- reductions / shape


def mean(x: Tensor, axis: int) -> Tensor:
    x = as_tensor(x)
    n = x.shape[axis]
    if n == 0:
        raise ShapeError(f"mean: empty axis {axis} in shape {x.shape}")

    def backward(g):
        return (np.repeat(np.expand_dims(g, axis), n, axis=axis) / n,)

    return _make(x.data.mean(axis=axis), (x,), backward)


def sum(x: Tensor, axis=None) -> Tensor:  # noqa: A001
    x = as_tensor(x)
    if axis is None:
        return _make(np.sum(x.data), (x,), lambda g: (np.broadcast_to(g, x.shape).copy(),))

    def backward(g):
        return (np.repeat(np.expand_dims(g, axis), x.shape[axis], axis=axis),)

    return _make(x.data.sum(axis=axis), (x,), backward)


def reshape(x: Tensor, shape) -> Tensor:
    return _make(x.data.reshape(shape), (x,), lambda g: (g.reshape(x.shape),))


def transpose(x: Tensor, axes) -> Tensor:
    inv = np.argsort(axes)
    return _make(np.transpose(x.data, axes), (x,), lambda g: (np.transpose(g, inv),))


def index(x: Tensor, key) -> Tensor:
    """numpy indexing (basic or advanced) with scatter-add backward."""

    parts = key if isinstance(key, tuple) else (key,)
    basic = all(isinstance(k, (int, np.integer, slice)) or k is None or k is Ellipsis for k in parts)

    def backward(g):
        gx = np.zeros_like(x.data)
        if basic:
            gx[key] += g
        else:
            np.add.at(gx, key, g)
        return (gx,)

    return _make(x.data[key], (x,), backward)


def embedding(table: Tensor, ids) -> Tensor:
    ids = np.asarray(ids, dtype=np.int64)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise IndexError(f"embedding: id out of range for table with {table.shape[0]} rows")
    return index(table, ids)


def concat(tensors: Iterable[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError:
        shapes = [t.shape for t in tensors]
        raise ShapeError(f"concat: incompatible shapes {shapes} along axis {axis}") from None
    splits = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def backward(g):
        return tuple(np.split(g, splits, axis=axis))

    return _make(out, tensors, backward)


def where_rows(mask: np.ndarray, a: Tensor, b: Tensor) -> Tensor:
    """Pick rows of ``a`` where ``mask`` else rows of ``b`` (leading-axis mask)."""
    m = np.asarray(mask, dtype=bool).reshape((-1,) + (1,) * (a.data.ndim - 1))
    return _make(
        np.where(m, a.data, b.data),
        (a, b),
        lambda g: (np.where(m, g, 0.0), np.where(m, 0.0, g)),
    )


# ---------------------------------------------------------------- losses


def cross_entropy_sum(logits: Tensor, labels) -> Tensor:
    """Sum over rows of ``-log softmax(logits)[label]``."""
    labels = np.asarray(labels, dtype=np.int64)
    n, c = logits.shape
    if labels.shape != (n,):
        raise ShapeError(f"cross_entropy: {n} logit rows but labels shape {labels.shape}")
    if labels.size and (labels.min() < 0 or labels.max() >= c):
        raise ValueError(f"cross_entropy: labels must lie in 0..{c - 1}")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    logz = np.log(np.exp(z).sum(axis=1, keepdims=True))
    logp = z - logz
    loss = -logp[np.arange(n), labels].sum()

    def backward(g):
        p = np.exp(logp)
        p[np.arange(n), labels] -= 1.0
        return (g * p,)

    return _make(loss, (logits,), backward)


def squared_error_sum(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise ShapeError(f"squared_error: shapes {a.shape} and {b.shape} differ")
    r = a.data - b.data
    return _make(np.sum(r * r), (a, b), lambda g: (2.0 * g * r, -2.0 * g * r))


# ---------------------------------------------------------------- graph traversal


def _topo_order(root: Tensor) -> list[Tensor]:
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
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


def backward(loss: Tensor, store: "ParamStore | None" = None) -> None:
    """Accumulate d(loss)/d(param) into ``param.grad`` for every leaf reached."""
    if loss.data.size != 1:
        raise ShapeError(f"backward: loss must be a scalar, got shape {loss.shape}")
    if not loss.requires_grad or loss.is_leaf:
        raise RuntimeError("backward: loss has no recorded forward computation")
    grads = {id(loss): np.ones_like(loss.data)}
    for node in reversed(_topo_order(loss)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node.is_leaf:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            if id(parent) in grads:
                grads[id(parent)] = grads[id(parent)] + pg
            else:
                grads[id(parent)] = pg
    if store is not None:
        for t in store.values():
            if t.grad is None:
                t.grad = np.zeros_like(t.data)


# ---------------------------------------------------------------- parameters


class ParamStore:
    """Named parameters with gradient accumulators and Adam moment buffers."""

    def __init__(self):
        self._params: dict[str, Tensor] = {}
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.t = 0

    def add(self, name: str, value) -> Tensor:
        if name in self._params:
            raise KeyError(f"duplicate parameter name {name!r}")
        tensor = Tensor(np.array(value, dtype=_DTYPE), requires_grad=True, name=name)
        tensor.grad = np.zeros_like(tensor.data)
        self._params[name] = tensor
        self.m[name] = np.zeros_like(tensor.data)
        self.v[name] = np.zeros_like(tensor.data)
        return tensor

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __iter__(self):
        return iter(self._params)

    def __len__(self):
        return len(self._params)

    def names(self) -> list[str]:
        return list(self._params)

    def values(self):
        return self._params.values()

    def items(self):
        return self._params.items()

    def grads(self) -> dict[str, np.ndarray]:
        return {n: t.grad for n, t in self._params.items()}

    def zero_grad(self) -> None:
        for t in self._params.values():
            t.grad = np.zeros_like(t.data)

    def num_params(self) -> int:
        return int(np.sum([t.data.size for t in self._params.values()]))

    def check_finite(self) -> None:
        for name, t in self._params.items():
            if not np.all(np.isfinite(t.data)):
                raise FloatingPointError(f"parameter {name!r} holds non-finite values")

    def copy(self) -> "ParamStore":
        out = ParamStore()
        for name, t in self._params.items():
            out.add(name, t.data)
            out.m[name] = self.m[name].copy()
            out.v[name] = self.v[name].copy()
        out.t = self.t
        return out

    def cast(self, dtype) -> None:
        """Convert parameters, gradients and moment buffers in place."""
        for name, t in self._params.items():
            t.data = t.data.astype(dtype)
            t.grad = None if t.grad is None else t.grad.astype(dtype)
            self.m[name] = self.m[name].astype(dtype)
            self.v[name] = self.v[name].astype(dtype)

    def state(self) -> dict[str, np.ndarray]:
        return {n: t.data for n, t in self._params.items()}


def grad_norm(store: ParamStore) -> float:
    return float(np.sqrt(np.sum([np.vdot(p.grad, p.grad) for _, p in store.items()])))


def adam_step(
    store: ParamStore, lr: float = 1e-3, betas=(0.9, 0.999), eps: float = 1e-8, clip_norm: float | None = None
) -> None:
    """One bias-corrected Adam update; gradients are zeroed afterwards.

    With ``clip_norm`` the gradients are first rescaled so their global L2
    norm does not exceed it.
    """
    b1, b2 = betas
    if clip_norm is not None:
        norm = grad_norm(store)
        if norm > clip_norm:
            for _, p in store.items():
                p.grad *= clip_norm / norm
    store.t += 1
    c1 = 1.0 - b1**store.t
    c2 = 1.0 - b2**store.t
    for name, p in store.items():
        g = p.grad
        m = store.m[name]
        v = store.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p.data -= lr * (m / c1) / (np.sqrt(v / c2) + eps)
    store.zero_grad()


def grad_check(
    fn: Callable[[], Tensor],
    store: ParamStore,
    eps: float = 1e-5,
    names: Iterable[str] | None = None,
    analytic: dict[str, np.ndarray] | None = None,
) -> float:
    """Largest per-coordinate relative error between analytic and central-difference gradients.

    ``fn`` must rebuild the loss from the current parameter values each call.
    ``analytic`` overrides the backward-pass gradients (used to sanity-check
    the checker itself).
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    names = list(store.names() if names is None else names)
    if analytic is None:
        store.zero_grad()
        loss = fn()
        if not np.isfinite(loss.data).all():
            raise FloatingPointError("grad_check: loss is not finite")
        backward(loss, store)
        analytic = {n: store[n].grad.copy() for n in names}
        store.zero_grad()
    worst = 0.0
    with no_grad():
        for name in names:
            p = store[name].data
            ga = analytic[name]
            for i in np.ndindex(p.shape):
                orig = p[i]
                p[i] = orig + eps
                fp = float(fn().data)
                p[i] = orig - eps
                fm = float(fn().data)
                p[i] = orig
                if not (math.isfinite(fp) and math.isfinite(fm)):
                    raise FloatingPointError(f"grad_check: non-finite loss perturbing {name}{list(i)}")
                gn = (fp - fm) / (2 * eps)
                err = abs(ga[i] - gn) / max(1e-8, abs(ga[i]) + abs(gn))
                worst = max(worst, err)
    return worst
