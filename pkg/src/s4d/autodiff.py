"""Small dense-tensor library with reverse-mode automatic differentiation.

Storage is numpy. Parameters are float32 by default; wrap code in
``precision(np.float64)`` to run the same graph in float64, which is what the
finite-difference gradient checks use.
"""

from __future__ import annotations

import contextlib
import math
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy.special import erf

_DTYPE = np.float32
_SQRT1_2 = 1.0 / math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


class ShapeError(ValueError):
    """Operand extents are incompatible."""


class DegenerateError(ValueError):
    """An operation received input with no valid output (e.g. all -inf softmax)."""


@contextlib.contextmanager
def precision(dtype):
    """Temporarily change the dtype new tensors are created with."""
    global _DTYPE
    old = _DTYPE
    _DTYPE = np.dtype(dtype).type
    try:
        yield
    finally:
        _DTYPE = old


def default_dtype():
    return _DTYPE


class Tensor:
    """An n-d array node in the autodiff graph."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad: bool = False, _parents: tuple = (), op: str = "leaf"):
        if isinstance(data, np.ndarray) and data.dtype == _DTYPE:
            self.data = data
        else:
            self.data = np.asarray(data, dtype=_DTYPE)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents = _parents
        self._backward: Callable[[np.ndarray], None] | None = None
        self.op = op

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"

    def zero_grad(self) -> None:
        self.grad = None

    def _accum(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.array(g, dtype=self.data.dtype, copy=True)
        else:
            self.grad += g

    def backward(self) -> None:
        backward(self)

    # operator sugar
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

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes or None)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def parameter(data) -> Tensor:
    return Tensor(np.array(data, dtype=_DTYPE), requires_grad=True)


def _node(data: np.ndarray, parents: Sequence[Tensor], op: str, fn) -> Tensor:
    req = any(p.requires_grad for p in parents)
    out = Tensor(data, requires_grad=req, _parents=tuple(parents) if req else (), op=op)
    if req:
        out._backward = fn
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every reachable leaf needing it."""
    if loss.data.size != 1:
        raise ValueError(f"backward() needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
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
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            node._accum(g)
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            prev = grads.get(id(parent))
            grads[id(parent)] = pg if prev is None else prev + pg


# ---------------------------------------------------------------- elementwise


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return _node(a.data + b.data, (a, b), "add",
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return _node(a.data - b.data, (a, b), "sub",
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    return _node(ad * bd, (a, b), "mul",
                 lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)))


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    out = ad / bd
    return _node(out, (a, b), "div",
                 lambda g: (_unbroadcast(g / bd, ad.shape), _unbroadcast(-g * out / bd, bd.shape)))


def scale(a: Tensor, c: float) -> Tensor:
    return _node(a.data * c, (a,), "scale", lambda g: (g * c,))


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _node(out, (a,), "exp", lambda g: (g * out,))


def gelu(a: Tensor) -> Tensor:
    """Exact (erf) GELU."""
    x = a.data
    cdf = 0.5 * (1.0 + erf(x * _SQRT1_2))

    def bw(g):
        pdf = np.exp(-0.5 * x * x) * _INV_SQRT_2PI
        return (g * (cdf + x * pdf),)

    return _node(x * cdf, (a,), "gelu", bw)


def dropout(a: Tensor, p: float, rng: np.random.Generator, train: bool) -> Tensor:
    if not train or p == 0.0:
        return a
    keep = (rng.random(a.shape) >= p).astype(a.data.dtype) / (1.0 - p)
    return _node(a.data * keep, (a,), "dropout", lambda g: (g * keep,))


# ---------------------------------------------------------------- linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    ad, bd = a.data, b.data

    def bw(g):
        ga = _unbroadcast(g @ np.swapaxes(bd, -1, -2), ad.shape)
        gb = _unbroadcast(np.swapaxes(ad, -1, -2) @ g, bd.shape)
        return ga, gb

    return _node(ad @ bd, (a, b), "matmul", bw)


def rowstable_matmul(a: Tensor, b: Tensor) -> Tensor:
    """``a[m×k] @ b[k×n]`` whose per-row result does not depend on m.

    BLAS kernels change their reduction order with the row count, so a row
    computed inside a large product can differ in the last bit from the same row
    computed alone. Sparse expert evaluation relies on this not happening.
    """
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"rowstable_matmul: cannot multiply {a.shape} by {b.shape}")
    ad, bd = a.data, b.data
    return _node(np.einsum("mk,kn->mn", ad, bd), (a, b), "matmul",
                 lambda g: (g @ bd.T, ad.T @ g))


# ---------------------------------------------------------------- shape ops


def reshape(a: Tensor, shape) -> Tensor:
    old = a.shape
    return _node(a.data.reshape(shape), (a,), "reshape", lambda g: (g.reshape(old),))


def transpose(a: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    inv = tuple(np.argsort(axes))
    return _node(np.transpose(a.data, axes), (a,), "transpose", lambda g: (np.transpose(g, inv),))


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in ts]
    cuts = np.cumsum(sizes)[:-1]
    return _node(np.concatenate([t.data for t in ts], axis=axis), ts, "concat",
                 lambda g: tuple(np.split(g, cuts, axis=axis)))


def _is_basic(idx) -> bool:
    parts = idx if isinstance(idx, tuple) else (idx,)
    return all(isinstance(p, (int, np.integer, slice)) or p is None or p is Ellipsis for p in parts)


def getitem(a: Tensor, idx) -> Tensor:
    shape = a.shape
    basic = _is_basic(idx)

    def bw(g):
        full = np.zeros(shape, dtype=g.dtype)
        if basic:
            full[idx] = g
        else:
            np.add.at(full, idx, g)
        return (full,)

    return _node(a.data[idx], (a,), "slice", bw)


def _add_rows(out: np.ndarray, idx: np.ndarray, rows: np.ndarray, unique: bool) -> None:
    if unique:
        out[idx] += rows
    else:
        np.add.at(out, idx, rows)


def take_rows(a: Tensor, idx: np.ndarray, unique: bool = False) -> Tensor:
    """Gather rows ``a[idx]`` along axis 0 (embedding-row lookup).

    ``unique=True`` promises no repeated indices, which allows a faster backward.
    """
    idx = np.asarray(idx, dtype=np.intp)
    shape = a.shape

    def bw(g):
        full = np.zeros(shape, dtype=g.dtype)
        _add_rows(full, idx, g, unique)
        return (full,)

    return _node(a.data[idx], (a,), "gather", bw)


def scatter_rows(rows: Tensor, idx: np.ndarray, n: int, unique: bool = False) -> Tensor:
    """Zeros of ``n`` rows with ``rows`` added at positions ``idx``; adjoint of ``take_rows``."""
    idx = np.asarray(idx, dtype=np.intp)
    out = np.zeros((n,) + rows.shape[1:], dtype=rows.data.dtype)
    _add_rows(out, idx, rows.data, unique)
    return _node(out, (rows,), "scatter", lambda g: (g[idx],))


# ---------------------------------------------------------------- reductions


def sum_(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    shape = a.shape

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape),)

    return _node(np.sum(a.data, axis=axis, keepdims=keepdims), (a,), "sum", bw)


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    shape = a.shape
    axes = range(a.ndim) if axis is None else (axis if isinstance(axis, tuple) else (axis,))
    count = int(np.prod([shape[ax] for ax in axes]))

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / count, shape),)

    return _node(np.mean(a.data, axis=axis, keepdims=keepdims), (a,), "mean", bw)


# ---------------------------------------------------------------- nn functions


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    x = a.data
    m = np.max(x, axis=axis, keepdims=True)
    if np.any(np.isneginf(m)):
        raise DegenerateError("softmax: every entry along the axis is -inf")
    e = np.exp(x - m)
    y = e / np.sum(e, axis=axis, keepdims=True)

    def bw(g):
        return (y * (g - np.sum(g * y, axis=axis, keepdims=True)),)

    return _node(y, (a,), "softmax", bw)


def log_softmax(a: Tensor, axis: int = -1) -> Tensor:
    x = a.data
    m = np.max(x, axis=axis, keepdims=True)
    if np.any(np.isneginf(m)):
        raise DegenerateError("log_softmax: every entry along the axis is -inf")
    z = x - m
    lse = np.log(np.sum(np.exp(z), axis=axis, keepdims=True))
    out = z - lse
    p = np.exp(out)
    return _node(out, (a,), "log_softmax",
                 lambda g: (g - p * np.sum(g, axis=axis, keepdims=True),))


def layernorm(a: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-6) -> Tensor:
    x = a.data
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    gd = gain.data
    d = x.shape[-1]

    def bw(g):
        gx_hat = g * gd
        gx = inv * (gx_hat - gx_hat.mean(axis=-1, keepdims=True)
                    - xhat * (gx_hat * xhat).mean(axis=-1, keepdims=True))
        red = tuple(range(g.ndim - 1))
        return gx, np.sum(g * xhat, axis=red), np.sum(g, axis=red)

    assert gd.shape == (d,)
    return _node(xhat * gd + bias.data, (a, gain, bias), "layernorm", bw)


def cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean cross-entropy of integer ``labels`` under ``logits[B×C]``."""
    labels = np.asarray(labels, dtype=np.intp)
    x = logits.data
    if x.ndim != 2 or x.shape[0] != labels.shape[0]:
        raise ShapeError(f"cross_entropy: logits {x.shape} vs labels {labels.shape}")
    m = x.max(axis=1, keepdims=True)
    z = x - m
    lse = np.log(np.exp(z).sum(axis=1, keepdims=True))
    logp = z - lse
    n = x.shape[0]
    loss = -logp[np.arange(n), labels].mean()

    def bw(g):
        p = np.exp(logp)
        p[np.arange(n), labels] -= 1.0
        return (p * (g / n),)

    return _node(np.asarray(loss, dtype=x.dtype), (logits,), "cross_entropy", bw)


def topk(a: Tensor, k: int, axis: int = -1) -> tuple[Tensor, np.ndarray]:
    """Largest ``k`` values along ``axis`` and their indices (ties: lower index first).

    The returned indices are plain integer arrays and carry no gradient.
    """
    n = a.shape[axis]
    if not 1 <= k <= n:
        raise ValueError(f"topk: k={k} outside [1, {n}]")
    order = np.argsort(-a.data, axis=axis, kind="stable")
    idx = np.take(order, np.arange(k), axis=axis)
    shape = a.shape

    def bw(g):
        full = np.zeros(shape, dtype=g.dtype)
        np.put_along_axis(full, idx, g, axis=axis)
        return (full,)

    return _node(np.take_along_axis(a.data, idx, axis=axis), (a,), "topk", bw), idx


# ---------------------------------------------------------------- gradient checking


def numerical_grad(f: Callable[[], Tensor], x: Tensor, eps: float = 1e-3,
                   coords: Iterable[tuple[int, ...]] | None = None,
                   guard: Callable[[], object] | None = None) -> np.ndarray:
    """Central finite differences of scalar ``f()`` w.r.t. entries of ``x``.

    ``x.data`` is perturbed in place; returns NaN at coordinates not in ``coords``.
    ``guard`` returns a hashable summary of the piecewise branch taken (e.g. the
    top-k routing); coordinates where a perturbation changes it are left NaN,
    since a difference quotient across a kink is not a derivative.
    """
    out = np.full(x.shape, np.nan)
    it = coords if coords is not None else np.ndindex(*x.shape)
    for c in it:
        orig = x.data[c]
        ref = None
        if guard is not None:
            ref = guard()
        x.data[c] = orig + eps
        fp = float(f().data)
        same = guard is None or guard() == ref
        x.data[c] = orig - eps
        fm = float(f().data)
        same = same and (guard is None or guard() == ref)
        x.data[c] = orig
        if same:
            out[c] = (fp - fm) / (2 * eps)
    return out


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-3) -> float:
    """``||a - n|| / max(||a||, ||n||, floor)`` over the checked entries of one tensor.

    Norm-wise rather than entry-wise: central differences carry an O(eps^2)
    truncation error that would dominate entries whose true gradient is ~0.
    """
    mask = ~np.isnan(numeric)
    a, n = analytic[mask], numeric[mask]
    if a.size == 0:
        return 0.0
    den = max(np.linalg.norm(a), np.linalg.norm(n), floor)
    return float(np.linalg.norm(a - n) / den)


def gradcheck(f: Callable[[], Tensor], params: Sequence[Tensor], eps: float = 1e-3,
              max_coords: int | None = None, rng: np.random.Generator | None = None,
              floor: float = 1e-3, guard: Callable[[], object] | None = None) -> float:
    """Max relative error between backprop and central differences over ``params``.

    Must be called with float64 tensors. With ``max_coords`` set, that many
    randomly chosen entries per tensor are checked instead of all of them.
    """
    for p in params:
        if p.data.dtype != np.float64:
            raise TypeError("gradcheck requires float64 tensors; use precision(np.float64)")
        p.grad = None
    loss = f()
    backward(loss)
    worst = 0.0
    for p in params:
        analytic = p.grad if p.grad is not None else np.zeros_like(p.data)
        coords = None
        if max_coords is not None and p.size > max_coords:
            rng = rng or np.random.default_rng(0)
            flat = rng.choice(p.size, max_coords, replace=False)
            coords = [np.unravel_index(i, p.shape) for i in flat]
        numeric = numerical_grad(f, p, eps, coords, guard)
        worst = max(worst, relative_error(analytic, numeric, floor))
    return worst
