"""Dense tensors with tape-based reverse-mode differentiation.

Arrays are numpy buffers of a single float width per run (float32 for
training and benchmarks, float64 for gradient checks). Every public op
checks its output for NaN/Inf and raises :class:`NonFiniteError` instead of
propagating it.

Gradients are recorded only when grad mode is on and at least one input
requires grad. :func:`backward` walks the recorded graph in a fixed
topological order, so accumulation order is deterministic.
"""

from __future__ import annotations

import contextlib
import math
import weakref
from typing import Callable, Iterable, Iterator, Sequence

import numpy as np
from scipy.special import erf

__all__ = [
    "Tensor",
    "Rng",
    "MemoryTracker",
    "NonFiniteError",
    "DegenerateMaskError",
    "ShapeError",
    "no_grad",
    "is_grad_enabled",
    "tensor",
    "matmul",
    "add",
    "sub",
    "mul",
    "scale",
    "transpose",
    "swapaxes",
    "reshape",
    "getitem",
    "concat",
    "tsum",
    "mean",
    "gelu",
    "softmax_rows",
    "layer_norm",
    "rotate_pairs",
    "embedding",
    "cross_entropy",
    "backward",
    "grad_check",
]


class ShapeError(ValueError):
    """Operand shapes are incompatible."""


class NonFiniteError(ArithmeticError):
    """An operation produced NaN or Inf."""


class DegenerateMaskError(ValueError):
    """A softmax row has no visible entries."""


_GRAD_ENABLED = True
_TRACKER: "MemoryTracker | None" = None


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    """Disable graph recording inside the block."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def is_grad_enabled() -> bool:
    return _GRAD_ENABLED


class Rng:
    """Seeded PCG64 stream. Same seed gives the same draws on every platform."""

    algorithm = "PCG64"

    def __init__(self, seed: int):
        self.seed = int(seed) & 0xFFFFFFFFFFFFFFFF
        self._gen = np.random.Generator(np.random.PCG64(self.seed))
        self.draws = 0

    def normal(self, shape: Sequence[int], std: float = 1.0, dtype=np.float64) -> np.ndarray:
        out = self._gen.standard_normal(tuple(shape), dtype=np.float64)
        self.draws += out.size
        return (out * std).astype(dtype, copy=False)

    def uniform(self, size: int | None = None) -> float | np.ndarray:
        self.draws += 1 if size is None else size
        return self._gen.random(size)

    def permutation(self, n: int) -> np.ndarray:
        self.draws += n
        return self._gen.permutation(n)

    def integers(self, low: int, high: int, size: int | Sequence[int] | None = None):
        self.draws += 1 if size is None else int(np.prod(size))
        return self._gen.integers(low, high, size=size)

    @property
    def state(self) -> dict:
        return self._gen.bit_generator.state


class MemoryTracker:
    """Counts live bytes of tensor data buffers created while active.

    Views are attributed to their root buffer, which is counted once for as
    long as any tracked tensor refers to it. One tracker may be active at a
    time; nesting is rejected.
    """

    def __init__(self) -> None:
        self.live = 0
        self.peak = 0
        self._roots: dict[int, list[int]] = {}

    def __enter__(self) -> "MemoryTracker":
        global _TRACKER
        if _TRACKER is not None:
            raise RuntimeError("a MemoryTracker is already active")
        _TRACKER = self
        return self

    def __exit__(self, *exc) -> None:
        global _TRACKER
        _TRACKER = None

    def adopt(self, tensors: Iterable["Tensor"]) -> None:
        """Count tensors that were allocated before the scope opened."""
        for t in tensors:
            self._register(t)

    def _register(self, t: "Tensor") -> None:
        root = t.data
        while isinstance(root.base, np.ndarray):
            root = root.base
        key = id(root)
        entry = self._roots.get(key)
        if entry is None:
            self._roots[key] = [root.nbytes, 1]
            self.live += root.nbytes
            if self.live > self.peak:
                self.peak = self.live
        else:
            entry[1] += 1
        weakref.finalize(t, self._release, key)

    def _release(self, key: int) -> None:
        entry = self._roots.get(key)
        if entry is None:
            return
        entry[1] -= 1
        if entry[1] == 0:
            self.live -= entry[0]
            del self._roots[key]


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "op", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, dtype=None, _check: bool = True):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype.kind != "f":
            arr = arr.astype(np.float64)
        if arr.ndim == 0:
            arr = arr.reshape(())
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None
        self.op = "leaf"
        if _check:
            _check_finite(arr, "tensor")
        if _TRACKER is not None:
            _TRACKER._register(self)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _raise_not_scalar(self)

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data, _check=False)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_as_tensor(other, self.dtype), self)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, other)
        return mul(self, other)

    __rmul__ = __mul__

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

    @property
    def T(self):
        return swapaxes(self, -1, -2)

    def sum(self, axis=None, keepdims: bool = False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return mean(self, axis, keepdims)

    def backward(self) -> None:
        backward(self)


def _raise_not_scalar(t: Tensor):
    raise ValueError(f"expected a single-element tensor, got shape {t.shape}")


def tensor(data, requires_grad: bool = False, dtype=None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, dtype=dtype)


def _as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype))


def _check_finite(arr: np.ndarray, name: str) -> None:
    if not np.isfinite(arr).all():
        raise NonFiniteError(f"{name} produced non-finite values")


def _make(data: np.ndarray, parents: tuple[Tensor, ...], grad_fn: Callable, op: str) -> Tensor:
    """Wrap an op result and record it on the tape when needed."""
    _check_finite(data, op)
    out = Tensor(data, _check=False)
    out.op = op
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = grad_fn
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# ---------------------------------------------------------------- elementwise


def add(a, b) -> Tensor:
    a = _as_tensor(a)
    b = _as_tensor(b, a.dtype)
    try:
        out = a.data + b.data
    except ValueError:
        raise ShapeError(f"cannot add shapes {a.shape} and {b.shape}") from None

    def grad_fn(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make(out, (a, b), grad_fn, "add")


def sub(a, b) -> Tensor:
    a = _as_tensor(a)
    b = _as_tensor(b, a.dtype)
    try:
        out = a.data - b.data
    except ValueError:
        raise ShapeError(f"cannot subtract shapes {a.shape} and {b.shape}") from None

    def grad_fn(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _make(out, (a, b), grad_fn, "sub")


def mul(a, b) -> Tensor:
    a = _as_tensor(a)
    b = _as_tensor(b, a.dtype)
    try:
        out = a.data * b.data
    except ValueError:
        raise ShapeError(f"cannot multiply shapes {a.shape} and {b.shape}") from None

    def grad_fn(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _make(out, (a, b), grad_fn, "mul")


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)

    def grad_fn(g):
        return (g * c,)

    return _make(a.data * c, (a,), grad_fn, "scale")


def gelu(a: Tensor) -> Tensor:
    """Exact GELU, x * Phi(x)."""
    x = a.data
    cdf = 0.5 * (1.0 + erf(x * (1.0 / math.sqrt(2.0))))
    out = x * cdf

    def grad_fn(g):
        pdf = np.exp(-0.5 * x * x) * (1.0 / math.sqrt(2.0 * math.pi))
        return (g * (cdf + x * pdf),)

    return _make(out.astype(x.dtype, copy=False), (a,), grad_fn, "gelu")


# ---------------------------------------------------------------- linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes, broadcasting leading axes."""
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul dimension mismatch: {a.shape} @ {b.shape}")
    flat = b.ndim == 2 and a.ndim > 2
    try:
        if flat:
            # one GEMM instead of a loop over leading axes
            out = (a.data.reshape(-1, a.shape[-1]) @ b.data).reshape(*a.shape[:-1], b.shape[-1])
        else:
            out = np.matmul(a.data, b.data)
    except ValueError:
        raise ShapeError(f"matmul dimension mismatch: {a.shape} @ {b.shape}") from None

    def grad_fn(g):
        if b.ndim == 2:
            g2 = g.reshape(-1, g.shape[-1])
            ga = (g2 @ b.data.T).reshape(a.shape)
            gb = a.data.reshape(-1, a.shape[-1]).T @ g2
        else:
            ga = _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape)
            gb = _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape)
        return _unbroadcast(ga, a.shape), gb

    return _make(out, (a, b), grad_fn, "matmul")


def transpose(a: Tensor, axes: Sequence[int] | None = None) -> Tensor:
    axes = tuple(reversed(range(a.ndim))) if axes is None else tuple(axes)
    inv = tuple(np.argsort(axes))

    def grad_fn(g):
        return (np.transpose(g, inv),)

    return _make(np.transpose(a.data, axes), (a,), grad_fn, "transpose")


def swapaxes(a: Tensor, i: int, j: int) -> Tensor:
    def grad_fn(g):
        return (np.swapaxes(g, i, j),)

    return _make(np.swapaxes(a.data, i, j), (a,), grad_fn, "swapaxes")


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    try:
        out = a.data.reshape(tuple(shape))
    except ValueError:
        raise ShapeError(f"cannot reshape {a.shape} to {tuple(shape)}") from None

    def grad_fn(g):
        return (g.reshape(a.shape),)

    return _make(out, (a,), grad_fn, "reshape")


def getitem(a: Tensor, idx) -> Tensor:
    out = a.data[idx]
    basic = _is_basic_index(idx)

    def grad_fn(g):
        ga = np.zeros_like(a.data)
        if basic:
            ga[idx] = g
        else:
            np.add.at(ga, idx, g)
        return (ga,)

    return _make(out, (a,), grad_fn, "getitem")


def _is_basic_index(idx) -> bool:
    items = idx if isinstance(idx, tuple) else (idx,)
    return all(isinstance(i, (slice, int, type(None), type(Ellipsis))) for i in items)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = list(tensors)
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError:
        raise ShapeError(f"cannot concatenate shapes {[t.shape for t in tensors]} on axis {axis}") from None
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def grad_fn(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _make(out, tuple(tensors), grad_fn, "concat")


# ---------------------------------------------------------------- reductions


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = np.asarray(a.data.sum(axis=axis, keepdims=keepdims))

    def grad_fn(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _make(out, (a,), grad_fn, "sum")


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        n = a.size
    else:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        n = int(np.prod([a.shape[i] for i in axes]))
    out = np.asarray(a.data.mean(axis=axis, keepdims=keepdims))

    def grad_fn(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / n, a.shape).copy(),)

    return _make(out, (a,), grad_fn, "mean")


# ---------------------------------------------------------------- fused primitives


def softmax_rows(x: Tensor, mask: np.ndarray | None = None) -> Tensor:
    """Max-subtracted softmax over the last axis.

    ``mask`` is a boolean array broadcastable to ``x`` with True marking
    visible entries. Hidden entries come out exactly zero.
    """
    data = x.data
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        if not mask.any(axis=-1).all():
            raise DegenerateMaskError("softmax row has every entry masked")
        data = np.where(mask, data, -np.inf)
    m = data.max(axis=-1, keepdims=True)
    e = data - m
    np.exp(e, out=e)
    e /= e.sum(axis=-1, keepdims=True)

    def grad_fn(g):
        gx = g * e
        gx -= e * gx.sum(axis=-1, keepdims=True)
        return (gx,)

    return _make(e, (x,), grad_fn, "softmax")


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean and unit variance, then affine."""
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise ShapeError(f"layer_norm params {gain.shape}/{bias.shape} do not match last dim {d}")
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = xc * rstd
    out = xhat * gain.data + bias.data

    def grad_fn(g):
        red = tuple(range(g.ndim - 1))
        g_gain = (g * xhat).sum(axis=red)
        g_bias = g.sum(axis=red)
        gh = g * gain.data
        gx = rstd * (gh - gh.mean(axis=-1, keepdims=True) - xhat * (gh * xhat).mean(axis=-1, keepdims=True))
        return gx, g_gain, g_bias

    return _make(out.astype(xd.dtype, copy=False), (x, gain, bias), grad_fn, "layer_norm")


def rotate_pairs(x: Tensor, cos: np.ndarray, sin: np.ndarray) -> Tensor:
    """Rotate adjacent pairs (2i, 2i+1) of the last axis by per-pair angles.

    ``cos``/``sin`` broadcast against ``x[..., ::2]``.
    """
    if x.shape[-1] % 2:
        raise ShapeError(f"rotate_pairs needs an even last dimension, got {x.shape}")
    xe = x.data[..., 0::2]
    xo = x.data[..., 1::2]
    out = np.empty_like(x.data)
    out[..., 0::2] = xe * cos - xo * sin
    out[..., 1::2] = xe * sin + xo * cos

    def grad_fn(g):
        ge = g[..., 0::2]
        go = g[..., 1::2]
        gx = np.empty_like(g)
        gx[..., 0::2] = ge * cos + go * sin
        gx[..., 1::2] = go * cos - ge * sin
        return (gx,)

    return _make(out, (x,), grad_fn, "rotate_pairs")


def embedding(weight: Tensor, ids: np.ndarray) -> Tensor:
    ids = np.asarray(ids, dtype=np.int64)
    n = weight.shape[0]
    if ids.size and (ids.min() < 0 or ids.max() >= n):
        raise IndexError(f"token id out of range [0, {n})")
    out = weight.data[ids]

    def grad_fn(g):
        gw = np.zeros_like(weight.data)
        np.add.at(gw, ids.reshape(-1), g.reshape(-1, weight.shape[1]))
        return (gw,)

    return _make(out, (weight,), grad_fn, "embedding")


def cross_entropy(logits: Tensor, targets: np.ndarray) -> Tensor:
    """Mean negative log-likelihood of ``targets`` under row-softmax of ``logits``."""
    v = logits.shape[-1]
    z = logits.data.reshape(-1, v)
    t = np.asarray(targets, dtype=np.int64).reshape(-1)
    if t.shape[0] != z.shape[0]:
        raise ShapeError(f"{z.shape[0]} logit rows but {t.shape[0]} targets")
    if t.size and (t.min() < 0 or t.max() >= v):
        raise IndexError(f"target id out of range [0, {v})")
    m = z.max(axis=1, keepdims=True)
    shifted = z - m
    lse = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    logp = shifted - lse
    n = t.shape[0]
    rows = np.arange(n)
    loss = np.asarray(-logp[rows, t].sum() / n, dtype=z.dtype)

    def grad_fn(g):
        p = np.exp(logp)
        p[rows, t] -= 1.0
        p *= g / n
        return (p.reshape(logits.shape),)

    return _make(loss, (logits,), grad_fn, "cross_entropy")


# ---------------------------------------------------------------- backward


def _topo_order(root: Tensor) -> list[Tensor]:
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
        for p in reversed(node._parents):
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every requires_grad leaf."""
    if loss.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise ValueError("loss does not depend on any tensor that requires grad")
    order = _topo_order(loss)
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg


def grad_check(f: Callable[[Tensor], Tensor], point: Tensor | np.ndarray, eps: float = 1e-6) -> float:
    """Worst elementwise relative error between taped and central-difference gradients.

    Relative error is ``|a - n| / max(|a|, |n|, 1e-8)``.
    """
    if not 0.0 < eps <= 1e-2:
        raise ValueError(f"eps must lie in (0, 1e-2], got {eps}")
    base = point.data if isinstance(point, Tensor) else np.asarray(point)
    x = Tensor(base.copy(), requires_grad=True)
    backward(f(x))
    analytic = x.grad
    numeric = np.empty_like(base)
    probe = base.copy()
    with no_grad():
        for i in np.ndindex(base.shape):
            orig = probe[i]
            probe[i] = orig + eps
            hi = f(Tensor(probe)).item()
            probe[i] = orig - eps
            lo = f(Tensor(probe)).item()
            probe[i] = orig
            if not (math.isfinite(hi) and math.isfinite(lo)):
                raise NonFiniteError("grad_check evaluation produced a non-finite value")
            numeric[i] = (hi - lo) / (2.0 * eps)
    return max_relative_error(analytic, numeric)


def max_relative_error(a: np.ndarray, b: np.ndarray, floor: float = 1e-8) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)
    return float((np.abs(a - b) / denom).max()) if a.size else 0.0
