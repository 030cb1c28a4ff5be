"""Transformer building blocks: LayerNorm, RoPE, MLP, dense attention and InAttention.

Activations are laid out ``(..., T, d)`` with optional leading batch axes.
Weight matrices are stored ``[in, out]`` so projections are ``x @ w + b``.
"""

from __future__ import annotations

import contextlib
import math
from dataclasses import dataclass, field
from typing import Iterator

import numpy as np

from . import tensor as tn
from .masks import MaskSpec, causal_visibility
from .tensor import Tensor


@dataclass
class LayerNormParams:
    gain: Tensor
    bias: Tensor
    eps: float = 1e-5

    def __post_init__(self):
        if self.gain.shape != self.bias.shape or self.gain.ndim != 1:
            raise ValueError(f"gain {self.gain.shape} and bias {self.bias.shape} must be equal 1-d shapes")
        if self.eps <= 0:
            raise ValueError("eps must be positive")

    @classmethod
    def identity(cls, d: int, eps: float = 1e-5, dtype=np.float32) -> "LayerNormParams":
        return cls(Tensor(np.ones(d, dtype), requires_grad=True), Tensor(np.zeros(d, dtype), requires_grad=True), eps)

    def copy(self) -> "LayerNormParams":
        return LayerNormParams(
            Tensor(self.gain.data.copy(), requires_grad=True),
            Tensor(self.bias.data.copy(), requires_grad=True),
            self.eps,
        )


@dataclass
class AttentionParams:
    w_q: Tensor
    b_q: Tensor
    w_k: Tensor
    b_k: Tensor
    w_v: Tensor
    b_v: Tensor
    w_o: Tensor
    b_o: Tensor
    n_heads: int

    def __post_init__(self):
        d = self.w_q.shape[0]
        if d % self.n_heads:
            raise ValueError(f"embedding dim {d} not divisible by {self.n_heads} heads")

    @property
    def d(self) -> int:
        return self.w_q.shape[0]

    @property
    def head_dim(self) -> int:
        return self.d // self.n_heads


@dataclass
class MlpParams:
    w_in: Tensor
    b_in: Tensor
    w_out: Tensor
    b_out: Tensor


@dataclass(frozen=True)
class RopeConfig:
    base: float = 10000.0
    rotary_dim: int | None = None  # None rotates the full head

    def dim_for(self, head_dim: int) -> int:
        r = head_dim if self.rotary_dim is None else self.rotary_dim
        if r % 2 or r > head_dim or r < 0:
            raise ValueError(f"rotary_dim must be even and <= head_dim ({head_dim}), got {r}")
        return r


# ---------------------------------------------------------------- pair counting


@dataclass
class PairCounter:
    """Records the number of (query, key) scores computed per attention call."""

    calls: list[int] = field(default_factory=list)

    @property
    def total(self) -> int:
        return sum(self.calls)


_COUNTERS: list[PairCounter] = []


@contextlib.contextmanager
def count_pairs() -> Iterator[PairCounter]:
    counter = PairCounter()
    _COUNTERS.append(counter)
    try:
        yield counter
    finally:
        _COUNTERS.remove(counter)


def _record_pairs(n: int) -> None:
    for c in _COUNTERS:
        c.calls.append(int(n))


# ---------------------------------------------------------------- blocks


def layer_norm(x: Tensor, p: LayerNormParams) -> Tensor:
    return tn.layer_norm(x, p.gain, p.bias, p.eps)


def rope_tables(positions, head_dim: int, rope: RopeConfig, dtype=np.float64) -> tuple[np.ndarray, np.ndarray]:
    """cos/sin of shape [len(positions), head_dim // 2]; unrotated pairs get angle 0."""
    pos = np.asarray(positions, dtype=np.float64)
    if pos.ndim != 1:
        raise ValueError("positions must be a 1-d sequence")
    if pos.size and pos.min() < 0:
        raise ValueError("positions must be non-negative")
    r = rope.dim_for(head_dim)
    inv_freq = np.zeros(head_dim // 2)
    inv_freq[: r // 2] = rope.base ** (-np.arange(0, r, 2, dtype=np.float64) / r)
    angles = pos[:, None] * inv_freq[None, :]
    return np.cos(angles).astype(dtype), np.sin(angles).astype(dtype)


def rope_apply(x: Tensor, positions, rope: RopeConfig) -> Tensor:
    """Rotary embedding of ``x`` laid out [..., T, H, d_k]."""
    pos = np.asarray(positions)
    if pos.size > 1 and np.any(np.diff(pos) <= 0):
        raise ValueError("positions must be strictly increasing")
    if x.shape[-3] != pos.size:
        raise ValueError(f"{pos.size} positions for sequence length {x.shape[-3]}")
    cos, sin = rope_tables(pos, x.shape[-1], rope, x.dtype)
    return tn.rotate_pairs(x, cos[:, None, :], sin[:, None, :])


def _rope_heads(x: Tensor, positions, rope: RopeConfig) -> Tensor:
    # x is [..., H, T, d_k]
    cos, sin = rope_tables(positions, x.shape[-1], rope, x.dtype)
    return tn.rotate_pairs(x, cos, sin)


def sdpa(q: Tensor, k: Tensor, v: Tensor, visible: np.ndarray | None = None, scale: float | None = None) -> Tensor:
    """softmax(q k^T * scale, masked) v over the last two axes."""
    if k.shape[-2] != v.shape[-2]:
        raise tn.ShapeError(f"keys {k.shape} and values {v.shape} differ in length")
    if scale is None:
        scale = 1.0 / math.sqrt(q.shape[-1])
    _record_pairs(q.shape[-2] * k.shape[-2] if visible is None else int(np.count_nonzero(visible)))
    scores = tn.scale(tn.matmul(q, tn.swapaxes(k, -1, -2)), scale)
    return tn.matmul(tn.softmax_rows(scores, visible), v)


def split_heads(x: Tensor, n_heads: int) -> Tensor:
    *lead, T, d = x.shape
    return tn.swapaxes(tn.reshape(x, (*lead, T, n_heads, d // n_heads)), -3, -2)


def merge_heads(x: Tensor) -> Tensor:
    *lead, H, T, dk = x.shape
    return tn.reshape(tn.swapaxes(x, -3, -2), (*lead, T, H * dk))


def project_queries(x: Tensor, p: AttentionParams, rope: RopeConfig, positions) -> Tensor:
    q = split_heads(tn.add(tn.matmul(x, p.w_q), p.b_q), p.n_heads)
    return _rope_heads(q, positions, rope)


def project_keys_values(src: Tensor, p: AttentionParams, rope: RopeConfig, positions) -> tuple[Tensor, Tensor]:
    """Rotated keys and values, each [..., H, T, d_k]."""
    k = split_heads(tn.add(tn.matmul(src, p.w_k), p.b_k), p.n_heads)
    v = split_heads(tn.add(tn.matmul(src, p.w_v), p.b_v), p.n_heads)
    return _rope_heads(k, positions, rope), v


def attend(q: Tensor, k: Tensor, v: Tensor, p: AttentionParams, visible: np.ndarray | None) -> Tensor:
    out = merge_heads(sdpa(q, k, v, visible))
    return tn.add(tn.matmul(out, p.w_o), p.b_o)


def _mask_for(mask: MaskSpec | None, T: int, allowed: tuple[str, ...]) -> MaskSpec:
    if mask is None:
        return MaskSpec("dense", T)
    if mask.kind not in allowed:
        raise ValueError(f"mask kind {mask.kind!r} not valid here; expected {allowed}")
    if mask.T != T:
        raise ValueError(f"mask built for T={mask.T} but sequence has T={T}")
    return mask


def dense_self_attention(x: Tensor, p: AttentionParams, rope: RopeConfig, mask: MaskSpec | None = None) -> Tensor:
    """Causal (or sliding-window) multi-head attention with Q, K, V all from ``x``."""
    T = x.shape[-2]
    mask = _mask_for(mask, T, ("dense", "sliding"))
    pos = np.arange(T)
    q = project_queries(x, p, rope, pos)
    k, v = project_keys_values(x, p, rope, pos)
    return attend(q, k, v, p, mask.visible())


def in_attention(
    x_hidden: Tensor,
    y_initial: Tensor,
    p: AttentionParams,
    normn: LayerNormParams,
    rope: RopeConfig,
    mask: MaskSpec | None = None,
) -> Tensor:
    """Queries from hidden states, keys/values from layer-normed initial states.

    With a ``dense`` mask ``x_hidden`` and ``y_initial`` have the same length.
    With an ``inattention`` mask ``x_hidden`` holds only the final position's
    row and ``y_initial`` all ``T`` rows.
    """
    T = y_initial.shape[-2]
    mask = _mask_for(mask, T, ("dense", "inattention"))
    q_pos = mask.query_positions
    if x_hidden.shape[-2] != q_pos.size or x_hidden.shape[-1] != y_initial.shape[-1]:
        raise tn.ShapeError(
            f"hidden states {x_hidden.shape} do not match initial states {y_initial.shape} under a {mask.kind} mask"
        )
    q = project_queries(x_hidden, p, rope, q_pos)
    k, v = project_keys_values(layer_norm(y_initial, normn), p, rope, np.arange(T))
    return attend(q, k, v, p, causal_visibility(q_pos, np.arange(T)))


def mlp(x: Tensor, p: MlpParams) -> Tensor:
    h = tn.gelu(tn.add(tn.matmul(x, p.w_in), p.b_in))
    return tn.add(tn.matmul(h, p.w_out), p.b_out)
