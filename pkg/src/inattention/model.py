"""Decoder-only stack for dense attention and InAttention.

Both variants share every tensor except ``normn``, the extra per-layer
LayerNorm that InAttention applies to the initial states before projecting
keys and values.
"""

from __future__ import annotations

from dataclasses import dataclass, field, fields

import numpy as np

from . import layers as ly
from . import tensor as tn
from .layers import AttentionParams, LayerNormParams, MlpParams, RopeConfig
from .masks import MaskSpec
from .tensor import Rng, Tensor

VARIANTS = ("dense", "inattention")
DTYPES = {"float32": np.float32, "float64": np.float64}


@dataclass
class ModelConfig:
    variant: str = "dense"
    d_model: int = 128
    mlp_factor: int = 4
    n_layers: int = 4
    n_heads: int = 4
    vocab_size: int = 257
    rope_base: float = 10000.0
    rotary_dim: int | None = None
    ln_eps: float = 1e-5
    dtype: str = "float32"
    init_std: float = 0.02
    tie_embeddings: bool = False

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"variant must be one of {VARIANTS}, got {self.variant!r}")
        if self.dtype not in DTYPES:
            raise ValueError(f"dtype must be one of {tuple(DTYPES)}, got {self.dtype!r}")
        for name in ("d_model", "mlp_factor", "n_layers", "n_heads", "vocab_size"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.d_model % self.n_heads:
            raise ValueError(f"d_model={self.d_model} not divisible by n_heads={self.n_heads}")
        self.rope.dim_for(self.head_dim)

    @property
    def head_dim(self) -> int:
        return self.d_model // self.n_heads

    @property
    def rope(self) -> RopeConfig:
        return RopeConfig(self.rope_base, self.rotary_dim)

    @property
    def np_dtype(self):
        return DTYPES[self.dtype]

    def to_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}

    @classmethod
    def from_dict(cls, data: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**data)

    def with_variant(self, variant: str) -> "ModelConfig":
        return ModelConfig.from_dict({**self.to_dict(), "variant": variant})


@dataclass
class LayerParams:
    ln_attn: LayerNormParams
    attn: AttentionParams
    ln_mlp: LayerNormParams
    mlp: MlpParams
    normn: LayerNormParams | None = None


@dataclass
class ModelParams:
    config: ModelConfig
    embedding: Tensor
    layers: list[LayerParams]
    ln_final: LayerNormParams
    decoder: Tensor | None = None  # None when tied to the embedding

    def __post_init__(self):
        for i, lp in enumerate(self.layers):
            if (lp.normn is not None) != (self.config.variant == "inattention"):
                raise ValueError(f"layer {i}: normn must be present exactly for the inattention variant")

    def named_tensors(self) -> list[tuple[str, Tensor]]:
        """Every trainable tensor under a stable dotted name, in canonical order."""
        out: list[tuple[str, Tensor]] = [("embedding", self.embedding)]
        for i, lp in enumerate(self.layers):
            pre = f"layers.{i}."
            out += [(pre + "ln_attn.gain", lp.ln_attn.gain), (pre + "ln_attn.bias", lp.ln_attn.bias)]
            if lp.normn is not None:
                out += [(pre + "normn.gain", lp.normn.gain), (pre + "normn.bias", lp.normn.bias)]
            a = lp.attn
            for nm in ("w_q", "b_q", "w_k", "b_k", "w_v", "b_v", "w_o", "b_o"):
                out.append((pre + "attn." + nm, getattr(a, nm)))
            out += [(pre + "ln_mlp.gain", lp.ln_mlp.gain), (pre + "ln_mlp.bias", lp.ln_mlp.bias)]
            for nm in ("w_in", "b_in", "w_out", "b_out"):
                out.append((pre + "mlp." + nm, getattr(lp.mlp, nm)))
        out += [("ln_final.gain", self.ln_final.gain), ("ln_final.bias", self.ln_final.bias)]
        if self.decoder is not None:
            out.append(("decoder", self.decoder))
        return out

    def parameters(self) -> list[Tensor]:
        return [t for _, t in self.named_tensors()]

    def n_params(self) -> int:
        return sum(t.size for t in self.parameters())

    def zero_grad(self) -> None:
        for t in self.parameters():
            t.grad = None

    @classmethod
    def from_named(cls, config: ModelConfig, arrays: dict[str, np.ndarray]) -> "ModelParams":
        """Rebuild from ``{name: array}``; the name set must match the config exactly."""
        dt = config.np_dtype

        def take(name: str) -> Tensor:
            if name not in arrays:
                raise KeyError(f"missing tensor {name!r}")
            return Tensor(np.array(arrays[name], dtype=dt), requires_grad=True)

        def ln(name: str) -> LayerNormParams:
            return LayerNormParams(take(name + ".gain"), take(name + ".bias"), config.ln_eps)

        layer_list = []
        for i in range(config.n_layers):
            pre = f"layers.{i}."
            attn = AttentionParams(
                *(take(pre + "attn." + nm) for nm in ("w_q", "b_q", "w_k", "b_k", "w_v", "b_v", "w_o", "b_o")),
                n_heads=config.n_heads,
            )
            mlp_p = MlpParams(*(take(pre + "mlp." + nm) for nm in ("w_in", "b_in", "w_out", "b_out")))
            normn = ln(pre + "normn") if config.variant == "inattention" else None
            layer_list.append(LayerParams(ln(pre + "ln_attn"), attn, ln(pre + "ln_mlp"), mlp_p, normn))
        params = cls(
            config,
            take("embedding"),
            layer_list,
            ln("ln_final"),
            None if config.tie_embeddings else take("decoder"),
        )
        expected = {n for n, _ in params.named_tensors()}
        extra = set(arrays) - expected
        if extra:
            raise KeyError(f"unexpected tensors {sorted(extra)}")
        for name, t in params.named_tensors():
            if t.shape != _expected_shape(config, name):
                raise ValueError(f"tensor {name!r} has shape {t.shape}, expected {_expected_shape(config, name)}")
        return params

    def copy(self) -> "ModelParams":
        return ModelParams.from_named(self.config, {n: t.data for n, t in self.named_tensors()})


def _expected_shape(cfg: ModelConfig, name: str) -> tuple[int, ...]:
    d, h, V = cfg.d_model, cfg.mlp_factor * cfg.d_model, cfg.vocab_size
    leaf = name.rsplit(".", 1)[-1]
    if name == "embedding":
        return (V, d)
    if name == "decoder":
        return (d, V)
    return {
        "gain": (d,), "bias": (d,),
        "w_q": (d, d), "w_k": (d, d), "w_v": (d, d), "w_o": (d, d),
        "b_q": (d,), "b_k": (d,), "b_v": (d,), "b_o": (d,),
        "w_in": (d, h), "b_in": (h,), "w_out": (h, d), "b_out": (d,),
    }[leaf]


def init_params(config: ModelConfig, seed: int) -> ModelParams:
    """Normal(0, init_std) weights, zero biases, unit LayerNorm gains.

    Random draws happen in the same order for both variants, so a dense and
    an InAttention model built from one seed share every common tensor.
    """
    rng = Rng(seed)
    dt = config.np_dtype
    d, h, V, std = config.d_model, config.mlp_factor * config.d_model, config.vocab_size, config.init_std

    def w(*shape):
        return Tensor(rng.normal(shape, std, dt), requires_grad=True)

    def zeros(n):
        return Tensor(np.zeros(n, dt), requires_grad=True)

    embedding = w(V, d)
    layer_list = []
    for _ in range(config.n_layers):
        attn = AttentionParams(w(d, d), zeros(d), w(d, d), zeros(d), w(d, d), zeros(d), w(d, d), zeros(d), config.n_heads)
        mlp_p = MlpParams(w(d, h), zeros(h), w(h, d), zeros(d))
        normn = LayerNormParams.identity(d, config.ln_eps, dt) if config.variant == "inattention" else None
        layer_list.append(
            LayerParams(LayerNormParams.identity(d, config.ln_eps, dt), attn, LayerNormParams.identity(d, config.ln_eps, dt), mlp_p, normn)
        )
    decoder = None if config.tie_embeddings else w(d, V)
    return ModelParams(config, embedding, layer_list, LayerNormParams.identity(d, config.ln_eps, dt), decoder)


def tensor_names(config: ModelConfig) -> list[str]:
    """Canonical tensor names for ``config``, in the order of ``ModelParams.named_tensors``."""
    names = ["embedding"]
    for i in range(config.n_layers):
        pre = f"layers.{i}."
        names += [pre + "ln_attn.gain", pre + "ln_attn.bias"]
        if config.variant == "inattention":
            names += [pre + "normn.gain", pre + "normn.bias"]
        names += [pre + "attn." + nm for nm in ("w_q", "b_q", "w_k", "b_k", "w_v", "b_v", "w_o", "b_o")]
        names += [pre + "ln_mlp.gain", pre + "ln_mlp.bias"]
        names += [pre + "mlp." + nm for nm in ("w_in", "b_in", "w_out", "b_out")]
    names += ["ln_final.gain", "ln_final.bias"]
    if not config.tie_embeddings:
        names.append("decoder")
    return names


def param_breakdown(config: ModelConfig) -> dict[str, int]:
    d, f, L, V = config.d_model, config.mlp_factor, config.n_layers, config.vocab_size
    out = {
        "embedding": V * d,
        "attention": L * 4 * (d * d + d),
        "mlp": L * (2 * f * d * d + f * d + d),
        "layer_norms": L * 2 * 2 * d + 2 * d,
        "normn": L * 2 * d if config.variant == "inattention" else 0,
        "decoder": 0 if config.tie_embeddings else d * V,
    }
    return out


def param_count(config: ModelConfig) -> int:
    """Closed-form count of trainable scalars."""
    return sum(param_breakdown(config).values())


# ---------------------------------------------------------------- forward


def _tokens(params: ModelParams, tokens) -> np.ndarray:
    ids = np.asarray(tokens, dtype=np.int64)
    if ids.ndim not in (1, 2) or ids.shape[-1] < 1:
        raise ValueError(f"tokens must be a non-empty [T] or [B, T] array, got shape {ids.shape}")
    V = params.config.vocab_size
    if ids.min() < 0 or ids.max() >= V:
        raise IndexError(f"token id out of range [0, {V})")
    return ids


def _decode(params: ModelParams, x: Tensor) -> Tensor:
    h = ly.layer_norm(x, params.ln_final)
    w = params.decoder if params.decoder is not None else tn.transpose(params.embedding)
    return tn.matmul(h, w)


def _mlp_residual(x: Tensor, lp: LayerParams) -> Tensor:
    return tn.add(x, ly.mlp(ly.layer_norm(x, lp.ln_mlp), lp.mlp))


def forward_full(params: ModelParams, tokens) -> Tensor:
    """Logits for every position, [T, V] (or [B, T, V] for batched tokens)."""
    ids = _tokens(params, tokens)
    cfg = params.config
    T = ids.shape[-1]
    y = tn.embedding(params.embedding, ids)
    x = y
    mask = MaskSpec("dense", T)
    for lp in params.layers:
        h = ly.layer_norm(x, lp.ln_attn)
        if cfg.variant == "dense":
            a = ly.dense_self_attention(h, lp.attn, cfg.rope, mask)
        else:
            a = ly.in_attention(h, y, lp.attn, lp.normn, cfg.rope, mask)
        x = _mlp_residual(tn.add(x, a), lp)
    return _decode(params, x)


def forward_last(params: ModelParams, tokens) -> Tensor:
    """Logits of the final position, [V] (or [B, V]).

    The InAttention path runs a single residual tower over the last position;
    keys and values come from the initial states of all positions, so no
    other hidden state is ever computed.
    """
    ids = _tokens(params, tokens)
    cfg = params.config
    if cfg.variant == "dense":
        logits = forward_full(params, ids)
        return tn.getitem(logits, (..., -1, slice(None)))
    T = ids.shape[-1]
    y = tn.embedding(params.embedding, ids)
    x = tn.getitem(y, (..., slice(T - 1, T), slice(None)))
    mask = MaskSpec("inattention", T)
    for lp in params.layers:
        h = ly.layer_norm(x, lp.ln_attn)
        x = _mlp_residual(tn.add(x, ly.in_attention(h, y, lp.attn, lp.normn, cfg.rope, mask)), lp)
    return tn.getitem(_decode(params, x), (..., 0, slice(None)))


# ---------------------------------------------------------------- decoding

POLICIES = ("kv", "embeddings")


@dataclass
class DecodeCache:
    """Per-sequence decode state.

    Dense models keep per-layer rotated keys and values (policy ``kv``).
    InAttention keeps either just the initial embeddings (``embeddings``,
    keys/values recomputed each step) or per-layer keys/values of the
    initial states (``kv``).
    """

    variant: str
    policy: str
    length: int = 0
    keys: list[Tensor | None] = field(default_factory=list)
    values: list[Tensor | None] = field(default_factory=list)
    embeddings: Tensor | None = None

    def tensors(self) -> list[Tensor]:
        out = [t for t in self.keys + self.values if t is not None]
        if self.embeddings is not None:
            out.append(self.embeddings)
        return out

    def nbytes(self) -> int:
        return sum(t.data.nbytes for t in self.tensors())


def new_cache(config: ModelConfig, policy: str | None = None) -> DecodeCache:
    if policy is None:
        policy = "kv" if config.variant == "dense" else "embeddings"
    if policy not in POLICIES:
        raise ValueError(f"cache policy must be one of {POLICIES}, got {policy!r}")
    if config.variant == "dense" and policy != "kv":
        raise ValueError("dense models only support the kv cache policy")
    n = config.n_layers if policy == "kv" else 0
    return DecodeCache(config.variant, policy, 0, [None] * n, [None] * n)


def _append(buf: Tensor | None, new: Tensor, axis: int) -> Tensor:
    return new if buf is None else tn.concat([buf, new], axis=axis)


def decode_step(params: ModelParams, cache: DecodeCache, token: int) -> tuple[Tensor, DecodeCache]:
    """Consume one token; return logits [V] for the next position and the updated cache."""
    cfg = params.config
    if cache.variant != cfg.variant:
        raise ValueError(f"cache is for {cache.variant!r} models, params are {cfg.variant!r}")
    ids = _tokens(params, [token])
    t = cache.length
    pos = np.array([t])
    with tn.no_grad():
        y_t = tn.embedding(params.embedding, ids)  # [1, d]
        x = y_t
        if cache.policy == "embeddings":
            cache.embeddings = _append(cache.embeddings, y_t, 0)
        for i, lp in enumerate(params.layers):
            h = ly.layer_norm(x, lp.ln_attn)
            q = ly.project_queries(h, lp.attn, cfg.rope, pos)
            if cfg.variant == "dense":
                k_new, v_new = ly.project_keys_values(h, lp.attn, cfg.rope, pos)
            elif cache.policy == "kv":
                k_new, v_new = ly.project_keys_values(ly.layer_norm(y_t, lp.normn), lp.attn, cfg.rope, pos)
            else:
                k_new = v_new = None
            if k_new is not None:
                cache.keys[i] = _append(cache.keys[i], k_new, -2)
                cache.values[i] = _append(cache.values[i], v_new, -2)
                k, v = cache.keys[i], cache.values[i]
            else:
                src = ly.layer_norm(cache.embeddings, lp.normn)
                k, v = ly.project_keys_values(src, lp.attn, cfg.rope, np.arange(t + 1))
            x = _mlp_residual(tn.add(x, ly.attend(q, k, v, lp.attn, None)), lp)
        logits = tn.getitem(_decode(params, x), 0)
    cache.length = t + 1
    return logits, cache


@dataclass
class Sampler:
    mode: str = "greedy"
    temperature: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.mode not in ("greedy", "temperature"):
            raise ValueError(f"sampler mode must be greedy or temperature, got {self.mode!r}")
        if self.mode == "temperature" and self.temperature <= 0:
            raise ValueError("temperature must be > 0")
        self._rng = Rng(self.seed)

    def sample(self, logits: np.ndarray) -> int:
        z = np.asarray(logits, dtype=np.float64)
        if self.mode == "greedy":
            return int(np.argmax(z))
        z = z / self.temperature
        p = np.exp(z - z.max())
        p /= p.sum()
        u = float(self._rng.uniform())
        return int(min(np.searchsorted(np.cumsum(p), u, side="right"), len(p) - 1))


def generate(
    params: ModelParams,
    prompt,
    n_tokens: int,
    sampler: Sampler | None = None,
    policy: str | None = None,
) -> list[int]:
    """Extend ``prompt`` by ``n_tokens`` sampled tokens using cached decoding."""
    if n_tokens < 0:
        raise ValueError("n_tokens must be >= 0")
    out = [int(t) for t in prompt]
    if n_tokens == 0:
        return out
    if not out:
        raise ValueError("prompt must contain at least one token")
    sampler = sampler or Sampler()
    cache = new_cache(params.config, policy)
    for tok in out:
        logits, cache = decode_step(params, cache, tok)
    for i in range(n_tokens):
        nxt = sampler.sample(logits.data)
        out.append(nxt)
        if i + 1 < n_tokens:
            logits, cache = decode_step(params, cache, nxt)
    return out
