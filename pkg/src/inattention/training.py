"""Next-token training, AdamW with cosine annealing, evaluation sweeps and context-extension finetuning."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator

import numpy as np

from . import tensor as tn
from .data_io import Checkpoint, batchify, save_checkpoint
from .model import ModelParams, forward_full
from .tensor import Tensor

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    lr_init: float = 2e-4
    betas: tuple[float, float] = (0.9, 0.999)
    adam_eps: float = 1e-8
    weight_decay: float = 0.01
    steps: int = 1000
    grad_accumulation_steps: int = 1
    batch_size: int = 8
    context_length: int = 32
    seed: int = 0
    lr_floor: float = 0.0
    checkpoint_every: int = 0  # 0 writes only the final checkpoint
    log_every: int = 100

    def __post_init__(self):
        self.betas = tuple(self.betas)
        if self.lr_init < 0 or self.lr_floor < 0:
            raise ValueError("learning rates must be non-negative")
        if self.steps < 1:
            raise ValueError("steps must be >= 1")
        if self.context_length < 2:
            raise ValueError("context_length must be >= 2")
        if self.grad_accumulation_steps < 1 or self.batch_size < 1:
            raise ValueError("batch_size and grad_accumulation_steps must be >= 1")


@dataclass
class OptimizerState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0

    def as_arrays(self) -> dict[str, np.ndarray]:
        out = {f"optim.m.{k}": a for k, a in self.m.items()}
        out.update({f"optim.v.{k}": a for k, a in self.v.items()})
        return out

    @classmethod
    def from_arrays(cls, arrays: dict[str, np.ndarray], step: int) -> "OptimizerState":
        st = cls(step=step)
        for key, arr in arrays.items():
            if key.startswith("optim.m."):
                st.m[key[len("optim.m."):]] = arr.copy()
            elif key.startswith("optim.v."):
                st.v[key[len("optim.v."):]] = arr.copy()
        return st


@dataclass
class EvalReport:
    rows: list[tuple[int, float, int]]  # (context_length, mean_loss, token_count)
    variant: str = ""
    checkpoint: str = ""

    def loss(self, context_length: int) -> float:
        for cl, value, _ in self.rows:
            if cl == context_length:
                return value
        raise KeyError(context_length)

    def as_dict(self) -> dict[int, float]:
        return {cl: value for cl, value, _ in self.rows}

    def write_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["context_length", "mean_loss", "token_count"])
            for cl, value, n in self.rows:
                w.writerow([cl, repr(value), n])


@dataclass
class TrainResult:
    params: ModelParams
    curve: list[tuple[int, float, float]]  # (step, lr, loss)
    checkpoints: list[Path]
    state: OptimizerState


def next_token_loss(logits: Tensor, tokens) -> Tensor:
    """Mean cross-entropy of rows 0..T-2 against tokens 1..T-1."""
    ids = np.asarray(tokens, dtype=np.int64)
    T = ids.shape[-1]
    if T < 2:
        raise ValueError("next_token_loss needs at least 2 tokens")
    if logits.shape[:-1] != ids.shape:
        raise tn.ShapeError(f"logits {logits.shape} do not match tokens {ids.shape}")
    return tn.cross_entropy(tn.getitem(logits, (..., slice(0, T - 1), slice(None))), ids[..., 1:])


def cosine_lr(step: int, config: TrainConfig, total: int | None = None) -> float:
    total = config.steps if total is None else total
    if not 0 <= step <= total:
        raise ValueError(f"step {step} outside [0, {total}]")
    lo, hi = config.lr_floor, config.lr_init
    return lo + 0.5 * (hi - lo) * (1.0 + math.cos(math.pi * step / total))


def _decays(name: str, arr: np.ndarray) -> bool:
    # matrices decay; LayerNorm gains/biases and projection biases do not
    return arr.ndim >= 2


def adamw_step(
    params: ModelParams | list[tuple[str, Tensor]],
    grads: dict[str, np.ndarray],
    state: OptimizerState,
    lr: float,
    config: TrainConfig,
) -> OptimizerState:
    """One bias-corrected AdamW update, applied in place to the parameter arrays."""
    named = params.named_tensors() if isinstance(params, ModelParams) else list(params)
    b1, b2 = config.betas
    state.step += 1
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    for name, t in named:
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(t.data)
        if g.shape != t.shape:
            raise tn.ShapeError(f"gradient for {name!r} has shape {g.shape}, parameter {t.shape}")
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(t.data)
            state.v[name] = np.zeros_like(t.data)
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        if config.weight_decay and _decays(name, t.data):
            t.data *= 1.0 - lr * config.weight_decay
        denom = np.sqrt(v / c2)
        denom += config.adam_eps
        t.data -= (lr / c1) * m / denom
    return state


def _chunk_stream(ids: np.ndarray, context_length: int, seed: int) -> Iterator[np.ndarray]:
    epoch = 0
    while True:
        chunks = batchify(ids, context_length, seed + epoch)
        if len(chunks) == 0:
            raise ValueError(f"corpus yields no chunks at context length {context_length}")
        yield from chunks
        epoch += 1


def _micro_batches(ids: np.ndarray, config: TrainConfig) -> Iterator[np.ndarray]:
    stream = _chunk_stream(ids, config.context_length, config.seed)
    while True:
        yield np.stack([next(stream) for _ in range(config.batch_size)])


def write_curve(path: str | Path, curve: list[tuple[int, float, float]]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["step", "lr", "loss"])
        for step, lr, loss in curve:
            w.writerow([step, repr(lr), repr(loss)])


def train(
    params: ModelParams,
    corpus,
    config: TrainConfig,
    out_dir: str | Path | None = None,
    state: OptimizerState | None = None,
    meta: dict | None = None,
) -> TrainResult:
    """Run ``config.steps`` optimizer steps in place on ``params``.

    Each step averages gradients over ``grad_accumulation_steps`` micro-batches
    of ``batch_size`` sequences, then applies AdamW at the cosine-annealed rate.
    With ``out_dir`` set, writes ``loss.csv`` and checkpoints ``step_<n>.inat``.
    """
    ids = np.asarray(corpus, dtype=np.int64)
    if ids.size < config.context_length:
        raise ValueError("corpus is empty at this context length")
    state = state or OptimizerState()
    batches = _micro_batches(ids, config)
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    meta = {
        **(meta or {}),
        "seed": config.seed,
        "lr_init": config.lr_init,
        "context_length": config.context_length,
        "variant": params.config.variant,
    }
    curve: list[tuple[int, float, float]] = []
    saved: list[Path] = []
    names = params.named_tensors()
    G = config.grad_accumulation_steps
    for step in range(config.steps):
        params.zero_grad()
        total = 0.0
        for _ in range(G):
            batch = next(batches)
            loss = next_token_loss(forward_full(params, batch), batch)
            tn.backward(tn.scale(loss, 1.0 / G))
            total += loss.item()
        grads = {n: t.grad for n, t in names if t.grad is not None}
        lr = cosine_lr(step, config)
        adamw_step(names, grads, state, lr, config)
        curve.append((step, lr, total / G))
        if config.log_every and step % config.log_every == 0:
            log.info("step %d lr %.3g loss %.4f", step, lr, total / G)
        done = step + 1
        if out is not None and (done == config.steps or (config.checkpoint_every and done % config.checkpoint_every == 0)):
            path = out / f"step_{done:06d}.inat"
            save_checkpoint(params, path, {**meta, "step": done, "optimizer_step": state.step}, state.as_arrays())
            saved.append(path)
    params.zero_grad()
    if out is not None:
        write_curve(out / "loss.csv", curve)
    return TrainResult(params, curve, saved, state)


def finetune(
    checkpoint: Checkpoint,
    corpus,
    new_context_length: int,
    config: TrainConfig,
    out_dir: str | Path | None = None,
    lr_init: float | None = None,
    steps: int | None = None,
) -> TrainResult:
    """Continue training at a longer context with fresh optimizer state.

    The initial learning rate defaults to a tenth of the pretraining rate
    recorded in the checkpoint. ``steps`` overrides ``config.steps``;
    ``steps=0`` returns an unchanged copy.
    """
    pre_cl = int(checkpoint.meta.get("context_length", 0))
    if new_context_length <= pre_cl:
        raise ValueError(f"finetune context {new_context_length} must exceed pretraining context {pre_cl}")
    if lr_init is None:
        lr_init = float(checkpoint.meta.get("lr_init", config.lr_init)) / 10.0
    params = checkpoint.params.copy()
    steps = config.steps if steps is None else steps
    if steps == 0:
        return TrainResult(params, [], [], OptimizerState())
    ft_config = TrainConfig(
        **{**config.__dict__, "lr_init": lr_init, "context_length": new_context_length, "steps": steps}
    )
    meta = {"phase": "finetune", "pretrain_context_length": pre_cl, "pretrain_step": checkpoint.meta.get("step")}
    return train(params, corpus, ft_config, out_dir, OptimizerState(), meta)


def eval_sweep(
    params: ModelParams,
    corpus,
    lengths,
    batch_size: int = 16,
    checkpoint: str = "",
) -> EvalReport:
    """Mean next-token loss of the corpus chunked (in order) at each context length."""
    ids = np.asarray(corpus, dtype=np.int64)
    rows = []
    with tn.no_grad():
        for cl in lengths:
            if cl < 2:
                raise ValueError(f"context length must be >= 2, got {cl}")
            chunks = batchify(ids, cl, seed=None)
            if len(chunks) == 0:
                raise ValueError(f"eval corpus has no chunks at context length {cl}")
            loss_sum = 0.0
            for i in range(0, len(chunks), batch_size):
                batch = chunks[i : i + batch_size]
                loss = next_token_loss(forward_full(params, batch), batch).item()
                loss_sum += loss * len(batch)
            n_tokens = len(chunks) * (cl - 1)
            rows.append((int(cl), loss_sum / len(chunks), n_tokens))
    return EvalReport(rows, params.config.variant, checkpoint)
