"""Attention-pair counting, effective context, and activation-memory models.

The analytic memory model counts the tensor buffers that are live at the
peak of each workload as this package implements it (no-grad inference,
batch of one). Constants below are properties of this implementation:

dense prefill (``forward_full``)
    ``2·H·T²`` for the raw and scaled score matrices (the softmax output then
    replaces one of them), ``7·T·d`` for embeddings, residual, normed input,
    rotated q/k, v and one projection temporary. Peaks elsewhere (MLP:
    ``(2f+4)·T·d``; logits: ``T·V + 3·T·d``) are taken if larger.
inattention fast path (``forward_last``)
    ``5·T·d`` for embeddings, normed initial states, keys, values and one
    projection temporary, ``2·H·T`` for the score vector, ``(2f+6)·d + V``
    for the single residual tower and its logits.
decode caches after ``T`` tokens
    dense ``2·L·T·d``; inattention ``T·d`` (policy ``embeddings``) or
    ``2·L·T·d`` (policy ``kv``). Step transients are added on top.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as tn
from .layers import count_pairs
from .masks import MaskSpec
from .model import ModelConfig, ModelParams, decode_step, forward_full, forward_last, init_params, new_cache
from .tensor import MemoryTracker, Rng

PHASES = ("train", "prefill", "decode")
DEFAULT_BUDGET = 4 * 1024**3


@dataclass
class PairCountReport:
    per_layer: list[int]
    T: int
    L: int
    mask_kind: str
    phase: str

    @property
    def total(self) -> int:
        return sum(self.per_layer)


def pair_count(mask: MaskSpec, L: int, phase: str) -> PairCountReport:
    """Attention pairs (query, key) scored across ``L`` layers.

    For ``decode`` the count is for one incremental step after ``mask.T``
    tokens are in context, the new token included.
    """
    if phase not in PHASES:
        raise ValueError(f"unknown phase {phase!r}; expected one of {PHASES}")
    if L < 1:
        raise ValueError("L must be >= 1")
    T = mask.T
    if phase == "decode":
        per = 1 + min(T - 1, mask.window) if mask.kind == "sliding" else T
    elif mask.kind == "inattention":
        # training still scores every causal pair; only inference drops to one query row
        per = T * (T + 1) // 2 if phase == "train" else T
    elif mask.kind == "sliding":
        w = mask.window
        per = sum(1 + min(t, w) for t in range(T))
    else:
        per = T * (T + 1) // 2
    return PairCountReport([per] * L, T, L, mask.kind, phase)


def effective_context(window: int, L: int) -> int:
    """How far information can travel through ``L`` stacked sliding-window layers."""
    if window < 1 or L < 1:
        raise ValueError("window and L must be >= 1")
    return window * L


# ---------------------------------------------------------------- memory


@dataclass
class MemoryReport:
    variant: str
    phase: str
    T: int
    element_bytes: int
    parameter_bytes: int
    activation_bytes: int
    cache_bytes: int
    measured_peak_bytes: int | None = None
    policy: str | None = None

    @property
    def analytic_bytes(self) -> int:
        return self.parameter_bytes + self.activation_bytes + self.cache_bytes


def _param_bytes(config: ModelConfig) -> int:
    from .model import param_count

    return param_count(config) * np.dtype(config.np_dtype).itemsize


def analytic_activation_bytes(config: ModelConfig, T: int, phase: str = "prefill", policy: str | None = None) -> MemoryReport:
    """Closed-form peak bytes for one sequence of length ``T``.

    ``phase`` is ``prefill`` (the variant's inference path: full forward for
    dense, fast path for InAttention), ``full`` (full forward for either
    variant) or ``decode`` (cache after ``T`` tokens plus one step).
    """
    if T < 1:
        raise ValueError("T must be >= 1")
    d, f, H, L, V = config.d_model, config.mlp_factor, config.n_heads, config.n_layers, config.vocab_size
    eb = np.dtype(config.np_dtype).itemsize
    cache = 0
    if phase == "full" or (phase == "prefill" and config.variant == "dense"):
        acts = max(2 * H * T * T + 7 * T * d, (2 * f + 4) * T * d, T * V + 3 * T * d)
    elif phase == "prefill":
        acts = 5 * T * d + 2 * H * T + (2 * f + 6) * d + V
    elif phase == "decode":
        if policy is None:
            policy = "kv" if config.variant == "dense" else "embeddings"
        if config.variant == "dense" or policy == "kv":
            cache = 2 * L * T * d
            acts = T * d + 2 * H * T + (2 * f + 6) * d + V
        else:
            cache = T * d
            acts = 5 * T * d + 2 * H * T + (2 * f + 6) * d + V
    else:
        raise ValueError(f"unknown memory phase {phase!r}")
    return MemoryReport(config.variant, phase, T, eb, _param_bytes(config), acts * eb, cache * eb, policy=policy)


@dataclass(frozen=True)
class Workload:
    """``kind`` is ``forward_full``, ``forward_last`` or ``decode``."""

    kind: str
    T: int
    policy: str | None = None
    seed: int = 0

    @property
    def phase(self) -> str:
        return {"forward_full": "full", "forward_last": "prefill", "decode": "decode"}[self.kind]


def measure_peak(params: ModelParams, workload: Workload) -> MemoryReport:
    """Run ``workload`` under a tensor-buffer tracker and report its peak live bytes.

    Parameter buffers are counted from the start. Runs without a tape.
    """
    if workload.kind not in ("forward_full", "forward_last", "decode"):
        raise ValueError(f"unknown workload {workload.kind!r}")
    cfg = params.config
    tokens = Rng(workload.seed).integers(0, cfg.vocab_size, workload.T)
    report = analytic_activation_bytes(cfg, workload.T, workload.phase, workload.policy)
    if cfg.variant == "dense" and workload.kind == "forward_last":
        report.phase = "full"
    with tn.no_grad(), MemoryTracker() as tracker:
        tracker.adopt(params.parameters())
        if workload.kind == "forward_full":
            out = forward_full(params, tokens)
        elif workload.kind == "forward_last":
            out = forward_last(params, tokens)
        else:
            cache = new_cache(cfg, workload.policy)
            for tok in tokens:
                out, cache = decode_step(params, cache, int(tok))
            del cache
        del out
    report.measured_peak_bytes = tracker.peak
    return report


# ---------------------------------------------------------------- scaling report

SKIPPED = "skipped_budget"


@dataclass
class ScalingRow:
    T: int
    variant: str
    phase: str
    analytic_bytes: int
    measured_bytes: int | None  # None when skipped for budget
    total_pairs: int

    @property
    def skipped(self) -> bool:
        return self.measured_bytes is None


@dataclass
class ScalingReport:
    rows: list[ScalingRow] = field(default_factory=list)
    budget_bytes: int = DEFAULT_BUDGET

    def measured(self, variant: str) -> dict[int, int]:
        return {r.T: r.measured_bytes for r in self.rows if r.variant == variant and not r.skipped}

    def skipped(self, variant: str) -> list[int]:
        return [r.T for r in self.rows if r.variant == variant and r.skipped]

    def crossover(self, ratio: float = 2.0) -> int | None:
        """Smallest T where dense measured peak is at least ``ratio`` times InAttention's."""
        dense, inat = self.measured("dense"), self.measured("inattention")
        for T in sorted(set(dense) & set(inat)):
            if dense[T] >= ratio * inat[T]:
                return T
        return None

    def write_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            self._write(fh)

    def to_csv(self) -> str:
        import io

        buf = io.StringIO()
        self._write(buf)
        return buf.getvalue()

    def _write(self, fh) -> None:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["T", "variant", "phase", "analytic_bytes", "measured_bytes", "total_pairs"])
        for r in self.rows:
            w.writerow([r.T, r.variant, r.phase, r.analytic_bytes, SKIPPED if r.skipped else r.measured_bytes, r.total_pairs])


def scaling_report(
    config: ModelConfig,
    variants=("dense", "inattention"),
    lengths=(1024, 2048, 4096),
    budget_bytes: int = DEFAULT_BUDGET,
    seed: int = 0,
) -> ScalingReport:
    """Inference peak memory per variant and length.

    Dense runs ``forward_full``; InAttention runs the ``forward_last`` fast
    path. Workloads whose analytic peak exceeds ``budget_bytes`` are not run
    and are reported as ``skipped_budget``.
    """
    report = ScalingReport(budget_bytes=budget_bytes)
    for variant in variants:
        cfg = config.with_variant(variant)
        params = init_params(cfg, seed)
        kind = "forward_full" if variant == "dense" else "forward_last"
        mask_kind = "dense" if variant == "dense" else "inattention"
        for T in lengths:
            analytic = analytic_activation_bytes(cfg, T, "prefill").analytic_bytes
            pairs = pair_count(MaskSpec(mask_kind, T), cfg.n_layers, "prefill").total
            measured = None
            if analytic <= budget_bytes:
                measured = measure_peak(params, Workload(kind, T, seed=seed)).measured_peak_bytes
            report.rows.append(ScalingRow(T, variant, "prefill", analytic, measured, pairs))
    return report


def counted_pairs(params: ModelParams, tokens, path: str = "forward_last") -> list[int]:
    """Attention pairs actually scored per layer while running ``path`` (one sequence)."""
    fn = {"forward_last": forward_last, "forward_full": forward_full}[path]
    with tn.no_grad(), count_pairs() as counter:
        fn(params, tokens)
    return counter.calls


def linear_fit_r2(xs, ys) -> float:
    x = np.asarray(xs, dtype=np.float64)
    y = np.asarray(ys, dtype=np.float64)
    A = np.stack([x, np.ones_like(x)], axis=1)
    coef, *_ = np.linalg.lstsq(A, y, rcond=None)
    resid = y - A @ coef
    ss_tot = ((y - y.mean()) ** 2).sum()
    return 1.0 - float((resid**2).sum() / ss_tot) if ss_tot > 0 else 1.0
