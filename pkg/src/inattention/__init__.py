"""Decoder-only language models with dense attention or InAttention, on a numpy tape autodiff."""

from .accounting import (
    MemoryReport,
    PairCountReport,
    Workload,
    analytic_activation_bytes,
    effective_context,
    measure_peak,
    pair_count,
    scaling_report,
)
from .data_io import (
    Checkpoint,
    CheckpointError,
    RunConfig,
    batchify,
    build_reference_corpus,
    detokenize,
    load_checkpoint,
    read_corpus,
    save_checkpoint,
    tokenize,
)
from .masks import MaskSpec
from .model import (
    DecodeCache,
    ModelConfig,
    ModelParams,
    Sampler,
    decode_step,
    forward_full,
    forward_last,
    generate,
    init_params,
    new_cache,
    param_breakdown,
    param_count,
)
from .tensor import DegenerateMaskError, NonFiniteError, ShapeError, Tensor
from .training import EvalReport, OptimizerState, TrainConfig, eval_sweep, finetune, train

__version__ = "0.1.0"
