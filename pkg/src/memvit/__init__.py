"""Streaming video transformer with cached, compressed key/value memory.

A desk-scale engine for clip-by-clip video understanding: multiscale
pooling attention whose keys and values are extended with a bounded,
learnably compressed cache of earlier clips, plus an analytical cost
model that reproduces the architecture's compute/memory/receptive-field
scaling by pure arithmetic.
"""

from ._kernels import backend_name as kernel_backend
from .analysis import (
    CostReport,
    count_costs,
    count_params,
    temporal_support,
    temporal_support_clips,
    trace_receptive_field,
)
from .config import (
    ConfigError,
    LayerPlan,
    ModelSpec,
    PoolSpec,
    StageSpec,
    layer_plan,
    load_spec,
    memvit16_spec,
    mvit16_spec,
)
from .memory import (
    BankParseError,
    MemoryBank,
    MemorySlot,
    bank_deserialize,
    bank_serialize,
    bank_update,
    boundary_reset,
    memory_drop_augment,
)
from .model import (
    AdamW,
    Model,
    StreamOutput,
    build_model,
    forward_clip,
    fresh_banks,
    load_checkpoint,
    make_causal,
    save_checkpoint,
    train_step,
)
from .streaming import (
    ClipEvent,
    RecallTaskSpec,
    VideoRecord,
    gen_recall_task,
    stream_clips,
)
from .tokens import TokenTensor

__version__ = "0.1.0"

__all__ = [
    "AdamW",
    "BankParseError",
    "ClipEvent",
    "ConfigError",
    "CostReport",
    "LayerPlan",
    "MemoryBank",
    "MemorySlot",
    "Model",
    "ModelSpec",
    "PoolSpec",
    "RecallTaskSpec",
    "StageSpec",
    "StreamOutput",
    "TokenTensor",
    "VideoRecord",
    "bank_deserialize",
    "bank_serialize",
    "bank_update",
    "boundary_reset",
    "build_model",
    "count_costs",
    "count_params",
    "forward_clip",
    "fresh_banks",
    "gen_recall_task",
    "kernel_backend",
    "layer_plan",
    "load_checkpoint",
    "load_spec",
    "make_causal",
    "memory_drop_augment",
    "memvit16_spec",
    "mvit16_spec",
    "save_checkpoint",
    "stream_clips",
    "temporal_support",
    "temporal_support_clips",
    "trace_receptive_field",
    "train_step",
]
