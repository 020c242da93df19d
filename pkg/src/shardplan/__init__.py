"""Load-balanced, atomicity-respecting partitioning for distributed matrix-based optimizers."""

from shardplan.costs import CostKind, CostModel
from shardplan.workload import (
    BufferLayout,
    Bucket,
    ModelConfig,
    ParamSpec,
    TpSplit,
    Workload,
    build_buffer_layout,
    build_workload,
    generate_transformer_params,
    load_model_config,
)

__version__ = "0.1.0"

__all__ = [
    "BufferLayout",
    "Bucket",
    "CostKind",
    "CostModel",
    "ModelConfig",
    "ParamSpec",
    "TpSplit",
    "Workload",
    "build_buffer_layout",
    "build_workload",
    "generate_transformer_params",
    "load_model_config",
]
