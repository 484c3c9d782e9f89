"""Optimal-transport fusion of small encoder transformers."""

from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .fusion import (
    AlignMode,
    FusionConfig,
    FusionError,
    HeterogeneousError,
    SequenceFilter,
    Solver,
    align_model,
    compute_alignment,
    fuse_models,
    identity_site_map,
    vanilla_fuse,
)
from .flowgraph import ResidualPolicy, build_encoder_flow_graph
from .linalg import Rng, ShapeError
from .model import ArchConfig, forward, init_params, permute_model
from .ot import build_cost_matrix, solve_emd, solve_sinkhorn, to_alignment_map

__version__ = "0.1.0"

__all__ = [
    "AlignMode",
    "ArchConfig",
    "CheckpointError",
    "FusionConfig",
    "FusionError",
    "HeterogeneousError",
    "ResidualPolicy",
    "Rng",
    "SequenceFilter",
    "ShapeError",
    "Solver",
    "align_model",
    "build_cost_matrix",
    "build_encoder_flow_graph",
    "compute_alignment",
    "forward",
    "fuse_models",
    "identity_site_map",
    "init_params",
    "load_checkpoint",
    "permute_model",
    "save_checkpoint",
    "solve_emd",
    "solve_sinkhorn",
    "to_alignment_map",
    "vanilla_fuse",
]
