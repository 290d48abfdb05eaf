"""FINOLA: image feature maps regenerated from one latent vector by first-order norm+linear recurrences."""
from .core import (
    CoeffSet,
    Direction,
    FeatureGrid,
    NormStats,
    StepUnit,
    default_origin,
    generate_frozen,
    generate_parallel,
    generate_sequential,
    load_grid,
    multi_step,
    normalize,
    save_grid,
    step,
)
from .masking import MaskSpec, SourceMap, blockwise_predict, build_source_map, sample_mask
from .models import Checkpoint, ModelConfig

__version__ = "0.1.0"

__all__ = [
    "CoeffSet",
    "Direction",
    "FeatureGrid",
    "NormStats",
    "StepUnit",
    "default_origin",
    "generate_frozen",
    "generate_parallel",
    "generate_sequential",
    "load_grid",
    "multi_step",
    "normalize",
    "save_grid",
    "step",
    "MaskSpec",
    "SourceMap",
    "blockwise_predict",
    "build_source_map",
    "sample_mask",
    "Checkpoint",
    "ModelConfig",
]
