"""Adaptive video feature pipeline with a cost/accuracy benchmark harness."""

from .warpcore import (
    BinaryMask,
    ContractViolation,
    FeatureMap,
    MotionField,
    elementwise_blend,
    resize_mask_nearest,
    resize_motion_bilinear,
    warp,
)
from .aggregate import (
    EmbeddingMap,
    LinearProjector,
    WeightMap,
    aggregate_dense,
    aggregate_recursive,
    embed,
    normalize_weights,
    similarity_weights,
)
from .partial_update import (
    QualityMap,
    UpdateDecision,
    build_update_mask,
    partial_update,
    partial_update_layer,
    ste_gradient,
)
from .schedule import SchedulerConfig, is_key_adaptive, is_key_fixed, is_key_oracle
from .pipeline import (
    CostLedger,
    CostRecord,
    PipelineConfig,
    PipelineState,
    preset_config,
    run_sequence,
)
from .synth import GeneratorSpec, SyntheticSequence, generate_sequence
from .networks import NetworkBundle, make_reference_networks

__version__ = "0.1.0"

__all__ = [
    "BinaryMask",
    "ContractViolation",
    "CostLedger",
    "CostRecord",
    "EmbeddingMap",
    "FeatureMap",
    "GeneratorSpec",
    "LinearProjector",
    "MotionField",
    "NetworkBundle",
    "PipelineConfig",
    "PipelineState",
    "QualityMap",
    "SchedulerConfig",
    "SyntheticSequence",
    "UpdateDecision",
    "WeightMap",
    "aggregate_dense",
    "aggregate_recursive",
    "build_update_mask",
    "elementwise_blend",
    "embed",
    "generate_sequence",
    "is_key_adaptive",
    "is_key_fixed",
    "is_key_oracle",
    "make_reference_networks",
    "normalize_weights",
    "partial_update",
    "partial_update_layer",
    "preset_config",
    "resize_mask_nearest",
    "resize_motion_bilinear",
    "run_sequence",
    "similarity_weights",
    "ste_gradient",
    "warp",
]
