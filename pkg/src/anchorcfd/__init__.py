"""Anchored-attention surrogate for steady-state CFD fields.

A transformer trunk runs self- and cross-attention over a few thousand
anchor points pooled from simulation meshes; arbitrary numbers of extra
query points decode against the trunk's cached keys/values in constant
memory, so surface and volume fields of any resolution come out of one
forward pass. A finite-difference curl head can replace the direct
vorticity output to make predictions exactly solenoidal up to rounding.
"""

from .attention import KVCache, MemoryMeter, anchor_attention, sdp_attention
from .checkpoint import load_checkpoint, load_model, save_checkpoint
from .data import (
    Dataset,
    FlowConstants,
    GeneratorConfig,
    SimulationSample,
    SourceCounts,
    fit_normalization,
    generate_split_samples,
    generate_synthetic,
    prepare_inference_batch,
    prepare_training_sample,
    write_dataset,
)
from .errors import CorruptDataError, TrainingDivergedError
from .evaluate import (
    bench_scaling,
    evaluate_sample,
    relative_l1,
    relative_l2,
    r_squared,
)
from .geom import (
    NormalizationStats,
    PointCloud,
    knn_neighbors,
    radius_neighbors,
    scale_coordinates,
    split_anchors_queries,
    uniform_sample,
)
from .model import (
    AnchorTransformer,
    ModelConfig,
    build_model,
    chunked_decode,
    precision_context,
    predicted_vorticity,
)
from .physics import (
    divergence_of_predicted_vorticity,
    drag_lift_coefficients,
    fd_curl,
    fd_jacobian,
    knn_interpolate,
    surface_force,
)
from .train import Lion, TrainConfig, finetune_divfree_run, lr_schedule, train_run

__version__ = "0.1.0"

__all__ = [
    "AnchorTransformer",
    "CorruptDataError",
    "Dataset",
    "FlowConstants",
    "GeneratorConfig",
    "KVCache",
    "Lion",
    "MemoryMeter",
    "ModelConfig",
    "NormalizationStats",
    "PointCloud",
    "SimulationSample",
    "SourceCounts",
    "TrainConfig",
    "TrainingDivergedError",
    "anchor_attention",
    "bench_scaling",
    "build_model",
    "chunked_decode",
    "divergence_of_predicted_vorticity",
    "drag_lift_coefficients",
    "evaluate_sample",
    "fd_curl",
    "fd_jacobian",
    "finetune_divfree_run",
    "fit_normalization",
    "generate_split_samples",
    "generate_synthetic",
    "knn_interpolate",
    "knn_neighbors",
    "load_checkpoint",
    "load_model",
    "lr_schedule",
    "precision_context",
    "predicted_vorticity",
    "prepare_inference_batch",
    "prepare_training_sample",
    "r_squared",
    "radius_neighbors",
    "relative_l1",
    "relative_l2",
    "save_checkpoint",
    "scale_coordinates",
    "sdp_attention",
    "split_anchors_queries",
    "surface_force",
    "train_run",
    "uniform_sample",
    "write_dataset",
]
