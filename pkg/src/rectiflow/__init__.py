"""rectiflow: conditional rectified-flow generative modeling on synthetic tasks."""

__version__ = "0.1.0"

from .errors import (
    CheckpointError,
    ConfigError,
    DimensionError,
    DomainError,
    EmptySequenceError,
    IntegrationError,
    NumericError,
    RectiflowError,
    StateError,
)
from .flow import (
    CoupledDataset,
    SampleBatch,
    TrainConfig,
    TrainResult,
    build_reflow_dataset,
    draw_pair,
    flow_loss,
    interpolate,
    rectify,
    train,
    train_step,
)
from .fusion import (
    ConditionBundle,
    FusionConfig,
    FusionEncoder,
    cross_attention,
    fuse_condition,
    gated_fusion,
    multi_head_attention,
    pitch_project,
    self_attention_refine,
    vq_quantize,
)
from .solvers import SolverConfig, Trajectory, euler_integrate, rk45_integrate, sample
from .vectorfield import Adam, VectorFieldModel, time_embed

__all__ = [
    "Adam",
    "CheckpointError",
    "ConditionBundle",
    "ConfigError",
    "CoupledDataset",
    "DimensionError",
    "DomainError",
    "EmptySequenceError",
    "FusionConfig",
    "FusionEncoder",
    "IntegrationError",
    "NumericError",
    "RectiflowError",
    "SampleBatch",
    "SolverConfig",
    "StateError",
    "TrainConfig",
    "TrainResult",
    "Trajectory",
    "VectorFieldModel",
    "build_reflow_dataset",
    "cross_attention",
    "draw_pair",
    "euler_integrate",
    "flow_loss",
    "fuse_condition",
    "gated_fusion",
    "interpolate",
    "multi_head_attention",
    "pitch_project",
    "rectify",
    "rk45_integrate",
    "sample",
    "self_attention_refine",
    "time_embed",
    "train",
    "train_step",
    "vq_quantize",
]
