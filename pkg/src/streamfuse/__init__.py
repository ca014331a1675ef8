"""Desk-scale laboratory for multi-stream convolutional fusion networks.

Streams of one convolutional network differ only in how they downsample;
fusing their feature maps (sum, max, or concatenation along channel, width,
or height) yields sequence embeddings trained with a Siamese margin loss plus
identity classification, and evaluated by cumulative match curves on
probe/gallery splits.
"""

from .autodiff import ShapeError, Tape, Tensor, backward, finite_difference
from .layers import (
    Conv2dParams,
    PoolParams,
    conv2d,
    global_avg_pool,
    multiscale_branch,
    pool2d,
    upsample_zero_pad,
)
from .fusion import FUSION_KINDS, FusedMap, FusionKind, fuse
from .network import (
    ARCHITECTURES,
    AttentionParams,
    ConfigError,
    Network,
    NetworkConfig,
    StreamSpec,
    build,
    default_config,
    load_checkpoint,
    save_checkpoint,
    temporal_pool,
)
from .training import (
    PairBatch,
    TrainConfig,
    TrainingError,
    desk_config,
    identity_loss,
    lr_at_epoch,
    siamese_loss,
    total_objective,
    trace_to_csv,
    train,
)
from .data import (
    DataError,
    DatasetSplit,
    SequenceSample,
    compute_flow,
    export_dataset,
    load_dataset,
    split,
    synth_generate,
)
from .evaluation import (
    ABLATION_KINDS,
    CmcCurve,
    EvalError,
    ExperimentReport,
    compute_cmc,
    evaluate,
    run_ablation,
)
from .config import ExperimentConfig, SynthConfig, load_config, serialize_config
from .checks import run_gradcheck, run_oracle_check

__version__ = "0.1.0"

__all__ = [
    "ABLATION_KINDS",
    "ARCHITECTURES",
    "AttentionParams",
    "CmcCurve",
    "ConfigError",
    "Conv2dParams",
    "DataError",
    "DatasetSplit",
    "EvalError",
    "ExperimentConfig",
    "ExperimentReport",
    "FUSION_KINDS",
    "FusedMap",
    "FusionKind",
    "Network",
    "NetworkConfig",
    "PairBatch",
    "PoolParams",
    "SequenceSample",
    "ShapeError",
    "StreamSpec",
    "SynthConfig",
    "Tape",
    "Tensor",
    "TrainConfig",
    "TrainingError",
    "backward",
    "build",
    "compute_cmc",
    "compute_flow",
    "conv2d",
    "default_config",
    "desk_config",
    "evaluate",
    "export_dataset",
    "finite_difference",
    "fuse",
    "global_avg_pool",
    "identity_loss",
    "load_checkpoint",
    "load_config",
    "load_dataset",
    "lr_at_epoch",
    "multiscale_branch",
    "pool2d",
    "run_ablation",
    "run_gradcheck",
    "run_oracle_check",
    "save_checkpoint",
    "serialize_config",
    "siamese_loss",
    "split",
    "synth_generate",
    "temporal_pool",
    "total_objective",
    "trace_to_csv",
    "train",
    "upsample_zero_pad",
]
