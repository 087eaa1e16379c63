"""
skelseg - Unsupervised Skeleton Action Segmentation

Segments skeleton motion sequences into actions without labels by learning
a hierarchical, patch-based vector quantization of per-joint temporal
features, trained to reconstruct both the skeleton's inter-joint geometry and
the relative time of every patch.

Pipeline:
- dataset: sequence files, manifests, root centering, synthetic corpus
- model: per-joint multi-stage TCN encoder, mirrored decoder, timestamp MLP
- hvq: subaction and action codebooks with EMA updates and dead-code reseeding
- losses / trainer: commitment and reconstruction losses, Adam, checkpoints
- metrics / plotting: Hungarian-matched MoF, Edit, F1@tau, length-bias JSD
"""

from .autodiff import Tensor, backward, check_gradients, no_grad
from .checkpoint import load_checkpoint, save_checkpoint
from .dataset import (
    DatasetManifest, SkeletonSequence, SynthConfig, Timestamps,
    center_at_root, downsample, load_manifest, load_sequence, make_timestamps,
    prepare_sequence, synth_generate
)
from .errors import (
    CheckpointError, CheckpointVersionError, ChecksumError, ConfigError,
    DataValidationError, MissingPredictionError, NumericError, ParseError,
    ShapeError, SkelsegError
)
from .hvq import Assignment, Codebook, CodebookHierarchy, HvqConfig, quantize_hierarchy
from .losses import LossReport, LossWeights
from .metrics import ClusterMapping, EvaluationReport, SegmentList, evaluate, predict_labels
from .model import EncoderConfig, PatchGrid, SkeletonModel, TemporalDecoderConfig
from .trainer import ModelState, Routing, TrainConfig, Trainer, load_config

__version__ = "0.1.0"
__all__ = [
    "Tensor",
    "backward",
    "check_gradients",
    "no_grad",
    "DatasetManifest",
    "SkeletonSequence",
    "SynthConfig",
    "Timestamps",
    "center_at_root",
    "downsample",
    "load_manifest",
    "load_sequence",
    "make_timestamps",
    "prepare_sequence",
    "synth_generate",
    "EncoderConfig",
    "TemporalDecoderConfig",
    "PatchGrid",
    "SkeletonModel",
    "Assignment",
    "Codebook",
    "CodebookHierarchy",
    "HvqConfig",
    "quantize_hierarchy",
    "LossReport",
    "LossWeights",
    "ModelState",
    "Routing",
    "TrainConfig",
    "Trainer",
    "load_config",
    "load_checkpoint",
    "save_checkpoint",
    "ClusterMapping",
    "EvaluationReport",
    "SegmentList",
    "evaluate",
    "predict_labels",
    # Errors
    "SkelsegError",
    "ShapeError",
    "ConfigError",
    "DataValidationError",
    "ParseError",
    "MissingPredictionError",
    "CheckpointError",
    "ChecksumError",
    "CheckpointVersionError",
    "NumericError",
]
