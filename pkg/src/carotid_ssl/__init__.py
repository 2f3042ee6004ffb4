"""Two-stage carotid vessel wall and plaque segmentation with one-way consistency training."""

from .data_core import DatasetManifest, MultiSequenceSlice, SegmentationMask, load_manifest
from .losses import LossConfig
from .nets import ModelConfig, SegmentationUNet, build_model
from .prior import PriorConfig, prior_filter
from .trainer import SlicePool, TrainConfig, Trainer
from .transforms import PerturbationPolicy

__all__ = [
    "DatasetManifest",
    "MultiSequenceSlice",
    "SegmentationMask",
    "load_manifest",
    "LossConfig",
    "ModelConfig",
    "SegmentationUNet",
    "build_model",
    "PriorConfig",
    "prior_filter",
    "SlicePool",
    "TrainConfig",
    "Trainer",
    "PerturbationPolicy",
]

__version__ = "0.1.0"
