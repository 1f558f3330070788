"""Infrared/visible image fusion with a ViT encoder, cross-attention fusion
modules and guided two-stage training."""

from .errors import (
    ConfigError,
    DataError,
    FusionError,
    ImageIOError,
    MissingArtifact,
    NumericalError,
    ShapeError,
    WeightImportError,
)
from .imaging import Image
from .losses import LossWeights
from .model import FusionNet, ModelConfig
from .training import TrainLog, TrainPlan

__version__ = "0.1.0"

__all__ = [
    "ConfigError",
    "DataError",
    "FusionError",
    "FusionNet",
    "Image",
    "ImageIOError",
    "LossWeights",
    "MissingArtifact",
    "ModelConfig",
    "NumericalError",
    "ShapeError",
    "TrainLog",
    "TrainPlan",
    "WeightImportError",
]
