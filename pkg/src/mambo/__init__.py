"""Background-aware prompt tuning for few-shot OOD detection on patch features."""

from .core import (BackgroundSet, ConfigError, DegenerateVectorError, DetectionReport,
                   FeatureBundle, MamboError, ModelConfig, PromptSet, ShapeError, SimilarityMaps)
from .training import TrainConfig, train

__all__ = [
    "BackgroundSet", "ConfigError", "DegenerateVectorError", "DetectionReport", "FeatureBundle",
    "MamboError", "ModelConfig", "PromptSet", "ShapeError", "SimilarityMaps", "TrainConfig", "train",
]
__version__ = "0.1.0"
