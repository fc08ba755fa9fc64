"""curvebert: masked-curve pre-training and fine-tuning for 1-D spectral classification."""

from .input_layer import ModelConfig
from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .trainer import MetricsReport, TrainSpec
from .estimators import CurveBertClassifier, CurveBertPretrainer

__all__ = [
    "Checkpoint",
    "CurveBertClassifier",
    "CurveBertPretrainer",
    "MetricsReport",
    "ModelConfig",
    "TrainSpec",
    "load_checkpoint",
    "save_checkpoint",
    "__version__",
]

__version__ = "0.1.0"
