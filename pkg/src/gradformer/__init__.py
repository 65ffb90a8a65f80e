"""Siamese differential-attention change detection on a small NumPy autodiff engine."""

from .errors import ConfigError, ContractError, DimensionError, FormatError, NumericDomainError
from .estimator import ChangeDetector
from .metrics import ConfusionCounts, MetricsReport, confusion
from .model import GradFormer, ModelConfig, build, count_parameters, default_config, tiny_config
from .tensor import Tensor, backward, float64_mode, gradcheck, no_grad
from .training import TrainConfig, evaluate, train

__all__ = [
    "ChangeDetector", "ConfigError", "ConfusionCounts", "ContractError", "DimensionError",
    "FormatError", "GradFormer", "MetricsReport", "ModelConfig", "NumericDomainError", "Tensor",
    "TrainConfig", "backward", "build", "confusion", "count_parameters", "default_config",
    "evaluate", "float64_mode", "gradcheck", "no_grad", "tiny_config", "train",
]

__version__ = "0.1.0"
