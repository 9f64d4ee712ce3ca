"""Hierarchical short/long-term memory transformer on a small numpy autodiff engine."""

from .config import ConfigError, ModelConfig, full_scale_config, validate_config
from .evaluation import memory_footprint, perplexity, recall_probe
from .model import Model, build
from .tensor import Parameter, Tensor, backward, grad_check, no_grad, zero_grad
from .training import TrainConfig, lr_schedule, train

__all__ = [
    "ConfigError", "ModelConfig", "full_scale_config", "validate_config",
    "memory_footprint", "perplexity", "recall_probe",
    "Model", "build",
    "Parameter", "Tensor", "backward", "grad_check", "no_grad", "zero_grad",
    "TrainConfig", "lr_schedule", "train",
]
