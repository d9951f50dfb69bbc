"""Relational cross-attention models and experiments on a small numpy autodiff engine."""

from .architectures import AbstractorConfig, ModelSpec, StackConfig, assemble, parameter_count
from .harness import TaskConfig, TrainConfig, learning_curve, train
from .rng import Rng
from .tensor import Tensor

__version__ = "0.1.0"

__all__ = [
    "AbstractorConfig",
    "ModelSpec",
    "StackConfig",
    "TaskConfig",
    "TrainConfig",
    "Rng",
    "Tensor",
    "assemble",
    "learning_curve",
    "parameter_count",
    "train",
]
