"""Residual networks trained with an optimal-control stage cost on intermediate outputs."""

from .autodiff import Tape, Tensor
from .resnet import NetworkConfig, WeightBundle, forward_full, init_weights
from .training import TrainConfig, TrajectoryRecord, evaluate_trajectory, objective, train

__all__ = [
    "NetworkConfig",
    "Tape",
    "Tensor",
    "TrainConfig",
    "TrajectoryRecord",
    "WeightBundle",
    "evaluate_trajectory",
    "forward_full",
    "init_weights",
    "objective",
    "train",
]
__version__ = "0.1.0"
