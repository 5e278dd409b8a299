"""Hessian, gradient and Gram-matrix structure of deep unconstrained feature models."""

from ._kernels import BACKEND
from .model import HyperConfig, ModelState, forward, init_state, loss, reg_gate
from .training import dnc1_metric, gradients, train

__version__ = "0.1.0"

__all__ = [
    "BACKEND",
    "HyperConfig",
    "ModelState",
    "dnc1_metric",
    "forward",
    "gradients",
    "init_state",
    "loss",
    "reg_gate",
    "train",
]
