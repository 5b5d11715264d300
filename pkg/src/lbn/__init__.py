"""Linearizing belief nets: stochastic gated-linear networks for multimodal regression."""

__version__ = "0.1.0"

from .baselines import CSBN, ReluNet, train_baseline  # noqa: E402
from .checkpoint import load_checkpoint, save_checkpoint  # noqa: E402
from .estimators import (  # noqa: E402
    ConvLBNDenoiser,
    CSBNRegressor,
    LBNRegressor,
    PatchDenoiser,
    ReLURegressor,
)
from .model import LbnModel, build_conv_lbn, forward_map, forward_mean, forward_sample  # noqa: E402
from .tensor import NonFiniteError, Rng  # noqa: E402

__all__ = [
    "CSBN", "ReluNet", "train_baseline", "load_checkpoint", "save_checkpoint",
    "ConvLBNDenoiser", "CSBNRegressor", "LBNRegressor", "PatchDenoiser", "ReLURegressor",
    "LbnModel", "build_conv_lbn", "forward_map", "forward_mean", "forward_sample",
    "NonFiniteError", "Rng",
]
