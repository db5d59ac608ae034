"""Uncertainty-aware cross-entropy training lab on a small numpy autodiff core."""

from .network import NetworkConfig, RngStream, SegNet, build, load_checkpoint, save_checkpoint
from .tensor import Tensor, backward, no_grad
from .uce import UceConfig, UncertaintyStats, pixel_ce, sample_predictive, training_step, uce_loss, uncertainty_weight

__version__ = "0.1.0"

__all__ = [
    "NetworkConfig", "RngStream", "SegNet", "Tensor", "UceConfig", "UncertaintyStats", "backward",
    "build", "load_checkpoint", "no_grad", "pixel_ce", "sample_predictive", "save_checkpoint",
    "training_step", "uce_loss", "uncertainty_weight",
]
