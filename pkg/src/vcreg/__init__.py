"""Variance-covariance regularization for supervised training, with a small
autodiff engine, desk-scale experiments and a command-line driver."""

from .core import VCRegConfig, vcreg_gradient, vcreg_loss
from .hooks import attach_vcreg_hooks

__version__ = "0.1.0"

__all__ = ["VCRegConfig", "attach_vcreg_hooks", "vcreg_gradient", "vcreg_loss"]
