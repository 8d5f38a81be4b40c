"""Uncertainty-aware counterfactual treatment selection on simulated systems."""

from . import autodiff, config, datagen, dynamics, evaluation, hsic, models, selection, uncertainty

__all__ = ["autodiff", "config", "datagen", "dynamics", "evaluation", "hsic",
           "models", "selection", "uncertainty"]
__version__ = "0.1.0"
