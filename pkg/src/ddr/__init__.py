"""Paired quantile / conditional-CDF neural regression on a numpy autodiff core."""

from .network import DdrModel, load_model
from .training import TrainConfig, train

__all__ = ["DdrModel", "TrainConfig", "load_model", "train"]
__version__ = "0.1.0"
