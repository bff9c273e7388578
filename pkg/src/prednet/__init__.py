"""PredNet and PredNet+ video prediction on a small numpy autograd engine."""

from .core import PredNet, PredNetConfig, RolloutTrace, init_model
from .errors import ConfigError, ContractError, DimensionError, FormatError, NumericError, PredNetError
from .plus import ClassifierConfig, PredNetPlus

__all__ = [
    "PredNet",
    "PredNetConfig",
    "PredNetPlus",
    "ClassifierConfig",
    "RolloutTrace",
    "init_model",
    "PredNetError",
    "DimensionError",
    "NumericError",
    "ContractError",
    "ConfigError",
    "FormatError",
]

__version__ = "0.1.0"
