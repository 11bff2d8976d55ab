"""SimpleGrowth: a convolutional autoencoder built from cellular growth blocks, in numpy."""

from .errors import (
    ArgumentError,
    ConfigurationError,
    FormatError,
    NumericalError,
    ShapeError,
    SimpleGrowthError,
    StateError,
)
from .layers import EVAL, TRAIN
from .model import (
    SimpleGrowthConfig,
    SimpleGrowthModel,
    interpolate,
    load_checkpoint,
    sample_uniform_latents,
    save_checkpoint,
)
from .tensor import Tensor, gradcheck, no_grad

__version__ = "0.1.0"

__all__ = [
    "ArgumentError",
    "ConfigurationError",
    "EVAL",
    "FormatError",
    "NumericalError",
    "ShapeError",
    "SimpleGrowthConfig",
    "SimpleGrowthError",
    "SimpleGrowthModel",
    "StateError",
    "TRAIN",
    "Tensor",
    "gradcheck",
    "interpolate",
    "load_checkpoint",
    "no_grad",
    "sample_uniform_latents",
    "save_checkpoint",
]
