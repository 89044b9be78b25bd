"""Orientation- and context-entangled vessel segmentation.

A self-contained research library: a numpy autograd engine, orientation
aware dynamic convolutions built from Gabor kernels, attention-based
feature fusion, entangled non-local context blocks, an unbalanced
refinement head, and the training, inference and evaluation plumbing to
run the whole architecture on retinal fundus patches at desk scale.
"""

from .autograd import Tensor, precision, no_grad, gradcheck
from .errors import (OceError, ConfigError, ContractError, DimensionError,
                     IoError, NumericError)

__version__ = "0.1.0"

__all__ = [
    "Tensor",
    "precision",
    "no_grad",
    "gradcheck",
    "OceError",
    "ConfigError",
    "ContractError",
    "DimensionError",
    "IoError",
    "NumericError",
    "__version__",
]
