"""Breast mass segmentation with a conditional GAN and mask-shape
classification with a small CNN, on a numpy reverse-mode autodiff core."""

from .errors import (BuildError, ConfigurationError, ContractViolation, FormatError,
                     MammosegError, NonFiniteError)
from .phantom import SHAPE_LABELS

__version__ = "0.1.0"

__all__ = ["BuildError", "ConfigurationError", "ContractViolation", "FormatError",
           "MammosegError", "NonFiniteError", "SHAPE_LABELS", "__version__"]
