"""Task-aware normalization for few-shot learning, from tensors to reports."""

from .errors import DimensionError, FormatError, NumericError, ValidationError
from .tensor import GradientTape, Tensor, backward, finite_diff_check

__all__ = [
    "DimensionError", "FormatError", "NumericError", "ValidationError",
    "GradientTape", "Tensor", "backward", "finite_diff_check",
]

__version__ = "0.1.0"
