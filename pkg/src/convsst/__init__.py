"""Spectral-spatial transformer engine for hyperspectral image classification."""

from .tensor import Parameter, Tape, Tensor, TensorError, set_nan_guard, zero_grads

__version__ = "0.1.0"

__all__ = [
    "Parameter",
    "Tape",
    "Tensor",
    "TensorError",
    "set_nan_guard",
    "zero_grads",
    "__version__",
]
