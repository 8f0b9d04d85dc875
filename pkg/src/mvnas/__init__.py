"""Differentiable architecture search for multi-view shape recognition.

The package searches convolutional cell structures and multi-task loss
weights on a supernet with weight sharing, derives a discrete genotype from
the relaxed architecture, prices it in parameters and multiply-accumulates,
retrains it from scratch, and scores classification and retrieval quality.
"""

__version__ = "0.1.0"

from .autodiff import Tensor, backward, no_grad
from .errors import (
    ConfigurationError,
    ContractError,
    DimensionError,
    MvnasError,
    NumericError,
    ValidationError,
)

__all__ = [
    "Tensor",
    "backward",
    "no_grad",
    "MvnasError",
    "ConfigurationError",
    "DimensionError",
    "ContractError",
    "NumericError",
    "ValidationError",
    "__version__",
]
