"""Minimal numpy tensor library with reverse-mode automatic differentiation."""

from . import ops
from .grad import GradCheckReport, backward, finite_difference_check
from .nn import BatchNorm1d, Dropout, Embedding, FeedForward, LayerNorm, Linear, Module
from .ops import forward_op
from .serialize import read_tensor, write_tensor
from .tensor import (
    NonFiniteError,
    Parameter,
    ShapeError,
    Tensor,
    get_dtype,
    grad_enabled,
    no_grad,
    precision,
    set_precision,
)

__all__ = [
    "ops", "forward_op", "backward", "finite_difference_check", "GradCheckReport",
    "Module", "Linear", "LayerNorm", "Embedding", "BatchNorm1d", "Dropout", "FeedForward",
    "Tensor", "Parameter", "ShapeError", "NonFiniteError", "no_grad", "grad_enabled",
    "precision", "set_precision", "get_dtype", "read_tensor", "write_tensor",
]
