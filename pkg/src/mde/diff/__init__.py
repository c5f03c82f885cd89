"""Dense tensors with reverse-mode differentiation, backed by numpy."""

from . import ops
from .gradcheck import GradCheckReport, grad_check, relative_error
from .tensor import (
    ContractError,
    DimensionError,
    GradTape,
    NonFiniteError,
    Tensor,
    as_tensor,
    backward,
)

__all__ = [
    "ContractError",
    "DimensionError",
    "GradCheckReport",
    "GradTape",
    "NonFiniteError",
    "Tensor",
    "as_tensor",
    "backward",
    "grad_check",
    "ops",
    "relative_error",
]
