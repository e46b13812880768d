"""Dense-tensor value model, reverse-mode differentiation, and verification."""

from . import gdt, ops
from .fdcheck import (
    NonFiniteValue,
    check_input_grad,
    check_parameter_grads,
    finite_diff_grad,
    rel_error,
)
from .tensor import (
    REAL32,
    REAL64,
    Parameter,
    ShapeError,
    Tensor,
    as_tensor,
    backward,
    from_op,
    grad_enabled,
    no_grad,
)

__all__ = [
    "REAL32",
    "REAL64",
    "NonFiniteValue",
    "Parameter",
    "ShapeError",
    "Tensor",
    "as_tensor",
    "backward",
    "check_input_grad",
    "check_parameter_grads",
    "finite_diff_grad",
    "from_op",
    "gdt",
    "grad_enabled",
    "no_grad",
    "ops",
    "rel_error",
]
