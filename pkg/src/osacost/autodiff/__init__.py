"""Minimal dense-tensor library with reverse-mode autodiff."""

from . import ops
from .kernels import BACKEND
from .ops import ShapeError
from .optim import SGD, Adam, sgd_or_adam_step
from .tensor import (
    Tape,
    Tensor,
    as_tensor,
    backward,
    default_dtype,
    get_default_dtype,
    grad_enabled,
    no_grad,
    set_default_dtype,
)

__all__ = [
    "BACKEND",
    "SGD",
    "Adam",
    "ShapeError",
    "Tape",
    "Tensor",
    "as_tensor",
    "backward",
    "default_dtype",
    "get_default_dtype",
    "grad_enabled",
    "no_grad",
    "ops",
    "set_default_dtype",
    "sgd_or_adam_step",
]
