"""Float64 arrays with reverse-mode differentiation."""

from . import ops
from .checkpoint import load_tensors, save_tensors
from .core import DimensionError, TapeError, Tensor, backward, is_grad_enabled, no_grad
from .gradcheck import gradcheck, model_gradcheck, relative_error
from .optim import Adam, AdamState, adam_step

__all__ = [
    "Adam",
    "AdamState",
    "DimensionError",
    "TapeError",
    "Tensor",
    "adam_step",
    "backward",
    "gradcheck",
    "is_grad_enabled",
    "load_tensors",
    "model_gradcheck",
    "no_grad",
    "ops",
    "relative_error",
    "save_tensors",
]
