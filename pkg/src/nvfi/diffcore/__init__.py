"""Minimal reverse-mode gradient engine used by every loss in the package."""
from . import tape
from .checkpoint import CheckpointError, load_checkpoint, read_header, save_checkpoint
from .params import Adam, ParamStore, decay_factor, finite_diff_check, gradient_of, lr_schedule
from .tape import NonFiniteError, Var, backward, no_grad, stop_gradient

__all__ = [
    "Adam", "CheckpointError", "NonFiniteError", "ParamStore", "Var", "backward",
    "decay_factor", "finite_diff_check", "gradient_of", "load_checkpoint", "lr_schedule",
    "no_grad", "read_header", "save_checkpoint", "stop_gradient", "tape",
]
