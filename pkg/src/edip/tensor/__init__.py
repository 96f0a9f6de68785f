from .core import (NonFiniteError, ShapeError, Tape, Tensor, as_tensor, backward,
                   default_dtype, set_debug_finite, set_default_dtype)
from .optim import Adam, AdamState, LearningRateSchedule, NonFiniteGradientError, adam_step
from .serialize import FormatError, load_tensor, read_tensor, save_tensor, write_tensor
from . import functional

__all__ = [
    "Adam", "AdamState", "FormatError", "LearningRateSchedule", "NonFiniteError",
    "NonFiniteGradientError", "ShapeError", "Tape", "Tensor", "adam_step", "as_tensor",
    "backward", "default_dtype", "functional", "load_tensor", "read_tensor", "save_tensor",
    "set_debug_finite", "set_default_dtype", "write_tensor",
]
