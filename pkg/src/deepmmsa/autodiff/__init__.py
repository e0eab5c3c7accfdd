"""Minimal reverse-mode autodiff engine with the ops the survival network needs."""

from .adam import AdamState, adam_step
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .functional import (
    RunningStats,
    add,
    batch_norm,
    concat,
    conv3d,
    global_avg_pool3d,
    linear,
    mean,
    mse_l2_objective,
    relu,
    reshape,
    scale,
    sigmoid,
    sum_squares,
)
from .tensor import Tensor, backward, default_dtype, get_default_dtype, set_default_dtype

__all__ = [
    "AdamState", "CheckpointError", "RunningStats", "Tensor", "adam_step", "add", "backward",
    "batch_norm", "concat", "conv3d", "default_dtype", "get_default_dtype", "global_avg_pool3d",
    "linear", "load_checkpoint", "mean", "mse_l2_objective", "relu", "reshape", "save_checkpoint",
    "scale", "set_default_dtype", "sigmoid", "sum_squares",
]
