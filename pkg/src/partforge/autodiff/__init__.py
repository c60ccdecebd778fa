"""Minimal reverse-mode automatic differentiation over dense numpy tensors."""
from . import ops
from .checkpoint import CheckpointError, load_table, save_table, table_from_bytes, table_to_bytes
from .gradcheck import GradCheckReport, grad_check, relative_error
from .layers import BatchNorm, Conv3d, ConvTranspose3d, GroupNorm, Linear, Module
from .ops import ShapeError, conv_output_size
from .tensor import Tape, Tensor, as_tensor, no_grad

__all__ = [
    "BatchNorm", "CheckpointError", "Conv3d", "ConvTranspose3d", "GradCheckReport", "GroupNorm",
    "Linear", "Module", "ShapeError", "Tape", "Tensor", "as_tensor", "conv_output_size", "grad_check",
    "load_table", "no_grad", "ops", "relative_error", "save_table", "table_from_bytes", "table_to_bytes",
]
