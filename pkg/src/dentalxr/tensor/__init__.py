"""Tensor arithmetic and reverse-mode differentiation."""

from dentalxr.tensor import functional
from dentalxr.tensor.blocks import BatchNormParams, LayerParams, residual_block, separable_conv
from dentalxr.tensor.rng import RngState
from dentalxr.tensor.tensor import Tensor, as_tensor, default_dtype, precision, set_default_dtype

__all__ = [
    "BatchNormParams",
    "LayerParams",
    "RngState",
    "Tensor",
    "as_tensor",
    "default_dtype",
    "functional",
    "precision",
    "residual_block",
    "separable_conv",
    "set_default_dtype",
]
