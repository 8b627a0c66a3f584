"""Small reverse-mode autodiff engine over ``(N, C, H, W)`` grids."""

from .gradcheck import GradCheckReport, compare, grad_check, numeric_grad
from .nn import BatchNorm2d, Conv2d, ConvTranspose2d, DeformConv2d, Module
from .ops import (add, batchnorm2d, bilinear_sample, concat_channels, conv2d, conv_transpose2d,
                  deform_conv2d, maxpool2x2, mse_loss, relu, weighted_sum)
from .optim import Adam, AdamState, adam_step
from .tensor import Tensor, is_grad_enabled, no_grad

__all__ = [
    "Adam", "AdamState", "BatchNorm2d", "Conv2d", "ConvTranspose2d", "DeformConv2d", "GradCheckReport",
    "Module", "Tensor", "adam_step", "add", "batchnorm2d", "bilinear_sample", "compare", "concat_channels",
    "conv2d", "conv_transpose2d", "deform_conv2d", "grad_check", "is_grad_enabled", "maxpool2x2", "mse_loss",
    "no_grad", "numeric_grad", "relu", "weighted_sum",
]
