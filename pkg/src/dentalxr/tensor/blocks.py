"""Parameter containers and the composite blocks used by pretrained backbones."""

from dataclasses import dataclass

import numpy as np

from dentalxr.errors import ShapeError
from dentalxr.tensor import functional as F
from dentalxr.tensor.tensor import Tensor


@dataclass
class LayerParams:
    """Weights of one convolution, separable convolution or dense layer.

    Dense layers use ``kernel`` of shape (in_dim, out_dim). Convolutions use
    ``kernel`` of shape (kh, kw, in_ch, out_ch). Separable convolutions use
    ``depthwise_kernel`` (kh, kw, in_ch, 1) and ``pointwise_kernel``
    (1, 1, in_ch, out_ch) instead of ``kernel``.
    """

    kernel: Tensor = None
    bias: Tensor = None
    depthwise_kernel: Tensor = None
    pointwise_kernel: Tensor = None
    trainable: bool = True

    def __post_init__(self):
        out = self.out_channels
        if self.bias is not None and out is not None and self.bias.shape != (out,):
            raise ShapeError(f"bias shape {self.bias.shape} does not match {out} output units", axis=0)

    @property
    def out_channels(self):
        if self.kernel is not None:
            return self.kernel.shape[-1]
        if self.pointwise_kernel is not None:
            return self.pointwise_kernel.shape[-1]
        return None

    def tensors(self):
        return [t for t in (self.kernel, self.bias, self.depthwise_kernel, self.pointwise_kernel) if t is not None]


@dataclass
class BatchNormParams:
    gamma: Tensor
    beta: Tensor
    moving_mean: np.ndarray
    moving_var: np.ndarray
    eps: float = 1e-3

    def __call__(self, x):
        return F.batch_norm(x, self.gamma, self.beta, self.moving_mean, self.moving_var, self.eps)


def conv_bn(x, conv, bn, stride=1, padding="same"):
    y = F.conv2d(x, conv.kernel, conv.bias, stride=stride, padding=padding)
    return bn(y) if bn is not None else y


def separable_conv(x, params, stride=1, padding="valid"):
    return F.separable_conv2d(x, params.depthwise_kernel, params.pointwise_kernel, params.bias,
                              stride=stride, padding=padding)


def residual_block(x, branch, shortcut=None, stride=1):
    """Bottleneck residual unit: ``relu(branch(x)) + shortcut(x)``.

    ``branch`` is a sequence of (LayerParams, BatchNormParams or None) pairs;
    a ReLU follows every pair except the last, whose output goes through the
    outer ReLU before the shortcut is added. ``stride`` applies to the first
    branch convolution and to the projection. Without a projection the input
    itself is the shortcut, so its shape must match the branch output.
    """
    y = x
    last = len(branch) - 1
    for i, (conv, bn) in enumerate(branch):
        y = conv_bn(y, conv, bn, stride=stride if i == 0 else 1)
        if i != last:
            y = F.relu(y)
    y = F.relu(y)
    if shortcut is not None:
        conv, bn = shortcut
        skip = conv_bn(x, conv, bn, stride=stride)
    else:
        skip = x
    if skip.shape != y.shape:
        raise ShapeError(
            f"residual branch output {y.shape} does not match shortcut {skip.shape}; a projection is required",
            axis=3 if skip.shape[:3] == y.shape[:3] else 1)
    return F.add(y, skip)
