"""
Parameterised building blocks shared by the model modules.
"""
from typing import Optional

import numpy as np

from ..core import numerics as F
from ..core.errors import DimensionError
from ..core.module import Module
from ..core.numerics import Tensor


def he_normal(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    """He-style fan-in scaled normal initialisation."""
    return rng.normal(0.0, np.sqrt(2.0 / max(1, fan_in)), size=shape)


def xavier_uniform(rng: np.random.Generator, shape, fan_in: int, fan_out: int) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape)


class Linear(Module):
    """Dense layer ``y = x W + b`` over the last axis."""

    def __init__(
        self,
        in_features: int,
        out_features: int,
        rng: Optional[np.random.Generator] = None,
        bias: bool = True,
        zero_init: bool = False,
        init_scale: float = 1.0,
    ):
        super().__init__()
        self.in_features = in_features
        self.out_features = out_features
        shape = (in_features, out_features)
        if zero_init or rng is None:
            weight = np.zeros(shape)
        else:
            weight = xavier_uniform(rng, shape, in_features, out_features) * init_scale
        self.weight = self.add_parameter("weight", weight)
        self.bias = self.add_parameter("bias", np.zeros(out_features)) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        if x.shape[-1] != self.in_features:
            raise DimensionError(
                f"Linear expects last dimension {self.in_features}", x.shape, self.weight.shape
            )
        out = F.matmul(x, self.weight)
        if self.bias is not None:
            out = out + self.bias
        return out


class LayerNorm(Module):
    """Layer normalisation over the last axis with a learned scale and shift."""

    def __init__(self, features: int, eps: float = 1e-5):
        super().__init__()
        self.eps = eps
        self.scale = self.add_parameter("scale", np.ones(features))
        self.shift = self.add_parameter("shift", np.zeros(features))

    def __call__(self, x: Tensor) -> Tensor:
        return F.layer_norm(x, axis=-1, eps=self.eps) * self.scale + self.shift


class ChannelLayerNorm(Module):
    """
    Normalise each spatial position of a [B, C, H, W] map over its channels.

    Statistics never mix frames, so encoding one frame alone or inside a
    batch gives identical results.
    """

    def __init__(self, channels: int, eps: float = 1e-5):
        super().__init__()
        self.eps = eps
        self.scale = self.add_parameter("scale", np.ones((1, channels, 1, 1)))
        self.shift = self.add_parameter("shift", np.zeros((1, channels, 1, 1)))

    def __call__(self, x: Tensor) -> Tensor:
        return F.layer_norm(x, axis=1, eps=self.eps) * self.scale + self.shift


class Conv2d(Module):
    """Bias-free 2-D convolution; ``groups == in_channels`` gives a depthwise conv."""

    def __init__(
        self,
        in_channels: int,
        out_channels: int,
        kernel_size: int,
        rng: np.random.Generator,
        stride: int = 1,
        padding: int = 0,
        groups: int = 1,
    ):
        super().__init__()
        self.stride = stride
        self.padding = padding
        self.groups = groups
        fan_in = (in_channels // groups) * kernel_size * kernel_size
        shape = (out_channels, in_channels // groups, kernel_size, kernel_size)
        self.kernel = self.add_parameter("kernel", he_normal(rng, shape, fan_in))

    def __call__(self, x: Tensor) -> Tensor:
        return F.conv2d(x, self.kernel, self.stride, self.padding, self.groups)


class Embedding(Module):
    """Learned lookup table of ``count`` vectors."""

    def __init__(self, count: int, dim: int, rng: np.random.Generator, scale: float = 0.02):
        super().__init__()
        self.table = self.add_parameter("table", rng.normal(0.0, scale, size=(count, dim)))

    def __call__(self, indices) -> Tensor:
        return F.embedding(self.table, indices)
