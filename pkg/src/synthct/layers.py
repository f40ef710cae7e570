"""Parameter containers for the network building blocks."""

from __future__ import annotations

from typing import Iterator

import numpy as np

from . import tensor as T
from .tensor import Tensor


class Module:
    """Minimal parameter registry: attributes that are Tensors or Modules are walked in definition order."""

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for name, value in vars(self).items():
            if isinstance(value, Tensor) and value.requires_grad:
                yield prefix + name, value
            elif isinstance(value, Module):
                yield from value.named_parameters(prefix + name + ".")
            elif isinstance(value, list):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{prefix}{name}.{i}.")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


def kaiming(rng: np.random.Generator, shape, fan_in: int) -> Tensor:
    std = np.sqrt(2.0 / fan_in)
    return Tensor(rng.standard_normal(shape) * std, requires_grad=True)


def zeros(shape) -> Tensor:
    return Tensor(np.zeros(shape), requires_grad=True)


def ones(shape) -> Tensor:
    return Tensor(np.ones(shape), requires_grad=True)


class Conv3d(Module):
    def __init__(self, rng, cin: int, cout: int, kernel: int = 3, stride: int = 1, padding: int | None = None):
        self.stride = stride
        self.padding = kernel // 2 if padding is None else padding
        self.weight = kaiming(rng, (cout, cin, kernel, kernel, kernel), cin * kernel**3)
        self.bias = zeros((cout,))

    def forward(self, x: Tensor) -> Tensor:
        return T.conv3d(x, self.weight, self.bias, stride=self.stride, padding=self.padding)


class InstanceNorm3d(Module):
    def __init__(self, channels: int, eps: float = 1e-5):
        self.eps = eps
        self.gain = ones((channels,))
        self.offset = zeros((channels,))

    def forward(self, x: Tensor) -> Tensor:
        return T.instance_norm(x, self.gain, self.offset, self.eps)


class Linear(Module):
    def __init__(self, rng, cin: int, cout: int, bias: bool = True):
        self.weight = kaiming(rng, (cin, cout), cin)
        self.bias = zeros((cout,)) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        return T.linear(x, self.weight, self.bias)


class ConvBlock(Module):
    """Two rounds of 3x3x3 convolution, instance norm and relu."""

    def __init__(self, rng, cin: int, cout: int):
        self.conv1 = Conv3d(rng, cin, cout)
        self.norm1 = InstanceNorm3d(cout)
        self.conv2 = Conv3d(rng, cout, cout)
        self.norm2 = InstanceNorm3d(cout)

    def forward(self, x: Tensor) -> Tensor:
        x = T.relu(self.norm1(self.conv1(x)))
        return T.relu(self.norm2(self.conv2(x)))
