"""Parameter-holding layers on top of the primitives."""
from __future__ import annotations

import numpy as np

from . import ops
from .tensor import Tensor


def _uniform(rng: np.random.Generator, shape, bound: float) -> Tensor:
    return Tensor(rng.uniform(-bound, bound, size=shape).astype(np.float32), requires_grad=True)


class Module:
    """Minimal container: parameters and buffers are discovered by attribute walk."""

    def named_parameters(self, prefix: str = ""):
        for key, value in vars(self).items():
            name = f"{prefix}{key}"
            if isinstance(value, Tensor) and value.requires_grad:
                yield name, value
            elif isinstance(value, Module):
                yield from value.named_parameters(name + ".")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{name}.{i}.")

    def named_buffers(self, prefix: str = ""):
        for key, value in vars(self).items():
            name = f"{prefix}{key}"
            if isinstance(value, ops.BatchNormState):
                yield f"{name}.running_mean", value.running_mean
                yield f"{name}.running_var", value.running_var
            elif isinstance(value, Module):
                yield from value.named_buffers(name + ".")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_buffers(f"{name}.{i}.")


class Linear(Module):
    def __init__(self, rng, n_in: int, n_out: int):
        bound = 1.0 / np.sqrt(n_in)
        self.weight = _uniform(rng, (n_out, n_in), bound)
        self.bias = _uniform(rng, (n_out,), bound)

    def __call__(self, x: Tensor) -> Tensor:
        return ops.linear(x, self.weight, self.bias)


class Conv3d(Module):
    def __init__(self, rng, c_in: int, c_out: int, kernel: int, stride: int = 1, padding: int = 0):
        bound = 1.0 / np.sqrt(c_in * kernel ** 3)
        self.weight = _uniform(rng, (c_out, c_in, kernel, kernel, kernel), bound)
        self.bias = _uniform(rng, (c_out,), bound)
        self.stride = stride
        self.padding = padding

    def __call__(self, x: Tensor) -> Tensor:
        return ops.conv3d(x, self.weight, self.bias, self.stride, self.padding)


class ConvTranspose3d(Module):
    def __init__(self, rng, c_in: int, c_out: int, kernel: int, stride: int = 1, padding: int = 0):
        bound = 1.0 / np.sqrt(c_out * kernel ** 3)
        self.weight = _uniform(rng, (c_in, c_out, kernel, kernel, kernel), bound)
        self.bias = _uniform(rng, (c_out,), bound)
        self.stride = stride
        self.padding = padding

    def __call__(self, x: Tensor) -> Tensor:
        return ops.conv_transpose3d(x, self.weight, self.bias, self.stride, self.padding)


class GroupNorm(Module):
    def __init__(self, channels: int, groups: int | None = None):
        self.groups = ops.default_groups(channels) if groups is None else groups
        self.weight = Tensor(np.ones(channels, np.float32), requires_grad=True)
        self.bias = Tensor(np.zeros(channels, np.float32), requires_grad=True)

    def __call__(self, x: Tensor) -> Tensor:
        return ops.group_norm(x, self.weight, self.bias, self.groups)


class BatchNorm(Module):
    def __init__(self, channels: int, momentum: float = 0.9):
        self.weight = Tensor(np.ones(channels, np.float32), requires_grad=True)
        self.bias = Tensor(np.zeros(channels, np.float32), requires_grad=True)
        self.state = ops.BatchNormState(channels, momentum)
        self.training = True

    def __call__(self, x: Tensor) -> Tensor:
        return ops.batch_norm(x, self.weight, self.bias, self.state, self.training)
