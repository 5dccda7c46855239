"""Minimal module system: named parameters, buffers, train/eval switching."""

from __future__ import annotations

from typing import Iterator

import numpy as np

from . import functional as F
from .tensor import Parameter, Tensor


class Module:
    training: bool = True

    def children(self) -> Iterator[tuple[str, "Module"]]:
        for key, val in vars(self).items():
            if isinstance(val, Module):
                yield key, val
            elif isinstance(val, (list, tuple)):
                for i, item in enumerate(val):
                    if isinstance(item, Module):
                        yield f"{key}{i}", item

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Parameter]]:
        for key, val in vars(self).items():
            if isinstance(val, Parameter):
                yield prefix + key, val
        for key, child in self.children():
            yield from child.named_parameters(f"{prefix}{key}/")

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]

    def named_buffers(self, prefix: str = "") -> Iterator[tuple[str, np.ndarray]]:
        for key, val in getattr(self, "_buffers", {}).items():
            yield prefix + key, val
        for key, child in self.children():
            yield from child.named_buffers(f"{prefix}{key}/")

    def modules(self) -> Iterator["Module"]:
        yield self
        for _, child in self.children():
            yield from child.modules()

    def train(self, mode: bool = True) -> "Module":
        for m in self.modules():
            m.training = mode
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def num_parameters(self) -> int:
        return int(np.sum([p.data.size for p in self.parameters()]))

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


def he_normal(rng: np.random.Generator, shape: tuple[int, ...], dtype) -> np.ndarray:
    fan_in = int(np.prod(shape[1:]))
    return (rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)).astype(dtype)


class Conv2d(Module):
    def __init__(
        self,
        in_ch: int,
        out_ch: int,
        kernel: tuple[int, int],
        rng: np.random.Generator,
        dilation: tuple[int, int] = (1, 1),
        bias: bool = True,
        dtype=np.float32,
    ):
        self.kernel = tuple(kernel)
        self.dilation = tuple(dilation)
        self.weight = Parameter(he_normal(rng, (out_ch, in_ch, *self.kernel), dtype))
        self.bias = Parameter(np.zeros(out_ch, dtype=dtype)) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        return F.conv2d(x, self.weight, self.bias, dilation=self.dilation)


class BatchNorm2d(Module):
    def __init__(self, channels: int, dtype=np.float32, momentum: float = 0.1, eps: float = 1e-5):
        self.gamma = Parameter(np.ones(channels, dtype=dtype))
        self.beta = Parameter(np.zeros(channels, dtype=dtype))
        self._buffers = {
            "running_mean": np.zeros(channels, dtype=dtype),
            "running_var": np.ones(channels, dtype=dtype),
        }
        self.momentum = momentum
        self.eps = eps

    def forward(self, x: Tensor) -> Tensor:
        return F.batchnorm2d(
            x,
            self.gamma,
            self.beta,
            self._buffers["running_mean"],
            self._buffers["running_var"],
            training=self.training,
            momentum=self.momentum,
            eps=self.eps,
        )


class ConvUnit(Module):
    """conv -> [batchnorm] -> relu. The conv drops its bias when batchnorm follows."""

    def __init__(self, in_ch, out_ch, kernel, rng, dilation=(1, 1), batchnorm=True, dtype=np.float32):
        self.conv = Conv2d(in_ch, out_ch, kernel, rng, dilation=dilation, bias=not batchnorm, dtype=dtype)
        self.norm = BatchNorm2d(out_ch, dtype=dtype) if batchnorm else None

    def forward(self, x: Tensor) -> Tensor:
        y = self.conv(x)
        if self.norm is not None:
            y = self.norm(y)
        return F.relu(y)
