"""Extended Inception block: 1x1, 3x3, 5x5 and two dilated 3x3 branches, no pooling.

The asymmetric variant replaces every n x n convolution (n > 1) by a 1 x n
followed by an n x 1 convolution of the same width, keeping the dilation on
the axis it applies to. Each spatial branch starts with a 1x1 reduction to the
branch width, so its spatial convolutions map ``w -> w`` channels and the
factorisation saves exactly a factor ``2/n`` of the spatial-kernel weights.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import functional as F
from .layers import ConvUnit, Module
from .tensor import Tensor

VARIANTS = ("standard", "asymmetric")
BRANCH_ORDER = ("1x1", "3x3", "5x5", "dil_a", "dil_b")


def default_widths(out_channels: int, n_branches: int = len(BRANCH_ORDER)) -> tuple[int, ...]:
    """Equal split with the remainder on the 1x1 branch.

    Below one channel per branch the first ``out_channels`` branches get one
    channel each and the rest are left out.
    """
    if out_channels < n_branches:
        return tuple(1 if i < out_channels else 0 for i in range(n_branches))
    base, rem = divmod(out_channels, n_branches)
    return (base + rem,) + (base,) * (n_branches - 1)


@dataclass(frozen=True)
class InceptionSpec:
    in_channels: int
    out_channels: int
    variant: str = "standard"
    branch_dilations: tuple[int, int] = (2, 4)
    widths: tuple[int, ...] | None = None
    batchnorm: bool = True
    branch_widths: tuple[int, ...] = field(init=False, repr=False)

    def __post_init__(self):
        if self.in_channels < 1 or self.out_channels < 1:
            raise ValueError(f"channel counts must be positive, got {self.in_channels} -> {self.out_channels}")
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown inception variant {self.variant!r}; expected one of {VARIANTS}")
        d = tuple(self.branch_dilations)
        if len(d) != 2 or min(d) <= 1 or d[0] == d[1]:
            raise ValueError(f"branch_dilations must be two distinct rates > 1, got {d}")
        widths = tuple(self.widths) if self.widths is not None else default_widths(self.out_channels)
        if len(widths) != len(BRANCH_ORDER) or min(widths) < 0:
            raise ValueError(f"widths must be {len(BRANCH_ORDER)} non-negative ints {BRANCH_ORDER}, got {widths}")
        if sum(widths) != self.out_channels:
            raise ValueError(f"branch widths {widths} sum to {sum(widths)}, not out_channels={self.out_channels}")
        object.__setattr__(self, "branch_dilations", d)
        object.__setattr__(self, "branch_widths", widths)

    def branches(self) -> list[tuple[str, int, int, int]]:
        """(name, width, kernel extent n, dilation) for every present branch."""
        d1, d2 = self.branch_dilations
        geometry = {"1x1": (1, 1), "3x3": (3, 1), "5x5": (5, 1), "dil_a": (3, d1), "dil_b": (3, d2)}
        return [(name, w, *geometry[name]) for name, w in zip(BRANCH_ORDER, self.branch_widths) if w > 0]


def _branch_layers(spec: InceptionSpec, width: int, n: int, d: int) -> list[tuple[int, int, tuple[int, int], tuple[int, int]]]:
    """(in, out, kernel, dilation) of each conv unit in one branch, in order."""
    if n == 1:
        return [(spec.in_channels, width, (1, 1), (1, 1))]
    layers = [(spec.in_channels, width, (1, 1), (1, 1))]
    if spec.variant == "standard":
        layers.append((width, width, (n, n), (d, d)))
    else:
        layers.append((width, width, (1, n), (1, d)))
        layers.append((width, width, (n, 1), (d, 1)))
    return layers


class Branch(Module):
    def __init__(self, units: list[ConvUnit]):
        self.units = units

    def forward(self, x: Tensor) -> Tensor:
        for u in self.units:
            x = u(x)
        return x


class InceptionBlock(Module):
    def __init__(self, spec: InceptionSpec, rng: np.random.Generator, dtype=np.float32):
        self.spec = spec
        self.names = []
        branches = []
        for name, w, n, d in spec.branches():
            units = [
                ConvUnit(ci, co, k, rng, dilation=dil, batchnorm=spec.batchnorm, dtype=dtype)
                for ci, co, k, dil in _branch_layers(spec, w, n, d)
            ]
            branches.append(Branch(units))
            self.names.append(name)
        self.branch = branches

    def children(self):
        for name, b in zip(self.names, self.branch):
            yield name, b

    def forward(self, x: Tensor) -> Tensor:
        if x.shape[1] != self.spec.in_channels:
            raise ValueError(f"inception block expects {self.spec.in_channels} channels, got input {x.shape}")
        return F.concat([b(x) for b in self.branch])


def build_inception(spec: InceptionSpec, rng: np.random.Generator | int = 0, dtype=np.float32) -> InceptionBlock:
    if not isinstance(rng, np.random.Generator):
        rng = np.random.default_rng(rng)
    return InceptionBlock(spec, rng, dtype=dtype)


def parameter_count(spec: InceptionSpec) -> int:
    """Closed-form count of learnable scalars in a block built from ``spec``."""
    total = 0
    for _, w, n, d in spec.branches():
        for ci, co, (kh, kw), _ in _branch_layers(spec, w, n, d):
            total += ci * co * kh * kw
            total += 2 * co if spec.batchnorm else co
    return total


def spatial_kernel_params(spec: InceptionSpec) -> dict[str, int]:
    """Per-branch weight count of the non-pointwise convolutions."""
    out = {}
    for name, w, n, d in spec.branches():
        out[name] = sum(ci * co * kh * kw for ci, co, (kh, kw), _ in _branch_layers(spec, w, n, d) if kh * kw > 1)
    return out


def receptive_field(spec: InceptionSpec) -> int:
    """Largest per-axis receptive field over the branches."""
    return max((n - 1) * d + 1 for _, _, n, d in spec.branches())
