"""Parameter containers.

A :class:`Module` owns :class:`Tensor` parameters and child modules as plain
attributes. Registration order (attribute assignment order) is the canonical
parameter order used by checkpoints and the optimizer.
"""

from __future__ import annotations

from typing import Iterator

import numpy as np

from . import ops
from .tensor import Tensor


def fan_in_std(shape) -> float:
    """``1/sqrt(3*fan_in)``: the std of the usual uniform(+-1/sqrt(fan_in)) init."""
    return 1.0 / np.sqrt(3.0 * int(np.prod(shape[1:])))


def trunc_normal(rng: np.random.Generator, shape, std: float | None = None) -> np.ndarray:
    """Normal(0, std) resampled until every value lies within two std.

    ``std`` defaults to :func:`fan_in_std` of ``shape`` (first axis = outputs).
    """
    if std is None:
        std = fan_in_std(shape)
    out = rng.standard_normal(shape)
    bad = np.abs(out) > 2.0
    while bad.any():
        out[bad] = rng.standard_normal(int(bad.sum()))
        bad = np.abs(out) > 2.0
    return out * std


def param(data) -> Tensor:
    return Tensor(data, requires_grad=True)


class Module:
    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for name, value in vars(self).items():
            full = f"{prefix}{name}"
            if isinstance(value, Tensor) and value.requires_grad:
                yield full, value
            elif isinstance(value, Module):
                yield from value.named_parameters(full + ".")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{full}.{i}.")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())

    def zero_branches(self) -> None:
        """Zero the last layer of every residual branch this module owns.
        Containers recurse; leaf blocks override."""
        for value in vars(self).values():
            if isinstance(value, Module):
                value.zero_branches()
            elif isinstance(value, (list, tuple)):
                for item in value:
                    if isinstance(item, Module):
                        item.zero_branches()


class Linear(Module):
    """Channel projection ``[B,Ci,H,W] -> [B,Co,H,W]``."""

    def __init__(self, c_in: int, c_out: int, rng: np.random.Generator, zero: bool = False):
        w = np.zeros((c_out, c_in)) if zero else trunc_normal(rng, (c_out, c_in))
        self.weight = param(w)
        self.bias = param(np.zeros(c_out))

    def __call__(self, x: Tensor) -> Tensor:
        return ops.linear_channels(x, self.weight, self.bias)

    def zero(self) -> None:
        self.weight.data = np.zeros_like(self.weight.data)
        self.bias.data = np.zeros_like(self.bias.data)


class Conv2d(Module):
    def __init__(self, c_in: int, c_out: int, k: int, rng: np.random.Generator,
                 stride: int = 1, zero: bool = False):
        shape = (c_out, c_in, k, k)
        self.weight = param(np.zeros(shape) if zero else trunc_normal(rng, shape))
        self.bias = param(np.zeros(c_out))
        self.stride = stride
        self.pad = k // 2

    def __call__(self, x: Tensor) -> Tensor:
        return ops.conv2d(x, self.weight, self.bias, stride=self.stride, pad=self.pad)

    def zero(self) -> None:
        self.weight.data = np.zeros_like(self.weight.data)
        self.bias.data = np.zeros_like(self.bias.data)


class LayerNorm(Module):
    def __init__(self, c: int, eps: float = 1e-6):
        self.gamma = param(np.ones(c))
        self.beta = param(np.zeros(c))
        self.eps = eps

    def __call__(self, x: Tensor) -> Tensor:
        return ops.layer_norm(x, self.gamma, self.beta, self.eps)
