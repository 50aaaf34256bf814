"""Spatial-channel information mining block (SIMB) and its parts.

SIMB keeps the two-stage layout of a transformer block but swaps the
self-attention stage for a large-kernel depthwise convolution (LRDC) and
turns the feed-forward stage into channel refinement in an expanded space
gated by channel attention (ECIR). Both stages are residual.
"""

from __future__ import annotations

import numpy as np

from . import ops
from .module import LayerNorm, Linear, Module, param, trunc_normal
from .tensor import ShapeError, Tensor


class ChannelAttention(Module):
    """Squeeze-excitation gate: pool -> fc -> GELU -> fc -> sigmoid."""

    def __init__(self, channels: int, reduction: int, rng: np.random.Generator):
        if channels % reduction:
            raise ValueError(f"reduction {reduction} does not divide {channels} channels")
        self.fc1 = Linear(channels, channels // reduction, rng)
        self.fc2 = Linear(channels // reduction, channels, rng)

    def gates(self, f: Tensor) -> Tensor:
        return ops.sigmoid(self.fc2(ops.gelu(self.fc1(ops.global_avg_pool(f)))))

    def __call__(self, f: Tensor) -> Tensor:
        return ops.channel_gate(f, self.gates(f))


class LRDC(Module):
    """Long-range dependency capture: ``mlp_out(dwconv(mlp_in(ln(f)))) + f``."""

    def __init__(self, channels: int, kernel_size: int, rng: np.random.Generator):
        if kernel_size % 2 == 0:
            raise ValueError(f"kernel size must be odd, got {kernel_size}")
        self.ln = LayerNorm(channels)
        self.mlp_in = Linear(channels, channels, rng)
        self.dw_weight = param(trunc_normal(rng, (channels, 1, kernel_size, kernel_size)))
        self.dw_bias = param(np.zeros(channels))
        self.mlp_out = Linear(channels, channels, rng, zero=True)
        self.channels = channels
        self.kernel_size = kernel_size

    def __call__(self, f: Tensor) -> Tensor:
        _check_channels("LRDC", f, self.channels)
        h = self.mlp_in(self.ln(f))
        h = ops.dwconv2d(h, self.dw_weight, self.dw_bias, pad=self.kernel_size // 2)
        return ops.add(self.mlp_out(h), f)

    def zero_branches(self) -> None:
        self.mlp_out.zero()


class ECIR(Module):
    """Expanded channel information refinement:
    ``contract(ca(expand(ln(f)))) + f`` with ``expand: C -> e*C``."""

    def __init__(self, channels: int, expansion: int, reduction: int,
                 rng: np.random.Generator):
        if expansion < 1:
            raise ValueError(f"expansion must be >= 1, got {expansion}")
        hidden = expansion * channels
        self.ln = LayerNorm(channels)
        self.expand = Linear(channels, hidden, rng)
        self.ca = ChannelAttention(hidden, reduction, rng)
        self.contract = Linear(hidden, channels, rng, zero=True)
        self.channels = channels
        self.hidden = hidden

    def expanded(self, f: Tensor) -> Tensor:
        h = self.expand(self.ln(f))
        assert h.shape[1] == self.hidden
        return h

    def __call__(self, f: Tensor) -> Tensor:
        _check_channels("ECIR", f, self.channels)
        return ops.add(self.contract(self.ca(self.expanded(f))), f)

    def zero_branches(self) -> None:
        self.contract.zero()


class SIMB(Module):
    """LRDC followed by ECIR. Either stage can be dropped for ablations; a
    block with both dropped is the identity."""

    def __init__(self, channels: int, rng: np.random.Generator, kernel_size: int = 7,
                 expansion: int = 2, reduction: int = 4,
                 use_lrdc: bool = True, use_ecir: bool = True):
        self.lrdc = LRDC(channels, kernel_size, rng) if use_lrdc else None
        self.ecir = ECIR(channels, expansion, reduction, rng) if use_ecir else None
        self.channels = channels

    def __call__(self, f: Tensor) -> Tensor:
        _check_channels("SIMB", f, self.channels)
        if self.lrdc is not None:
            f = self.lrdc(f)
        if self.ecir is not None:
            f = self.ecir(f)
        return f


def _check_channels(name: str, f: Tensor, channels: int) -> None:
    if f.ndim != 4 or f.shape[1] != channels:
        raise ShapeError(f"{name}: expected [B,{channels},H,W], got {f.shape}")

