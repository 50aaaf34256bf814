"""Decoupled interaction module: cross-view interaction at every scale, then
cross-scale interaction within each view.

Cross-view interaction (CVI) correlates the two views row by row only;
rectified stereo pairs differ by horizontal shifts, so no vertical mixing
happens inside CVI.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import ops
from .blocks import SIMB
from .module import Linear, Module
from .tensor import ShapeError, Tensor

NUM_SCALES = 3


@dataclass
class FeaturePyramid:
    """Per-view features at three scales: ``[B,C,H,W]``, ``[B,2C,H/2,W/2]``,
    ``[B,4C,H/4,W/4]``."""

    left: tuple
    right: tuple

    def __post_init__(self):
        self.left, self.right = tuple(self.left), tuple(self.right)
        validate_pyramid(self.left)
        validate_pyramid(self.right)
        for a, b in zip(self.left, self.right):
            if a.shape != b.shape:
                raise ShapeError(f"left/right pyramid mismatch: {a.shape} vs {b.shape}")

    def swapped(self) -> "FeaturePyramid":
        return FeaturePyramid(self.right, self.left)


def validate_pyramid(feats: Sequence[Tensor]) -> None:
    if len(feats) != NUM_SCALES:
        raise ShapeError(f"pyramid needs {NUM_SCALES} scales, got {len(feats)}")
    for f in feats:
        if f.ndim != 4:
            raise ShapeError(f"pyramid level must be [B,C,H,W], got {f.shape}")
    for fine, coarse in zip(feats, feats[1:]):
        expect = (fine.shape[0], coarse.shape[1], fine.shape[2] // 2, fine.shape[3] // 2)
        if coarse.shape != expect:
            raise ShapeError(f"pyramid level {coarse.shape} is not a halving of {fine.shape}")


def correlation(lq: Tensor, rk: Tensor) -> Tensor:
    """Row-wise correlation ``M[b,h] = L[b,:,h,:]^T R[b,:,h,:]`` of shape
    ``[B,H,W,W]``: entry ``[b,h,i,j]`` pairs left column i with right column j."""
    return ops.matmul_batched(ops.permute(lq, (0, 2, 3, 1)), ops.permute(rk, (0, 2, 1, 3)))


class CVI(Module):
    """Symmetric parallax-style attention between the two views at one scale.

    Query and key share one projection, so the right view's correlation is
    exactly the transpose of the left view's; values and the output fuse are
    shared too, which makes the block view-swap equivariant.
    """

    def __init__(self, channels: int, rng: np.random.Generator, softmax: bool = True):
        self.proj = Linear(channels, channels, rng)
        self.value = Linear(channels, channels, rng)
        self.fuse = Linear(2 * channels, channels, rng, zero=True)
        self.channels = channels
        self.softmax = softmax

    def attention(self, m_cor: Tensor) -> Tensor:
        return ops.softmax_lastdim(m_cor) if self.softmax else m_cor

    def __call__(self, left: Tensor, right: Tensor):
        if left.shape != right.shape:
            raise ShapeError(f"CVI: view shapes differ: {left.shape} vs {right.shape}")
        if left.ndim != 4 or left.shape[1] != self.channels:
            raise ShapeError(f"CVI: expected [B,{self.channels},H,W], got {left.shape}")
        m_cor = correlation(self.proj(left), self.proj(right))
        m_cor_t = ops.permute(m_cor, (0, 1, 3, 2))
        v_left = ops.permute(self.value(left), (0, 2, 3, 1))     # B,H,W,C
        v_right = ops.permute(self.value(right), (0, 2, 3, 1))
        t_left = ops.matmul_batched(self.attention(m_cor), v_right)
        t_right = ops.matmul_batched(self.attention(m_cor_t), v_left)
        t_left = ops.permute(t_left, (0, 3, 1, 2))
        t_right = ops.permute(t_right, (0, 3, 1, 2))
        out_left = ops.add(left, self.fuse(ops.concat_channels([left, t_left])))
        out_right = ops.add(right, self.fuse(ops.concat_channels([right, t_right])))
        return out_left, out_right, m_cor

    def zero_branches(self) -> None:
        self.fuse.zero()


class CSI(Module):
    """Cross-scale interaction for one view.

    For each target scale the other two levels are bilinearly resized to its
    grid and all three are concatenated (C + 2C + 4C channels). A per-scale
    projection reduces back to the native width, one SIMB refines, and the
    original level is added back.
    """

    def __init__(self, base_channels: int, rng: np.random.Generator, **simb_kwargs):
        widths = [base_channels * 2 ** s for s in range(NUM_SCALES)]
        total = sum(widths)
        self.reduce = [Linear(total, w, rng, zero=True) for w in widths]
        self.simb = [SIMB(w, rng, **simb_kwargs) for w in widths]
        self.widths = widths

    def dense_concat(self, feats: Sequence[Tensor], scale: int) -> Tensor:
        H, W = feats[scale].shape[2:]
        return ops.concat_channels([ops.resize_bilinear(f, H, W) for f in feats])

    def __call__(self, feats: Sequence[Tensor]) -> tuple:
        validate_pyramid(feats)
        for f, w in zip(feats, self.widths):
            if f.shape[1] != w:
                raise ShapeError(f"CSI: level {f.shape} does not have {w} channels")
        out = []
        for s in range(NUM_SCALES):
            h = self.simb[s](self.reduce[s](self.dense_concat(feats, s)))
            out.append(ops.add(feats[s], h))
        return tuple(out)

    def zero_branches(self) -> None:
        for lin in self.reduce:
            lin.zero()
        for block in self.simb:
            block.zero_branches()


class DIM(Module):
    def __init__(self, base_channels: int, rng: np.random.Generator, use_cvi: bool = True,
                 use_csi: bool = True, cvi_softmax: bool = True, **simb_kwargs):
        self.cvi = [CVI(base_channels * 2 ** s, rng, softmax=cvi_softmax)
                    for s in range(NUM_SCALES)] if use_cvi else []
        self.csi = CSI(base_channels, rng, **simb_kwargs) if use_csi else None

    def cross_view(self, pyr: FeaturePyramid) -> tuple[FeaturePyramid, list]:
        if not self.cvi:
            return pyr, []
        left, right, vols = [], [], []
        for block, fl, fr in zip(self.cvi, pyr.left, pyr.right):
            l2, r2, m = block(fl, fr)
            left.append(l2)
            right.append(r2)
            vols.append(m)
        return FeaturePyramid(left, right), vols

    def cross_scale(self, pyr: FeaturePyramid) -> FeaturePyramid:
        if self.csi is None:
            return pyr
        return FeaturePyramid(self.csi(pyr.left), self.csi(pyr.right))

    def __call__(self, pyr: FeaturePyramid) -> FeaturePyramid:
        pyr, _ = self.cross_view(pyr)
        return self.cross_scale(pyr)
