"""The full twin-branch enhancement network.

One set of weights serves both views. Each view runs through a shallow 3x3
conv, a three-scale SIMB U-Net encoder, the decoupled interaction module
over the three encoder scales, a SIMB decoder with skip fusion, and a 3x3
reconstruction conv added onto the low-light input.

    stage      scale  width  blocks
    enc1       1      C      N1
    enc2       1/2    2C     N2
    bottleneck 1/4    4C     N3
    dec2       1/2    2C     N4
    dec1       1      C      N5
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field, fields

import numpy as np

from . import ops
from .blocks import SIMB
from .dim import DIM, FeaturePyramid
from .module import Conv2d, Linear, Module
from .tensor import ShapeError, Tensor

ABLATIONS = ("no_cvi", "no_csi", "no_lrdc", "no_ecir")


class ConfigError(ValueError):
    pass


@dataclass
class ModelConfig:
    base_channels: int = 32
    depths: tuple = (4, 4, 2, 2, 4)
    kernel_size: int = 7
    expansion: int = 2
    ca_reduction: int = 4
    no_cvi: bool = False
    no_csi: bool = False
    no_lrdc: bool = False
    no_ecir: bool = False
    cvi_softmax: bool = True
    seed: int = 0

    def __post_init__(self):
        self.depths = tuple(int(d) for d in self.depths)
        self.validate()

    def validate(self) -> None:
        if len(self.depths) != 5 or any(d < 1 for d in self.depths):
            raise ConfigError(f"depths must be five integers >= 1, got {self.depths}")
        if self.base_channels < 4:
            raise ConfigError(f"base_channels must be >= 4, got {self.base_channels}")
        if self.kernel_size < 1 or self.kernel_size % 2 == 0:
            raise ConfigError(f"kernel_size must be odd and positive, got {self.kernel_size}")
        if self.expansion < 1 or self.ca_reduction < 1:
            raise ConfigError("expansion and ca_reduction must be >= 1")
        if (self.expansion * self.base_channels) % self.ca_reduction:
            raise ConfigError(
                f"ca_reduction {self.ca_reduction} must divide expansion*base_channels "
                f"= {self.expansion * self.base_channels}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["depths"] = list(self.depths)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)

    @property
    def ablations(self) -> list:
        return [name for name in ABLATIONS if getattr(self, name)]


class Model(Module):
    def __init__(self, cfg: ModelConfig):
        cfg.validate()
        rng = np.random.default_rng(cfg.seed)
        C = cfg.base_channels
        n1, n2, n3, n4, n5 = cfg.depths
        simb_kw = dict(kernel_size=cfg.kernel_size, expansion=cfg.expansion,
                       reduction=cfg.ca_reduction, use_lrdc=not cfg.no_lrdc,
                       use_ecir=not cfg.no_ecir)

        def stage(n, width):
            return [SIMB(width, rng, **simb_kw) for _ in range(n)]

        self.config = cfg
        self.head = Conv2d(3, C, 3, rng)
        self.enc1 = stage(n1, C)
        self.down1 = Conv2d(C, 2 * C, 3, rng, stride=2)
        self.enc2 = stage(n2, 2 * C)
        self.down2 = Conv2d(2 * C, 4 * C, 3, rng, stride=2)
        self.bottleneck = stage(n3, 4 * C)
        self.dim = DIM(C, rng, use_cvi=not cfg.no_cvi, use_csi=not cfg.no_csi,
                       cvi_softmax=cfg.cvi_softmax, **simb_kw)
        self.up2 = Linear(4 * C, 2 * C, rng)
        self.fuse2 = Linear(4 * C, 2 * C, rng)
        self.dec2 = stage(n4, 2 * C)
        self.up1 = Linear(2 * C, C, rng)
        self.fuse1 = Linear(2 * C, C, rng)
        self.dec1 = stage(n5, C)
        self.tail = Conv2d(C, 3, 3, rng)

    def zero_branches(self) -> None:
        """Zero every residual branch plus head and tail: the model becomes
        the identity on both views."""
        super().zero_branches()
        self.head.zero()
        self.tail.zero()

    def encode(self, x: Tensor) -> tuple:
        f1 = _run(self.enc1, self.head(x))
        f2 = _run(self.enc2, self.down1(f1))
        f3 = _run(self.bottleneck, self.down2(f2))
        return f1, f2, f3

    def decode(self, feats, x: Tensor) -> Tensor:
        f1, f2, f3 = feats
        up = self.up2(ops.resize_bilinear(f3, *f2.shape[2:]))
        d2 = _run(self.dec2, self.fuse2(ops.concat_channels([up, f2])))
        up = self.up1(ops.resize_bilinear(d2, *f1.shape[2:]))
        d1 = _run(self.dec1, self.fuse1(ops.concat_channels([up, f1])))
        return ops.add(self.tail(d1), x)

    def __call__(self, left: Tensor, right: Tensor) -> tuple:
        return forward(self, left, right)


def _run(blocks, f: Tensor) -> Tensor:
    for block in blocks:
        f = block(f)
    return f


def build_model(cfg: ModelConfig | None = None) -> Model:
    return Model(cfg or ModelConfig())


def check_input(left: Tensor, right: Tensor) -> None:
    if left.shape != right.shape:
        raise ShapeError(f"views differ in shape: {left.shape} vs {right.shape}")
    if left.ndim != 4 or left.shape[1] != 3:
        raise ShapeError(f"expected [B,3,H,W] images, got {left.shape}")
    H, W = left.shape[2:]
    if H % 4 or W % 4:
        raise ShapeError(
            f"image extents {H}x{W} must be divisible by 4; reflect-pad the input "
            "(the enhance command does this automatically)")


def forward(model: Model, left: Tensor, right: Tensor) -> tuple:
    """Enhance a stereo pair; returns ``(high_left, high_right)`` unclamped."""
    check_input(left, right)
    B = left.shape[0]
    x = ops.concat([left, right], axis=0)       # both views share every weight
    feats = model.encode(x)
    pyr = FeaturePyramid([f[:B] for f in feats], [f[B:] for f in feats])
    pyr = model.dim(pyr)
    joined = [ops.concat([fl, fr], axis=0) for fl, fr in zip(pyr.left, pyr.right)]
    out = model.decode(joined, x)
    return out[:B], out[B:]
