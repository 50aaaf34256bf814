"""Stereo pair I/O, low-light synthesis, cropping and batch iteration.

Manifests are CSV files with header ``id,left,right,gt_left,gt_right``;
paths are relative to the manifest's directory and the GT columns may be
empty. Images are 8-bit RGB PNGs held in memory as ``[3,H,W]`` float64 in
[0, 1].
"""

from __future__ import annotations

import csv
import os
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Iterator, Optional, Sequence

import numpy as np
from PIL import Image

MANIFEST_HEADER = ["id", "left", "right", "gt_left", "gt_right"]
DEFAULT_CROP = 128


class DataError(ValueError):
    pass


def derive_seed(*parts: int) -> int:
    """Stable 63-bit seed from a tuple of non-negative integers."""
    state = np.random.SeedSequence([int(p) for p in parts]).generate_state(2, dtype=np.uint32)
    return int(state[0]) << 31 | int(state[1]) >> 1


# ---------------------------------------------------------------- images

def load_png(path) -> np.ndarray:
    try:
        with Image.open(path) as img:
            if img.mode not in ("RGB", "L", "P"):
                raise DataError(f"{path}: unsupported PNG mode {img.mode} (need 8-bit RGB)")
            arr = np.asarray(img.convert("RGB"), dtype=np.float64)
    except (OSError, SyntaxError) as exc:
        raise DataError(f"cannot read image {path}: {exc}") from exc
    return np.ascontiguousarray(arr.transpose(2, 0, 1) / 255.0)


def quantize(img: np.ndarray) -> np.ndarray:
    """``[3,H,W]`` float in [0,1] (clipped) -> ``[H,W,3]`` uint8."""
    arr = np.floor(np.clip(img, 0.0, 1.0) * 255.0 + 0.5).astype(np.uint8)
    return arr.transpose(1, 2, 0) if arr.ndim == 3 else arr


def save_png(path, img: np.ndarray) -> None:
    arr = img if img.dtype == np.uint8 else quantize(img)
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(arr).save(path, format="PNG")


# ---------------------------------------------------------------- pairs

@dataclass
class StereoPair:
    left: np.ndarray
    right: np.ndarray
    gt_left: Optional[np.ndarray] = None
    gt_right: Optional[np.ndarray] = None
    id: str = ""
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.left.shape != self.right.shape:
            raise DataError(f"pair {self.id!r}: left {self.left.shape} vs right {self.right.shape}")
        if (self.gt_left is None) != (self.gt_right is None):
            raise DataError(f"pair {self.id!r}: ground truth must cover both views")
        if self.gt_left is not None and (self.gt_left.shape != self.left.shape
                                         or self.gt_right.shape != self.left.shape):
            raise DataError(f"pair {self.id!r}: ground truth shape differs from input")
        if self.left.ndim != 3 or self.left.shape[0] != 3:
            raise DataError(f"pair {self.id!r}: images must be [3,H,W], got {self.left.shape}")
        for img in self.images():
            if img.min() < 0.0 or img.max() > 1.0:
                raise DataError(f"pair {self.id!r}: image values outside [0, 1]")

    @property
    def has_gt(self) -> bool:
        return self.gt_left is not None

    @property
    def size(self) -> tuple:
        return self.left.shape[1:]

    def images(self) -> list:
        out = [self.left, self.right]
        if self.has_gt:
            out += [self.gt_left, self.gt_right]
        return out


@dataclass
class SynthesisRanges:
    """Uniform ranges for the per-pair darkening ``beta * gt**gamma + noise``."""

    gamma: tuple = (2.0, 3.5)
    scale: tuple = (0.25, 0.6)
    noise_sigma: tuple = (0.01, 0.05)


def synthesize_lowlight(pair: StereoPair, seed: int,
                        ranges: SynthesisRanges | None = None) -> StereoPair:
    """Darken the ground truth of ``pair`` into a low-light input.

    gamma, scale and noise sigma are drawn once per pair and shared by both
    views; the Gaussian noise itself is independent per pixel and view.
    The drawn values are recorded in ``meta``.
    """
    if not pair.has_gt:
        raise DataError(f"pair {pair.id!r} has no ground truth to synthesize from")
    ranges = ranges or SynthesisRanges()
    rng = np.random.default_rng(seed)
    gamma = rng.uniform(*ranges.gamma)
    scale = rng.uniform(*ranges.scale)
    sigma = rng.uniform(*ranges.noise_sigma)

    def darken(gt):
        low = scale * np.power(gt, gamma)
        if sigma > 0:
            low = low + rng.normal(0.0, sigma, size=gt.shape)
        return np.clip(low, 0.0, 1.0)

    left, right = darken(pair.gt_left), darken(pair.gt_right)
    meta = dict(pair.meta, gamma=float(gamma), scale=float(scale), sigma=float(sigma))
    return replace(pair, left=left, right=right, meta=meta)


def random_crop(pair: StereoPair, size: int = DEFAULT_CROP, seed: int = 0) -> StereoPair:
    """One window of ``size x size``, shared by both views and both GTs."""
    H, W = pair.size
    if size > min(H, W):
        raise DataError(f"crop {size} exceeds image {H}x{W} of pair {pair.id!r}")
    if size % 4:
        raise DataError(f"crop size {size} must be divisible by 4")
    rng = np.random.default_rng(seed)
    top = int(rng.integers(0, H - size + 1))
    left = int(rng.integers(0, W - size + 1))
    return _window(pair, top, left, size, size)


def center_crop(pair: StereoPair, multiple: int = 4) -> StereoPair:
    """Largest centred crop whose extents are multiples of ``multiple``."""
    H, W = pair.size
    h, w = H - H % multiple, W - W % multiple
    if h == 0 or w == 0:
        raise DataError(f"pair {pair.id!r} of size {H}x{W} is too small")
    return _window(pair, (H - h) // 2, (W - w) // 2, h, w)


def _window(pair: StereoPair, top: int, left: int, h: int, w: int) -> StereoPair:
    def cut(img):
        return None if img is None else np.ascontiguousarray(img[:, top:top + h, left:left + w])

    return replace(pair, left=cut(pair.left), right=cut(pair.right),
                   gt_left=cut(pair.gt_left), gt_right=cut(pair.gt_right),
                   meta=dict(pair.meta, crop=(top, left, h, w)))


# ---------------------------------------------------------------- synthetic scenes

def synthetic_scene_pair(size: int = 64, seed: int = 0, max_disparity: int = 4,
                         pair_id: str = "") -> StereoPair:
    """Well-lit rectified stereo pair of a random piecewise-smooth scene.

    A gradient background with sinusoidal texture sits at a small disparity
    and a few coloured rectangles float in front at larger ones; the right
    view sees each layer shifted left by its disparity. Both images are
    returned as ground truth and as (identical) inputs.
    """
    rng = np.random.default_rng(seed)
    H = W = size
    pad = max_disparity + 1
    canvas_w = W + pad
    yy, xx = np.mgrid[0:H, 0:canvas_w] / max(size, 1)

    base = rng.uniform(0.25, 0.85, size=3)
    tilt = rng.uniform(-0.25, 0.25, size=(3, 2))
    freq = rng.uniform(2.0, 9.0, size=2)
    phase = rng.uniform(0, 2 * np.pi, size=2)
    texture = 0.08 * np.sin(2 * np.pi * freq[0] * xx + phase[0]) \
        * np.cos(2 * np.pi * freq[1] * yy + phase[1])
    bg = np.stack([base[c] + tilt[c, 0] * xx + tilt[c, 1] * yy + texture
                   for c in range(3)])
    d_bg = int(rng.integers(0, max(1, max_disparity // 2) + 1))
    left = bg[:, :, :W].copy()
    right = bg[:, :, d_bg:d_bg + W].copy()

    for _ in range(int(rng.integers(2, 5))):
        h, w = (int(v) for v in rng.integers(size // 8, size // 3 + 1, size=2))
        top = int(rng.integers(0, H - h + 1))
        x0 = int(rng.integers(0, W - w + 1))
        d = int(rng.integers(d_bg, max_disparity + 1))
        colour = rng.uniform(0.1, 1.0, size=3)[:, None, None]
        shade = 1.0 - 0.3 * (yy[:h, :w] - yy[0, 0])
        patch = np.clip(colour * shade, 0.0, 1.0)
        left[:, top:top + h, x0:x0 + w] = patch
        xr = x0 - d
        lo, hi = max(xr, 0), min(xr + w, W)
        if hi > lo:
            right[:, top:top + h, lo:hi] = patch[:, :, lo - xr:hi - xr]

    left, right = np.clip(left, 0.0, 1.0), np.clip(right, 0.0, 1.0)
    return StereoPair(left, right, left.copy(), right.copy(), id=pair_id or f"scene{seed}")


# ---------------------------------------------------------------- manifests

@dataclass
class ManifestRow:
    id: str
    left: Path
    right: Path
    gt_left: Optional[Path] = None
    gt_right: Optional[Path] = None

    @property
    def has_gt(self) -> bool:
        return self.gt_left is not None and self.gt_right is not None


@dataclass
class Manifest:
    rows: list
    root: Path = Path(".")

    def __len__(self) -> int:
        return len(self.rows)


def load_manifest(path) -> Manifest:
    path = Path(path)
    if not path.exists():
        raise DataError(f"manifest {path} does not exist")
    root = path.parent
    rows, seen = [], set()
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None:
            return Manifest([], root)
        missing = [c for c in MANIFEST_HEADER if c not in reader.fieldnames]
        if missing:
            raise DataError(f"manifest {path}: missing columns {missing}")
        for lineno, rec in enumerate(reader, start=2):
            rid = (rec["id"] or "").strip()
            if not rid:
                raise DataError(f"manifest {path} line {lineno}: empty id")
            if rid in seen:
                raise DataError(f"manifest {path} line {lineno}: duplicate id {rid!r}")
            seen.add(rid)
            paths = {}
            for col in MANIFEST_HEADER[1:]:
                val = (rec[col] or "").strip()
                if not val:
                    if col in ("left", "right"):
                        raise DataError(f"manifest row {rid!r}: empty {col} path")
                    paths[col] = None
                    continue
                p = root / val
                if not p.exists():
                    raise DataError(f"manifest row {rid!r}: {col} file {p} does not exist")
                paths[col] = p
            if (paths["gt_left"] is None) != (paths["gt_right"] is None):
                raise DataError(f"manifest row {rid!r}: give both GT paths or neither")
            rows.append(ManifestRow(rid, **paths))
    return Manifest(rows, root)


def write_manifest(path, rows: Sequence[ManifestRow]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)

    def rel(p):
        return "" if p is None else os.path.relpath(p, path.parent)

    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(MANIFEST_HEADER)
        for r in rows:
            writer.writerow([r.id, rel(r.left), rel(r.right), rel(r.gt_left), rel(r.gt_right)])


def load_pair(row: ManifestRow) -> StereoPair:
    try:
        imgs = [load_png(row.left), load_png(row.right)]
        if row.has_gt:
            imgs += [load_png(row.gt_left), load_png(row.gt_right)]
        else:
            imgs += [None, None]
        return StereoPair(*imgs, id=row.id)
    except DataError as exc:
        raise DataError(f"manifest row {row.id!r}: {exc}") from exc


# ---------------------------------------------------------------- batching

@dataclass
class Batch:
    ids: list
    left: np.ndarray
    right: np.ndarray
    gt_left: Optional[np.ndarray]
    gt_right: Optional[np.ndarray]
    pairs: list

    def __len__(self) -> int:
        return len(self.ids)


def stack_pairs(pairs: Sequence[StereoPair]) -> Batch:
    sizes = {p.size for p in pairs}
    if len(sizes) > 1:
        raise DataError(f"cannot batch pairs of different sizes {sorted(sizes)}")
    has_gt = all(p.has_gt for p in pairs)
    return Batch(
        ids=[p.id for p in pairs],
        left=np.stack([p.left for p in pairs]),
        right=np.stack([p.right for p in pairs]),
        gt_left=np.stack([p.gt_left for p in pairs]) if has_gt else None,
        gt_right=np.stack([p.gt_right for p in pairs]) if has_gt else None,
        pairs=list(pairs),
    )


def iterate(manifest, batch_size: int, shuffle_seed: Optional[int] = None,
            transform: Optional[Callable[[StereoPair, int], StereoPair]] = None,
            loader: Callable[[ManifestRow], StereoPair] = load_pair) -> Iterator[Batch]:
    """Yield batches over the manifest rows.

    With ``shuffle_seed`` the row order is a seeded permutation. ``transform``
    receives each pair with a seed derived from ``(shuffle_seed, batch index,
    position)``, so its randomness does not depend on how batches are consumed.
    """
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    rows = list(manifest.rows if isinstance(manifest, Manifest) else manifest)
    order = np.arange(len(rows))
    if shuffle_seed is not None:
        order = np.random.default_rng(shuffle_seed).permutation(len(rows))
    base = shuffle_seed or 0
    for b, start in enumerate(range(0, len(rows), batch_size)):
        pairs = []
        for pos, idx in enumerate(order[start:start + batch_size]):
            pair = loader(rows[idx])
            if transform is not None:
                pair = transform(pair, derive_seed(base, b, pos))
            pairs.append(pair)
        yield stack_pairs(pairs)
