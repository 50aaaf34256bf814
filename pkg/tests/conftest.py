import numpy as np
import pytest

from dcinet.data import (ManifestRow, derive_seed, save_png, synthesize_lowlight,
                         synthetic_scene_pair, write_manifest)
from dcinet.network import ModelConfig

TINY = dict(base_channels=4, depths=(1, 1, 1, 1, 1))


def tiny_config(**kw) -> ModelConfig:
    return ModelConfig(**{**TINY, **kw})


def write_corpus(root, n, size=32, seed=0, with_gt=True):
    """Synthetic low-light corpus on disk; returns the manifest path."""
    rows = []
    for i in range(n):
        gt = synthetic_scene_pair(size, derive_seed(seed, 7, i), pair_id=f"p{i}")
        low = synthesize_lowlight(gt, derive_seed(seed, i))
        paths = {k: root / f"p{i}_{k}.png" for k in ("left", "right", "gt_left", "gt_right")}
        save_png(paths["left"], low.left)
        save_png(paths["right"], low.right)
        save_png(paths["gt_left"], gt.gt_left)
        save_png(paths["gt_right"], gt.gt_right)
        if with_gt:
            rows.append(ManifestRow(f"p{i}", **paths))
        else:
            rows.append(ManifestRow(f"p{i}", paths["left"], paths["right"]))
    write_manifest(root / "manifest.csv", rows)
    return root / "manifest.csv"


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def corpus(tmp_path):
    return write_corpus(tmp_path / "data", 3)
