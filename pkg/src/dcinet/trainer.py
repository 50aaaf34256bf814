"""Optimization loop: Adam with epoch-based step decay, checkpoints and a
per-step CSV log.

All randomness (shuffle order, synthesis, crops) is derived from
``(seed, epoch, batch, position)``, so a run is reproducible bit for bit and
can resume from any epoch-end checkpoint onto the same trajectory.
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from . import checkpoint as ckpt_io
from .data import (DataError, Manifest, SynthesisRanges, center_crop, derive_seed,
                   iterate, load_pair, random_crop, stack_pairs, synthesize_lowlight)
from .losses import DEFAULT_LAMBDA, LOSS_KINDS, total_loss
from .metrics import psnr, ssim
from .network import Model
from .tensor import Tape, Tensor

log = logging.getLogger(__name__)

LOG_HEADER = ["epoch", "step", "l_fre", "l_tv", "total", "lr", "val_psnr", "val_ssim"]
_VAL_STREAM = 1 << 20


class TrainingError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    batch_size: int = 16
    crop: int = 128
    lr0: float = 2e-4
    lr_decay_every: int = 500
    lr_decay_factor: float = 0.5
    epochs: int = 2000
    lam: float = DEFAULT_LAMBDA
    loss: str = "fre"
    seed: int = 0
    online_synthesis: bool = False
    val_fraction: float = 0.1
    val_every: int = 10
    checkpoint_every: int = 100
    max_steps: int = 0
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8

    def __post_init__(self):
        if self.lr0 <= 0:
            raise ValueError(f"lr0 must be > 0, got {self.lr0}")
        if self.epochs < 1:
            raise ValueError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.loss not in LOSS_KINDS:
            raise ValueError(f"loss must be one of {LOSS_KINDS}, got {self.loss!r}")
        if self.lam < 0:
            raise ValueError("lam must be >= 0")


@dataclass
class AdamState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def for_model(cls, model: Model, **hyper) -> "AdamState":
        st = cls(**hyper)
        for name, p in model.named_parameters():
            st.m[name] = np.zeros(p.shape)
            st.v[name] = np.zeros(p.shape)
        return st


def adam_step(named_params, grads: dict, state: AdamState, lr: float) -> None:
    """Bias-corrected Adam update. Parameters absent from ``grads`` are
    treated as having zero gradient. Raises before touching anything when a
    gradient is non-finite."""
    pairs = []
    for name, p in named_params:
        g = grads.get(p)
        if g is None:
            g = np.zeros(p.shape)
        if not np.all(np.isfinite(g)):
            raise FloatingPointError(f"non-finite gradient for parameter {name}")
        pairs.append((name, p, g))
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    for name, p, g in pairs:
        m = state.m.get(name)
        v = state.v.get(name)
        m = b1 * m + (1.0 - b1) * g if m is not None else (1.0 - b1) * g
        v = b2 * v + (1.0 - b2) * g * g if v is not None else (1.0 - b2) * g * g
        state.m[name], state.v[name] = m, v
        p.data = p.data - lr * (m / c1) / (np.sqrt(v / c2) + state.eps)


def lr_at(epoch: int, cfg: TrainConfig) -> float:
    if epoch < 0:
        raise ValueError("epoch must be >= 0")
    return cfg.lr0 * cfg.lr_decay_factor ** (epoch // cfg.lr_decay_every)


def split_rows(manifest: Manifest, val_fraction: float):
    rows = list(manifest.rows)
    n_val = int(math.floor(len(rows) * val_fraction))
    return rows[:len(rows) - n_val], rows[len(rows) - n_val:]


class _PairCache:
    def __init__(self):
        self._pairs = {}

    def __call__(self, row):
        pair = self._pairs.get(row.id)
        if pair is None:
            pair = load_pair(row)
            if not pair.has_gt:
                raise DataError(f"manifest row {row.id!r} has no ground truth")
            self._pairs[row.id] = pair
        return pair


def enhance_batch(model: Model, left: np.ndarray, right: np.ndarray):
    out_l, out_r = model(Tensor(left), Tensor(right))
    return out_l.data, out_r.data


def evaluate_pairs(model: Model, pairs) -> tuple:
    """Mean over pairs of the (left + right) / 2 PSNR and SSIM, outputs clamped."""
    ps, ss = [], []
    for pair in pairs:
        b = stack_pairs([pair])
        hl, hr = enhance_batch(model, b.left, b.right)
        hl, hr = np.clip(hl[0], 0, 1), np.clip(hr[0], 0, 1)
        ps.append((psnr(hl, pair.gt_left) + psnr(hr, pair.gt_right)) / 2)
        ss.append((ssim(hl, pair.gt_left) + ssim(hr, pair.gt_right)) / 2)
    return float(np.mean(ps)), float(np.mean(ss))


@dataclass
class TrainResult:
    checkpoint: Optional[Path]
    log_path: Path
    history: list
    steps: int


def checkpoint_name(epoch: int) -> str:
    return f"checkpoint_epoch{epoch:05d}.ckpt"


def train(model: Model, manifest: Manifest, cfg: TrainConfig, outdir,
          resume: Optional[Path] = None,
          ranges: SynthesisRanges | None = None) -> TrainResult:
    outdir = Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    log_path = outdir / "metrics.csv"
    named = list(model.named_parameters())
    adam = AdamState.for_model(model, beta1=cfg.adam_beta1, beta2=cfg.adam_beta2,
                               eps=cfg.adam_eps)
    start_epoch, step = 0, 0
    if resume is not None:
        stored = ckpt_io.read_checkpoint(resume)
        ckpt_io.apply_checkpoint(model, stored)
        if not stored.optimizer:
            raise TrainingError(f"{resume} carries no optimizer state; cannot resume")
        for name, _ in named:
            adam.m[name] = stored.arrays[f"adam.m.{name}"].copy()
            adam.v[name] = stored.arrays[f"adam.v.{name}"].copy()
        adam.step = int(stored.extra["adam_step"])
        start_epoch, step = stored.epoch + 1, stored.step
    else:
        with open(log_path, "w", newline="") as fh:
            csv.writer(fh, lineterminator="\n").writerow(LOG_HEADER)

    train_rows, val_rows = split_rows(manifest, cfg.val_fraction)
    cache = _PairCache()
    val_pairs = [_val_pair(cache(r), cfg, i, ranges) for i, r in enumerate(val_rows)]

    def prepare(pair, seed):
        if cfg.online_synthesis:
            pair = synthesize_lowlight(pair, seed, ranges)
        return random_crop(pair, cfg.crop, derive_seed(seed, 1))

    history, last_good = [], resume
    header = {"train": {k: v for k, v in vars(cfg).items()}}
    epoch = start_epoch
    for epoch in range(start_epoch, cfg.epochs):
        lr = lr_at(epoch, cfg)
        rows_out = []
        for batch in iterate(train_rows, cfg.batch_size, derive_seed(cfg.seed, epoch),
                             transform=prepare, loader=cache):
            with Tape() as tape:
                preds = model(Tensor(batch.left), Tensor(batch.right))
                gts = (Tensor(batch.gt_left), Tensor(batch.gt_right))
                loss, report = total_loss(preds, gts, cfg.lam, cfg.loss)
            if not math.isfinite(report.total):
                raise TrainingError(
                    f"non-finite loss at epoch {epoch} step {step}; "
                    f"last good checkpoint: {last_good}")
            grads = tape.backward(loss)
            adam_step(named, grads, adam, lr)
            step += 1
            row = {"epoch": epoch, "step": step, "l_fre": report.l_fre, "l_tv": report.l_tv,
                   "total": report.total, "lr": lr, "val_psnr": "", "val_ssim": ""}
            rows_out.append(row)
            if cfg.max_steps and step >= cfg.max_steps:
                break
        done = epoch + 1 == cfg.epochs or (cfg.max_steps and step >= cfg.max_steps)
        if val_pairs and rows_out and ((epoch + 1) % cfg.val_every == 0 or done):
            rows_out[-1]["val_psnr"], rows_out[-1]["val_ssim"] = evaluate_pairs(model, val_pairs)
        _append_log(log_path, rows_out)
        history.extend(rows_out)
        if done or (epoch + 1) % cfg.checkpoint_every == 0:
            last_good = ckpt_io.save_checkpoint(model, outdir / checkpoint_name(epoch + 1),
                                                step=step, epoch=epoch, adam=adam,
                                                extra=header)
            log.info("epoch %d step %d: checkpoint %s", epoch, step, last_good)
        if done:
            break
    return TrainResult(last_good, log_path, history, step)


def _val_pair(pair, cfg: TrainConfig, index: int, ranges):
    if cfg.online_synthesis:
        pair = synthesize_lowlight(pair, derive_seed(cfg.seed, _VAL_STREAM, index), ranges)
    return center_crop(pair, 4)


def _fmt(v) -> str:
    return repr(float(v)) if isinstance(v, (float, np.floating)) else str(v)


def _append_log(path: Path, rows) -> None:
    with open(path, "a", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        for r in rows:
            w.writerow([_fmt(r[k]) for k in LOG_HEADER])
