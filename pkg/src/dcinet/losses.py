"""Training objectives on the gradient tape.

The default objective is a frequency-domain L1 reconstruction term summed
over both views plus a weighted total-variation smoothness term on the
enhanced outputs. Pixel-space L1, L2 and SSIM replacements are available for
the loss ablations.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import ops
from .metrics import SSIM_C1, SSIM_C2, gaussian_window
from .tensor import ShapeError, Tensor

DEFAULT_LAMBDA = 0.1
LOSS_KINDS = ("fre", "l1", "l2", "ssim")


@dataclass
class LossReport:
    l_fre: float
    l_tv: float
    total: float
    lam: float


def _check_pair(pred: Tensor, gt: Tensor) -> None:
    if pred.shape != gt.shape:
        raise ShapeError(f"prediction {pred.shape} and target {gt.shape} differ")


def spectrum_l1(pred: Tensor, gt: Tensor) -> Tensor:
    """Mean over spectrum bins of ``|dRe| + |dIm|`` between the half spectra."""
    _check_pair(pred, gt)
    # The DFT is linear, so transforming the difference equals differencing
    # the transforms; it also makes identical inputs give an exact zero.
    diff = ops.rfft2(ops.sub(pred, gt))
    return ops.scale(ops.mean(ops.abs(diff)), 2.0)


def loss_fre(pred_l: Tensor, pred_r: Tensor, gt_l: Tensor, gt_r: Tensor) -> Tensor:
    return ops.add(spectrum_l1(pred_l, gt_l), spectrum_l1(pred_r, gt_r))


def total_variation(x: Tensor) -> Tensor:
    """Anisotropic TV: mean |horizontal step| + mean |vertical step|."""
    if x.ndim != 4 or x.shape[2] < 2 or x.shape[3] < 2:
        raise ShapeError(f"total variation needs H, W >= 2, got {x.shape}")
    dh = ops.sub(x[:, :, :, 1:], x[:, :, :, :-1])
    dv = ops.sub(x[:, :, 1:, :], x[:, :, :-1, :])
    return ops.add(ops.mean(ops.abs(dh)), ops.mean(ops.abs(dv)))


def loss_tv(pred_l: Tensor, pred_r: Tensor) -> Tensor:
    return ops.add(total_variation(pred_l), total_variation(pred_r))


def ssim_tensor(a: Tensor, b: Tensor) -> Tensor:
    """Mean SSIM over all valid 11x11 windows and channels, differentiable."""
    _check_pair(a, b)
    C = a.shape[1]
    if min(a.shape[2:]) < 11:
        raise ShapeError(f"SSIM needs images of at least 11x11, got {a.shape}")
    win = gaussian_window()
    w = Tensor(np.broadcast_to(win, (C, 1) + win.shape).copy())
    zero = Tensor(np.zeros(C))

    def filt(x):
        return ops.dwconv2d(x, w, zero, pad=0)

    mu_a, mu_b = filt(a), filt(b)
    mu_aa, mu_bb, mu_ab = ops.mul(mu_a, mu_a), ops.mul(mu_b, mu_b), ops.mul(mu_a, mu_b)
    var_a = ops.sub(filt(ops.mul(a, a)), mu_aa)
    var_b = ops.sub(filt(ops.mul(b, b)), mu_bb)
    cov = ops.sub(filt(ops.mul(a, b)), mu_ab)
    num = ops.mul(ops.add(ops.scale(mu_ab, 2.0), SSIM_C1),
                  ops.add(ops.scale(cov, 2.0), SSIM_C2))
    den = ops.mul(ops.add(ops.add(mu_aa, mu_bb), SSIM_C1),
                  ops.add(ops.add(var_a, var_b), SSIM_C2))
    return ops.mean(ops.div(num, den))


def alt_losses(kind: str, preds, gts) -> Tensor:
    """Pixel-space replacement for the spectrum term, averaged over views."""
    (pl, pr), (gl, gr) = preds, gts
    _check_pair(pl, gl)
    _check_pair(pr, gr)
    if kind == "l1":
        terms = [ops.mean(ops.abs(ops.sub(p, g))) for p, g in ((pl, gl), (pr, gr))]
    elif kind == "l2":
        terms = []
        for p, g in ((pl, gl), (pr, gr)):
            d = ops.sub(p, g)
            terms.append(ops.mean(ops.mul(d, d)))
    elif kind == "ssim":
        terms = [ops.add(ops.neg(ssim_tensor(p, g)), 1.0) for p, g in ((pl, gl), (pr, gr))]
    else:
        raise ValueError(f"unknown loss kind {kind!r}; expected one of l1, l2, ssim")
    return ops.scale(ops.add(terms[0], terms[1]), 0.5)


def reconstruction_loss(kind: str, preds, gts) -> Tensor:
    if kind == "fre":
        return loss_fre(preds[0], preds[1], gts[0], gts[1])
    return alt_losses(kind, preds, gts)


def total_loss(preds, gts, lam: float = DEFAULT_LAMBDA, kind: str = "fre"):
    """``reconstruction + lam * tv``; returns the scalar and a report."""
    if lam < 0:
        raise ValueError(f"lambda must be >= 0, got {lam}")
    rec = reconstruction_loss(kind, preds, gts)
    tv = loss_tv(preds[0], preds[1])
    total = ops.add(rec, ops.scale(tv, lam))
    report = LossReport(l_fre=rec.item(), l_tv=tv.item(), total=total.item(), lam=lam)
    return total, report
