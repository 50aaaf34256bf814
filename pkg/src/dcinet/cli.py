"""``dcinet`` command line: train, enhance, eval, synth, gradcheck."""

from __future__ import annotations

import argparse
import csv
import logging
import math
import os
import sys
from pathlib import Path

import numpy as np

from . import checkpoint as ckpt_io
from .config import OPTIONS, CliConfig
from .data import (DataError, ManifestRow, StereoPair, derive_seed, load_manifest, load_pair,
                   load_png, save_png, synthesize_lowlight, synthetic_scene_pair,
                   write_manifest)
from .metrics import error_map, format_psnr, format_score, psnr, ssim
from .network import ABLATIONS, ConfigError, build_model
from .tensor import ShapeError, Tensor
from .trainer import TrainingError, train

log = logging.getLogger("dcinet")
THREADS_ENV = "STEREO_ENHANCE_THREADS"


class CliError(Exception):
    pass


# ---------------------------------------------------------------- train

def _add_config_flags(p: argparse.ArgumentParser) -> None:
    group = p.add_argument_group("config keys (file values are overridden by flags)")
    for opt in OPTIONS:
        default = opt.default
        if isinstance(default, list):
            shown = " ".join(str(v) for v in default)
            kw = dict(nargs=len(default), metavar=opt.key.upper())
        else:
            shown = str(default).lower() if isinstance(default, bool) else str(default)
            kw = dict(metavar="VALUE" if not isinstance(default, bool) else "BOOL")
        text = f"{opt.help} (default: {shown or 'unset'}"
        text += f"; {opt.provenance})" if opt.provenance else ")"
        group.add_argument("--" + opt.key.replace("_", "-"), dest=opt.key, default=None,
                           help=text.replace("%", "%%"), **kw)
    p.add_argument("--ablation", action="append", default=[], choices=ABLATIONS,
                   help="enable an ablation flag; repeatable")


def _overrides(args) -> dict:
    out = {o.key: getattr(args, o.key) for o in OPTIONS if getattr(args, o.key) is not None}
    for flag in args.ablation:
        out[flag] = True
    return out


def cmd_train(args) -> int:
    cfg = CliConfig.build(args.config, _overrides(args))
    if not cfg["manifest"]:
        raise CliError("train needs a manifest (config key 'manifest' or --manifest)")
    manifest = load_manifest(cfg["manifest"])
    for row in manifest.rows:
        if not row.has_gt:
            raise CliError(f"manifest row {row.id!r} has no ground truth")
    model = build_model(cfg.model_config())
    resume = Path(cfg["resume"]) if cfg["resume"] else None
    result = train(model, manifest, cfg.train_config(), cfg["outdir"], resume=resume,
                   ranges=cfg.synthesis_ranges())
    print(f"trained {result.steps} steps; checkpoint {result.checkpoint}; log {result.log_path}")
    return 0


# ---------------------------------------------------------------- enhance

def reflect_pad(img: np.ndarray, multiple: int = 4):
    H, W = img.shape[1:]
    ph, pw = (-H) % multiple, (-W) % multiple
    if ph == 0 and pw == 0:
        return img, (H, W)
    mode = "reflect" if min(H, W) > max(ph, pw) else "edge"
    return np.pad(img, ((0, 0), (0, ph), (0, pw)), mode=mode), (H, W)


def enhance_pair(model, left: np.ndarray, right: np.ndarray):
    """Enhance one ``[3,H,W]`` pair of any size; outputs clamped to [0, 1]."""
    if left.shape != right.shape:
        raise CliError(f"left {left.shape[1:]} and right {right.shape[1:]} sizes differ")
    lp, (H, W) = reflect_pad(left)
    rp, _ = reflect_pad(right)
    hl, hr = model(Tensor(lp[None]), Tensor(rp[None]))
    return (np.clip(hl.data[0, :, :H, :W], 0.0, 1.0),
            np.clip(hr.data[0, :, :H, :W], 0.0, 1.0))


def cmd_enhance(args) -> int:
    model = ckpt_io.load_checkpoint(args.checkpoint)
    left, right = load_png(args.left), load_png(args.right)
    hl, hr = enhance_pair(model, left, right)
    out = Path(args.outdir)
    save_png(out / "enhanced_left.png", hl)
    save_png(out / "enhanced_right.png", hr)
    print(f"wrote {out / 'enhanced_left.png'} and {out / 'enhanced_right.png'}")
    return 0


# ---------------------------------------------------------------- eval

def cmd_eval(args) -> int:
    model = ckpt_io.load_checkpoint(args.checkpoint)
    manifest = load_manifest(args.manifest)
    out = Path(args.outdir)
    maps = out / "error_maps"
    per_image, left_p, left_s, pair_p, pair_s = [], [], [], [], []
    for row in manifest.rows:
        if not row.has_gt:
            raise CliError(f"manifest row {row.id!r} has no ground truth")
        pair = load_pair(row)
        hl, hr = enhance_pair(model, pair.left, pair.right)
        scores = {}
        for view, pred, gt in (("left", hl, pair.gt_left), ("right", hr, pair.gt_right)):
            p, s = psnr(pred, gt), ssim(pred, gt)
            scores[view] = (p, s)
            per_image.append((row.id, view, format_psnr(p), f"{s:.6f}"))
            save_png(maps / f"{row.id}_{view}.png", error_map(pred, gt))
        left_p.append(scores["left"][0])
        left_s.append(scores["left"][1])
        pair_p.append((scores["left"][0] + scores["right"][0]) / 2)
        pair_s.append((scores["left"][1] + scores["right"][1]) / 2)

    out.mkdir(parents=True, exist_ok=True)
    with open(out / "metrics.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["id", "view", "psnr", "ssim"])
        w.writerows(per_image)
    agg = {}
    for name, ps, ss in (("left", left_p, left_s), ("pair", pair_p, pair_s)):
        agg[name] = (float(np.mean(ps)), float(np.mean(ss))) if ps else (math.nan, math.nan)
    with open(out / "summary.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["aggregate", "psnr", "ssim", "images"])
        for name, (p, s) in agg.items():
            w.writerow([name, format_psnr(p), f"{s:.6f}", len(left_p)])
    print(f"Left            {format_score(*agg['left'])}")
    print(f"(Left+Right)/2  {format_score(*agg['pair'])}")
    return 0


# ---------------------------------------------------------------- synth

def _gt_dir_rows(gt_dir: Path) -> list:
    rows = []
    for left in sorted(gt_dir.glob("*_left.png")):
        pid = left.name[: -len("_left.png")]
        right = gt_dir / f"{pid}_right.png"
        if not right.exists():
            raise CliError(f"{left} has no matching {right.name}")
        rows.append(ManifestRow(pid, left, right, left, right))
    if not rows:
        raise CliError(f"no '<id>_left.png' / '<id>_right.png' pairs in {gt_dir}")
    return rows


def cmd_synth(args) -> int:
    cfg = CliConfig.build(args.config)
    ranges = cfg.synthesis_ranges()
    out = Path(args.outdir)
    if args.generate:
        rows = []
        for i in range(args.generate):
            pair = synthetic_scene_pair(args.size, derive_seed(args.seed, 7, i),
                                        pair_id=f"scene{i:04d}")
            gl, gr = out / "gt" / f"{pair.id}_left.png", out / "gt" / f"{pair.id}_right.png"
            save_png(gl, pair.gt_left)
            save_png(gr, pair.gt_right)
            rows.append(ManifestRow(pair.id, gl, gr, gl, gr))
    elif args.gt_dir:
        rows = _gt_dir_rows(Path(args.gt_dir))
    elif args.manifest:
        rows = load_manifest(args.manifest).rows
    else:
        raise CliError("synth needs --gt-dir, --manifest or --generate")

    produced, sidecar = [], []
    for i, row in enumerate(rows):
        if not row.has_gt:
            raise CliError(f"manifest row {row.id!r} has no ground truth")
        gt = load_pair(row)
        low = synthesize_lowlight(gt, derive_seed(args.seed, i))
        ll, lr = out / "low" / f"{row.id}_left.png", out / "low" / f"{row.id}_right.png"
        save_png(ll, low.left)
        save_png(lr, low.right)
        produced.append(ManifestRow(row.id, ll, lr, row.gt_left, row.gt_right))
        sidecar.append((row.id, repr(low.meta["gamma"]), repr(low.meta["scale"]),
                        repr(low.meta["sigma"])))
    write_manifest(out / "manifest.csv", produced)
    with open(out / "synthesis.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["id", "gamma", "scale", "sigma"])
        w.writerows(sidecar)
    print(f"wrote {len(produced)} low-light pairs and {out / 'manifest.csv'}")
    return 0


# ---------------------------------------------------------------- gradcheck

def cmd_gradcheck(args) -> int:
    from .gradcheck import run_scope

    results = run_scope(args.scope, seed=args.seed)
    for r in results:
        status = "ok" if r.passed else "FAIL"
        print(f"{r.name:<24} worst rel err {r.worst:.3e}  tol {r.tol:.0e}  {status}")
    failed = [r.name for r in results if not r.passed]
    if failed:
        print("gradient check failed: " + ", ".join(failed))
        return 1
    print(f"all {len(results)} gradient checks passed")
    return 0


# ---------------------------------------------------------------- entry

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="dcinet",
                                     description="Low-light stereo image enhancement.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a model from a manifest")
    p.add_argument("--config", help="flat TOML config file")
    _add_config_flags(p)
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("enhance", help="enhance one stereo pair")
    p.add_argument("checkpoint")
    p.add_argument("left")
    p.add_argument("right")
    p.add_argument("outdir")
    p.set_defaults(fn=cmd_enhance)

    p = sub.add_parser("eval", help="score a checkpoint on a manifest with ground truth")
    p.add_argument("checkpoint")
    p.add_argument("manifest")
    p.add_argument("outdir")
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("synth", help="darken ground-truth pairs into low-light inputs")
    src = p.add_mutually_exclusive_group()
    src.add_argument("--gt-dir", help="directory of <id>_left.png / <id>_right.png pairs")
    src.add_argument("--manifest", help="manifest whose GT columns are darkened")
    src.add_argument("--generate", type=int, default=0,
                     help="first render this many synthetic scene pairs as GT")
    p.add_argument("--size", type=int, default=96, help="synthetic scene size (with --generate)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--config", help="config file supplying the synthesis ranges")
    p.add_argument("--outdir", required=True)
    p.set_defaults(fn=cmd_synth)

    p = sub.add_parser("gradcheck", help="finite-difference check of every gradient")
    p.add_argument("scope", choices=["ops", "blocks", "model", "all"])
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(fn=cmd_gradcheck)
    return parser


def _limit_threads():
    value = os.environ.get(THREADS_ENV)
    if not value:
        return None
    from threadpoolctl import threadpool_limits
    return threadpool_limits(limits=max(1, int(value)))


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    limiter = _limit_threads()
    try:
        return args.fn(args)
    except (CliError, ConfigError, DataError, ShapeError, ckpt_io.CheckpointError,
            TrainingError, FloatingPointError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    finally:
        if limiter is not None:
            limiter.unregister()


if __name__ == "__main__":
    sys.exit(main())
