"""Flat run configuration shared by the CLI subcommands.

Keys come from three places, later ones winning: built-in defaults, a flat
TOML file (``key = value`` lines, no tables), and command-line flags.
"""

from __future__ import annotations

from dataclasses import dataclass, fields
from pathlib import Path
from typing import Any

try:
    import tomllib as tomli
except ModuleNotFoundError:  # python < 3.11
    import tomli

from .data import SynthesisRanges
from .network import ConfigError, ModelConfig
from .trainer import TrainConfig


@dataclass(frozen=True)
class Option:
    key: str
    default: Any
    help: str
    provenance: str = ""


OPTIONS = [
    # model
    Option("base_channels", 32, "feature width C at full resolution (2C, 4C below)"),
    Option("depths", [4, 4, 2, 2, 4], "SIMB counts N1..N5 for enc1, enc2, bottleneck, dec2, dec1",
           "published: N1=4, N2=4, N3=2, N4=2, N5=4"),
    Option("kernel_size", 7, "depthwise kernel size inside LRDC",
           "published: 7x7; 3x3 and 5x5 are the kernel ablations"),
    Option("expansion", 2, "ECIR channel expansion ratio"),
    Option("ca_reduction", 4, "channel-attention squeeze ratio"),
    Option("no_cvi", False, "drop cross-view interaction", "published ablation"),
    Option("no_csi", False, "drop cross-scale interaction", "published ablation"),
    Option("no_lrdc", False, "drop LRDC from every SIMB", "published ablation"),
    Option("no_ecir", False, "drop ECIR from every SIMB", "published ablation"),
    Option("cvi_softmax", True, "softmax-normalize cross-view correlations"),
    # training
    Option("batch_size", 16, "pairs per optimization step", "published: 16"),
    Option("crop", 128, "square training crop", "published: 128x128"),
    Option("lr0", 2e-4, "initial Adam learning rate", "published: 0.0002"),
    Option("lr_decay_every", 500, "epochs between learning-rate halvings",
           "published: halved every 500 epochs"),
    Option("lr_decay_factor", 0.5, "learning-rate multiplier per decay", "published: 0.5"),
    Option("epochs", 2000, "training epochs", "published: 2000"),
    Option("lam", 0.1, "weight of the TV smoothness term", "published: 0.1"),
    Option("loss", "fre", "reconstruction term: fre, l1, l2 or ssim",
           "published: fre; l1/l2/ssim are the loss ablations"),
    Option("seed", 0, "seed for initialization, shuffling, synthesis and crops"),
    Option("online_synthesis", False, "darken GT on the fly instead of reading low-light inputs"),
    Option("val_fraction", 0.1, "trailing fraction of manifest rows held out for validation"),
    Option("val_every", 10, "epochs between validation passes"),
    Option("checkpoint_every", 100, "epochs between checkpoints (one is always written at the end)"),
    Option("max_steps", 0, "stop after this many optimizer steps (0 = no limit)"),
    Option("adam_beta1", 0.9, "Adam first-moment decay"),
    Option("adam_beta2", 0.999, "Adam second-moment decay"),
    Option("adam_eps", 1e-8, "Adam denominator epsilon"),
    # synthesis
    Option("gamma_range", [2.0, 3.5], "low-light synthesis: gamma range"),
    Option("scale_range", [0.25, 0.6], "low-light synthesis: brightness scale range"),
    Option("noise_range", [0.01, 0.05], "low-light synthesis: Gaussian noise sigma range"),
    # paths
    Option("manifest", "", "training manifest CSV"),
    Option("outdir", "runs/default", "output directory for checkpoints and logs"),
    Option("resume", "", "checkpoint to resume training from"),
]
DEFAULTS = {o.key: o.default for o in OPTIONS}
_MODEL_KEYS = {f.name for f in fields(ModelConfig)}
_TRAIN_KEYS = {f.name for f in fields(TrainConfig)}


def _coerce(key: str, value: Any) -> Any:
    default = DEFAULTS[key]
    if isinstance(default, bool):
        if isinstance(value, str):
            low = value.strip().lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ConfigError(f"{key}: expected a boolean, got {value!r}")
        if not isinstance(value, bool):
            raise ConfigError(f"{key}: expected a boolean, got {value!r}")
        return value
    if isinstance(default, list):
        if isinstance(value, str):
            value = [v for v in value.replace(",", " ").split() if v]
        if not isinstance(value, (list, tuple)) or len(value) != len(default):
            raise ConfigError(f"{key}: expected {len(default)} values, got {value!r}")
        kind = type(default[0])
        try:
            return [kind(v) for v in value]
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"{key}: {exc}") from exc
    try:
        if isinstance(default, int):
            if isinstance(value, float) and not value.is_integer():
                raise ValueError(f"{value} is not an integer")
            return int(value)
        if isinstance(default, float):
            return float(value)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{key}: {exc}") from exc
    return str(value)


class CliConfig(dict):
    """Validated flat mapping of every option key."""

    @classmethod
    def build(cls, path=None, overrides: dict | None = None) -> "CliConfig":
        cfg = cls(DEFAULTS)
        if path:
            cfg.update(read_config_file(path))
        for key, value in (overrides or {}).items():
            if key not in DEFAULTS:
                raise ConfigError(f"unknown config key {key!r}")
            cfg[key] = _coerce(key, value)
        return cfg

    def model_config(self) -> ModelConfig:
        kw = {k: self[k] for k in _MODEL_KEYS if k in self}
        kw["depths"] = tuple(self["depths"])
        return ModelConfig(**kw)

    def train_config(self) -> TrainConfig:
        try:
            return TrainConfig(**{k: self[k] for k in _TRAIN_KEYS})
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc

    def synthesis_ranges(self) -> SynthesisRanges:
        return SynthesisRanges(gamma=tuple(self["gamma_range"]),
                               scale=tuple(self["scale_range"]),
                               noise_sigma=tuple(self["noise_range"]))


def read_config_file(path) -> dict:
    path = Path(path)
    try:
        with open(path, "rb") as fh:
            raw = tomli.load(fh)
    except FileNotFoundError as exc:
        raise ConfigError(f"config file {path} not found") from exc
    except tomli.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    out = {}
    for key, value in raw.items():
        if isinstance(value, dict):
            raise ConfigError(f"{path}: tables are not supported ([{key}])")
        if key not in DEFAULTS:
            raise ConfigError(f"{path}: unknown config key {key!r}")
        out[key] = _coerce(key, value)
    return out
