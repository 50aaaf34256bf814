"""Binary checkpoint files.

Layout (little-endian)::

    u32 header_len | header JSON (utf-8, sorted keys)
    repeated: u32 name_len | name | u32 rank | rank x u64 extents | float64 data

The header holds the model config, format version, training counters and
the array count. Parameter arrays come first in the model's registration
order, followed by optimizer moments when present.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .network import ConfigError, Model, ModelConfig

FORMAT = "dcinet-checkpoint"
VERSION = 1


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    config: dict
    arrays: dict                      # name -> ndarray, insertion ordered
    step: int = 0
    epoch: int = 0
    optimizer: bool = False
    extra: dict = field(default_factory=dict)

    def header(self) -> dict:
        return {"format": FORMAT, "version": VERSION, "config": self.config,
                "step": self.step, "epoch": self.epoch, "optimizer": self.optimizer,
                "arrays": len(self.arrays), "extra": self.extra}

    def model_config(self) -> ModelConfig:
        return ModelConfig.from_dict(dict(self.config))


def to_bytes(ckpt: Checkpoint) -> bytes:
    head = json.dumps(ckpt.header(), sort_keys=True, separators=(",", ":")).encode()
    parts = [struct.pack("<I", len(head)), head]
    for name, arr in ckpt.arrays.items():
        arr = np.ascontiguousarray(arr, dtype="<f8")
        key = name.encode()
        parts.append(struct.pack("<I", len(key)))
        parts.append(key)
        parts.append(struct.pack("<I", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        parts.append(arr.tobytes())
    return b"".join(parts)


def from_bytes(buf: bytes, source: str = "<bytes>") -> Checkpoint:
    pos = 0

    def take(n):
        nonlocal pos
        if pos + n > len(buf):
            raise CheckpointError(f"{source}: truncated checkpoint")
        chunk = buf[pos:pos + n]
        pos += n
        return chunk

    (hlen,) = struct.unpack("<I", take(4))
    try:
        head = json.loads(take(hlen).decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{source}: corrupt header ({exc})") from exc
    if not isinstance(head, dict) or head.get("format") != FORMAT:
        raise CheckpointError(f"{source}: not a {FORMAT} file")
    if head.get("version") != VERSION:
        raise CheckpointError(
            f"{source}: checkpoint version {head.get('version')} != supported {VERSION}")
    arrays = {}
    for _ in range(int(head["arrays"])):
        (nlen,) = struct.unpack("<I", take(4))
        name = take(nlen).decode()
        (rank,) = struct.unpack("<I", take(4))
        shape = struct.unpack(f"<{rank}Q", take(8 * rank))
        count = int(np.prod(shape)) if rank else 1
        arrays[name] = np.frombuffer(take(8 * count), dtype="<f8").reshape(shape).astype(np.float64)
    if pos != len(buf):
        raise CheckpointError(f"{source}: {len(buf) - pos} trailing bytes")
    return Checkpoint(config=head["config"], arrays=arrays, step=head["step"],
                      epoch=head["epoch"], optimizer=head["optimizer"],
                      extra=head.get("extra", {}))


def write_checkpoint(path, ckpt: Checkpoint) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(to_bytes(ckpt))
    tmp.replace(path)
    return path


def read_checkpoint(path) -> Checkpoint:
    path = Path(path)
    if not path.exists():
        raise CheckpointError(f"checkpoint {path} does not exist")
    return from_bytes(path.read_bytes(), str(path))


def model_checkpoint(model: Model, step: int = 0, epoch: int = 0, adam=None,
                     extra: dict | None = None) -> Checkpoint:
    arrays = {name: p.data for name, p in model.named_parameters()}
    if adam is not None:
        for name in list(arrays):
            arrays[f"adam.m.{name}"] = adam.m[name]
            arrays[f"adam.v.{name}"] = adam.v[name]
        extra = dict(extra or {}, adam_step=adam.step)
    return Checkpoint(config=model.config.to_dict(), arrays=arrays, step=step, epoch=epoch,
                      optimizer=adam is not None, extra=extra or {})


def save_checkpoint(model: Model, path, step: int = 0, epoch: int = 0, adam=None,
                    extra: dict | None = None) -> Path:
    return write_checkpoint(path, model_checkpoint(model, step, epoch, adam, extra))


def apply_checkpoint(model: Model, ckpt: Checkpoint) -> None:
    """Copy parameter arrays into ``model``; names and shapes must match."""
    params = dict(model.named_parameters())
    stored = [n for n in ckpt.arrays if not n.startswith("adam.")]
    if stored != list(params):
        missing = sorted(set(params) - set(stored))
        unexpected = sorted(set(stored) - set(params))
        raise CheckpointError(
            f"parameter set mismatch (missing {missing[:5]}, unexpected {unexpected[:5]})")
    for name, p in params.items():
        arr = ckpt.arrays[name]
        if arr.shape != p.shape:
            raise CheckpointError(f"parameter {name}: stored {arr.shape} vs model {p.shape}")
        p.data = arr.copy()


def load_checkpoint(path, expected: ModelConfig | None = None) -> Model:
    """Rebuild the model stored at ``path``. With ``expected``, every config
    field must agree; the first disagreeing field is named in the error."""
    ckpt = read_checkpoint(path)
    try:
        cfg = ckpt.model_config()
    except (ConfigError, TypeError) as exc:
        raise CheckpointError(f"{path}: invalid model config ({exc})") from exc
    if expected is not None:
        want, got = expected.to_dict(), cfg.to_dict()
        for key in want:
            if want[key] != got.get(key):
                raise CheckpointError(
                    f"{path}: config field {key!r} is {got.get(key)!r}, expected {want[key]!r}")
    model = Model(cfg)
    apply_checkpoint(model, ckpt)
    return model
