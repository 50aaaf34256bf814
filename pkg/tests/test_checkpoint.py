import numpy as np
import pytest

from dcinet import checkpoint as ck
from dcinet.gradcheck import randomize
from dcinet.network import ModelConfig, build_model
from dcinet.tensor import Tensor
from dcinet.trainer import AdamState

from conftest import tiny_config
from oracles import model_shapes


def test_roundtrip_is_byte_identical(tmp_path):
    model = build_model(tiny_config(no_cvi=True))
    randomize(model, seed=1)
    path = ck.save_checkpoint(model, tmp_path / "a.ckpt", step=7, epoch=3)
    raw = path.read_bytes()
    assert ck.to_bytes(ck.read_checkpoint(path)) == raw
    again = ck.load_checkpoint(path)
    ck.save_checkpoint(again, tmp_path / "b.ckpt", step=7, epoch=3)
    assert (tmp_path / "b.ckpt").read_bytes() == raw


def test_save_load_forward_bitwise(tmp_path, rng):
    model = build_model(tiny_config())
    randomize(model, seed=2, std=0.2)
    l, r = (Tensor(rng.uniform(size=(1, 3, 8, 12))) for _ in range(2))
    before = model(l, r)
    path = ck.save_checkpoint(model, tmp_path / "m.ckpt")
    after = ck.load_checkpoint(path)(l, r)
    for a, b in zip(before, after):
        assert a.data.tobytes() == b.data.tobytes()


def test_header_layout(tmp_path):
    model = build_model(tiny_config(no_csi=True))
    path = ck.save_checkpoint(model, tmp_path / "m.ckpt", step=5)
    raw = path.read_bytes()
    n = int.from_bytes(raw[:4], "little")
    import json
    head = json.loads(raw[4:4 + n])
    assert head["format"] == ck.FORMAT and head["version"] == ck.VERSION
    assert head["config"]["no_csi"] is True and head["step"] == 5
    assert head["arrays"] == len(list(model.named_parameters()))


def test_default_model_array_count(tmp_path):
    model = build_model(ModelConfig())
    c = ck.model_checkpoint(model)
    assert len(c.arrays) == len(model_shapes(32))
    assert list(c.arrays) == [n for n, _ in model.named_parameters()]


def test_mismatched_width_names_the_field(tmp_path):
    path = ck.save_checkpoint(build_model(tiny_config()), tmp_path / "m.ckpt")
    with pytest.raises(ck.CheckpointError, match="base_channels"):
        ck.load_checkpoint(path, expected=tiny_config(base_channels=8))
    with pytest.raises(ck.CheckpointError, match="head.weight"):
        ck.apply_checkpoint(build_model(tiny_config(base_channels=8)), ck.read_checkpoint(path))


def test_truncated_and_corrupt_files(tmp_path):
    path = ck.save_checkpoint(build_model(tiny_config()), tmp_path / "m.ckpt")
    raw = path.read_bytes()
    for cut in (2, 10, len(raw) // 2, len(raw) - 1):
        (tmp_path / "t.ckpt").write_bytes(raw[:cut])
        with pytest.raises(ck.CheckpointError, match="truncated|corrupt"):
            ck.read_checkpoint(tmp_path / "t.ckpt")
    (tmp_path / "x.ckpt").write_bytes(raw + b"\0")
    with pytest.raises(ck.CheckpointError, match="trailing"):
        ck.read_checkpoint(tmp_path / "x.ckpt")
    with pytest.raises(ck.CheckpointError, match="does not exist"):
        ck.read_checkpoint(tmp_path / "missing.ckpt")


def test_version_mismatch(tmp_path):
    c = ck.model_checkpoint(build_model(tiny_config()))
    raw = ck.to_bytes(c).replace(b'"version":1', b'"version":9')
    with pytest.raises(ck.CheckpointError, match="version"):
        ck.from_bytes(raw)


def test_optimizer_state_roundtrip(tmp_path):
    model = build_model(tiny_config())
    adam = AdamState.for_model(model)
    adam.step = 4
    for k in adam.m:
        adam.m[k] = adam.m[k] + 0.5
    path = ck.save_checkpoint(model, tmp_path / "m.ckpt", adam=adam)
    c = ck.read_checkpoint(path)
    assert c.optimizer and c.extra["adam_step"] == 4
    name = next(iter(adam.m))
    np.testing.assert_array_equal(c.arrays[f"adam.m.{name}"], adam.m[name])
    ck.apply_checkpoint(model, c)       # optimizer arrays are ignored by the model
