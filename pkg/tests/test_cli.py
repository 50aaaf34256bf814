import csv
import hashlib

import numpy as np
import pytest

from dcinet import checkpoint as ck
from dcinet import ops
from dcinet.cli import build_parser, main, reflect_pad
from dcinet.config import OPTIONS, CliConfig, read_config_file
from dcinet.data import load_manifest, load_png, save_png
from dcinet.network import ConfigError, build_model

from conftest import tiny_config, write_corpus

TINY_FLAGS = ["--base-channels", "4", "--depths", "1", "1", "1", "1", "1"]


def digest(path):
    return hashlib.sha256(path.read_bytes()).hexdigest()


@pytest.fixture
def desk_toml(tmp_path):
    path = tmp_path / "desk.toml"
    path.write_text('crop = 16\nbatch_size = 2\nval_fraction = 0.0\ncheckpoint_every = 100\n')
    return path


# ---------------------------------------------------------------- config

def test_help_lists_every_key_with_default(capsys):
    with pytest.raises(SystemExit):
        main(["train", "--help"])
    text = " ".join(capsys.readouterr().out.split())
    for opt in OPTIONS:
        assert "--" + opt.key.replace("_", "-") in text
        if opt.provenance:
            assert opt.provenance.split(";")[0] in text
    assert "(default: 2000; published: 2000)" in text
    assert "(default: 4 4 2 2 4;" in text


def test_config_file_and_overrides(tmp_path):
    path = tmp_path / "c.toml"
    path.write_text('epochs = 3\nlr0 = 1e-3\ndepths = [1, 2, 1, 2, 1]\nmanifest = "m.csv"\n')
    cfg = CliConfig.build(path, {"epochs": "5", "no_cvi": True})
    assert cfg["epochs"] == 5 and cfg["lr0"] == 1e-3 and cfg["no_cvi"] is True
    assert cfg.model_config().depths == (1, 2, 1, 2, 1)
    assert cfg.train_config().epochs == 5


@pytest.mark.parametrize("text,match", [("bogus = 1\n", "unknown"), ("[a]\nb = 1\n", "tables"),
                                        ("epochs = \n", "c.toml"), ("no_cvi = 3\n", "boolean"),
                                        ("depths = [1, 2]\n", "5 values")])
def test_config_file_errors(tmp_path, text, match):
    path = tmp_path / "c.toml"
    path.write_text(text)
    with pytest.raises(ConfigError, match=match):
        read_config_file(path)


def test_unknown_override_rejected():
    with pytest.raises(ConfigError):
        CliConfig.build(None, {"nope": 1})


# ---------------------------------------------------------------- train

def test_train_smoke_writes_one_checkpoint(tmp_path, desk_toml, capsys):
    man = write_corpus(tmp_path / "d", 2, size=16)
    out = tmp_path / "run"
    code = main(["train", "--config", str(desk_toml), "--epochs", "2", "--manifest", str(man),
                 "--outdir", str(out)] + TINY_FLAGS)
    assert code == 0
    assert [p.name for p in out.glob("*.ckpt")] == ["checkpoint_epoch00002.ckpt"]
    assert (out / "metrics.csv").exists()


def test_train_ablation_and_kernel_recorded(tmp_path, desk_toml):
    man = write_corpus(tmp_path / "d", 2, size=16)
    out = tmp_path / "run"
    assert main(["train", "--config", str(desk_toml), "--epochs", "1", "--manifest", str(man),
                 "--outdir", str(out), "--ablation", "no_cvi", "--kernel-size", "3"]
                + TINY_FLAGS) == 0
    cfg = ck.read_checkpoint(out / "checkpoint_epoch00001.ckpt").model_config()
    assert cfg.no_cvi and not cfg.no_csi and cfg.kernel_size == 3


def test_train_errors_exit_nonzero(tmp_path, desk_toml, capsys):
    assert main(["train", "--config", str(desk_toml)]) == 2
    assert "manifest" in capsys.readouterr().err
    assert main(["train", "--manifest", str(tmp_path / "none.csv")]) == 2
    man = write_corpus(tmp_path / "d", 1, size=16)
    assert main(["train", "--manifest", str(man), "--base-channels", "3"]) == 2


# ---------------------------------------------------------------- enhance

def identity_checkpoint(path):
    model = build_model(tiny_config())
    model.zero_branches()
    return ck.save_checkpoint(model, path)


def test_enhance_identity_reproduces_inputs(tmp_path, rng):
    ckpt = identity_checkpoint(tmp_path / "id.ckpt")
    for name in ("l", "r"):
        save_png(tmp_path / f"{name}.png", rng.uniform(size=(3, 97, 130)))
    out = tmp_path / "out"
    args = ["enhance", str(ckpt), str(tmp_path / "l.png"), str(tmp_path / "r.png"), str(out)]
    assert main(args) == 0
    for name, view in (("l", "left"), ("r", "right")):
        got = load_png(out / f"enhanced_{view}.png")
        assert got.shape == (3, 97, 130)
        np.testing.assert_array_equal(got, load_png(tmp_path / f"{name}.png"))
    first = digest(out / "enhanced_left.png")
    assert main(args) == 0
    assert digest(out / "enhanced_left.png") == first


def test_enhance_trained_is_deterministic(tmp_path, rng):
    model = build_model(tiny_config())
    from dcinet.gradcheck import randomize
    randomize(model, std=0.1)
    ckpt = ck.save_checkpoint(model, tmp_path / "m.ckpt")
    for name in ("l", "r"):
        save_png(tmp_path / f"{name}.png", rng.uniform(size=(3, 18, 21)))
    digests = []
    for i in range(2):
        out = tmp_path / f"o{i}"
        assert main(["enhance", str(ckpt), str(tmp_path / "l.png"), str(tmp_path / "r.png"),
                     str(out)]) == 0
        digests.append(digest(out / "enhanced_right.png"))
    assert digests[0] == digests[1]


def test_enhance_size_mismatch(tmp_path, rng, capsys):
    ckpt = identity_checkpoint(tmp_path / "id.ckpt")
    save_png(tmp_path / "l.png", rng.uniform(size=(3, 16, 16)))
    save_png(tmp_path / "r.png", rng.uniform(size=(3, 16, 20)))
    assert main(["enhance", str(ckpt), str(tmp_path / "l.png"), str(tmp_path / "r.png"),
                 str(tmp_path / "o")]) == 2
    assert "differ" in capsys.readouterr().err


def test_reflect_pad():
    img = np.arange(2 * 5 * 6, dtype=float).reshape(2, 5, 6)
    padded, size = reflect_pad(img)
    assert padded.shape == (2, 8, 8) and size == (5, 6)
    np.testing.assert_array_equal(padded[:, 5, :6], img[:, 3])
    np.testing.assert_array_equal(padded[:, :5, 6], img[:, :, 4])
    same, _ = reflect_pad(np.zeros((3, 8, 4)))
    assert same.shape == (3, 8, 4)


# ---------------------------------------------------------------- eval

def gt_manifest(tmp_path, n=2):
    """Manifest whose inputs are the ground truth itself."""
    man = write_corpus(tmp_path / "d", n, size=16)
    text = man.read_text().splitlines()
    rows = [text[0]]
    for line in text[1:]:
        pid, _, _, gl, gr = line.split(",")
        rows.append(",".join([pid, gl, gr, gl, gr]))
    man.write_text("\n".join(rows) + "\n")
    return man


def test_eval_gt_against_itself(tmp_path, capsys):
    ckpt = identity_checkpoint(tmp_path / "id.ckpt")
    out = tmp_path / "ev"
    assert main(["eval", str(ckpt), str(gt_manifest(tmp_path)), str(out)]) == 0
    printed = capsys.readouterr().out
    assert printed.count("+∞/1.000") == 2
    with open(out / "metrics.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert len(rows) == 4 and {r["psnr"] for r in rows} == {"inf"}
    assert {r["view"] for r in rows} == {"left", "right"}
    with open(out / "summary.csv") as fh:
        summary = {r["aggregate"]: r for r in csv.DictReader(fh)}
    assert summary["left"]["psnr"] == summary["pair"]["psnr"] == "inf"
    assert float(summary["pair"]["ssim"]) == pytest.approx(1.0)
    maps = sorted((out / "error_maps").glob("*.png"))
    assert len(maps) == 4
    for m in maps:
        assert np.all(load_png(m) == 1.0)


def test_eval_aggregates_coincide_for_symmetric_errors(tmp_path, capsys):
    model = build_model(tiny_config())
    model.zero_branches()
    model.tail.bias.data[...] = 0.05
    ckpt = ck.save_checkpoint(model, tmp_path / "b.ckpt")
    man = gt_manifest(tmp_path)
    # left and right views identical, so both views carry the same error
    text = man.read_text().splitlines()
    fixed = [text[0]] + [",".join([l.split(",")[0]] + [l.split(",")[1]] * 2
                                  + [l.split(",")[1]] * 2) for l in text[1:]]
    man.write_text("\n".join(fixed) + "\n")
    out = tmp_path / "ev"
    assert main(["eval", str(ckpt), str(man), str(out)]) == 0
    with open(out / "summary.csv") as fh:
        summary = {r["aggregate"]: r for r in csv.DictReader(fh)}
    assert summary["left"]["psnr"] == summary["pair"]["psnr"] != "inf"
    assert summary["left"]["ssim"] == summary["pair"]["ssim"]


def test_eval_requires_gt(tmp_path, capsys):
    ckpt = identity_checkpoint(tmp_path / "id.ckpt")
    man = write_corpus(tmp_path / "d", 1, size=16, with_gt=False)
    assert main(["eval", str(ckpt), str(man), str(tmp_path / "o")]) == 2
    assert "ground truth" in capsys.readouterr().err


# ---------------------------------------------------------------- synth

def test_synth_generate_is_deterministic(tmp_path):
    outs = []
    for i in range(2):
        out = tmp_path / f"s{i}"
        assert main(["synth", "--generate", "3", "--size", "16", "--seed", "4",
                     "--outdir", str(out)]) == 0
        outs.append(out)
    files = sorted(p.relative_to(outs[0]) for p in outs[0].rglob("*") if p.is_file())
    assert len(files) == 3 * 4 + 2
    for f in files:
        assert digest(outs[0] / f) == digest(outs[1] / f)
    man = load_manifest(outs[0] / "manifest.csv")
    assert len(man) == 3 and all(r.has_gt for r in man.rows)
    with open(outs[0] / "synthesis.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert [r["id"] for r in rows] == [r.id for r in man.rows]
    assert all(2.0 <= float(r["gamma"]) <= 3.5 for r in rows)


def test_synth_from_gt_dir_and_manifest(tmp_path):
    gt = tmp_path / "gt"
    rng = np.random.default_rng(0)
    for pid in ("a", "b"):
        for view in ("left", "right"):
            save_png(gt / f"{pid}_{view}.png", rng.uniform(size=(3, 8, 8)))
    assert main(["synth", "--gt-dir", str(gt), "--outdir", str(tmp_path / "o1")]) == 0
    assert [r.id for r in load_manifest(tmp_path / "o1" / "manifest.csv").rows] == ["a", "b"]
    assert main(["synth", "--manifest", str(tmp_path / "o1" / "manifest.csv"),
                 "--outdir", str(tmp_path / "o2")]) == 0
    assert len(load_manifest(tmp_path / "o2" / "manifest.csv")) == 2


def test_synth_unreadable_input(tmp_path, capsys):
    gt = tmp_path / "gt"
    gt.mkdir()
    (gt / "a_left.png").write_bytes(b"junk")
    (gt / "a_right.png").write_bytes(b"junk")
    assert main(["synth", "--gt-dir", str(gt), "--outdir", str(tmp_path / "o")]) == 2
    assert main(["synth", "--gt-dir", str(tmp_path / "empty"), "--outdir", str(tmp_path)]) == 2


# ---------------------------------------------------------------- gradcheck

def test_gradcheck_ops_passes(capsys):
    assert main(["gradcheck", "ops"]) == 0
    out = capsys.readouterr().out
    assert "dwconv2d" in out and "FAIL" not in out


def test_gradcheck_model_passes(capsys):
    assert main(["gradcheck", "model"]) == 0


def test_gradcheck_flags_corrupted_dwconv_backward(monkeypatch, capsys):
    real = ops._dwconv2d_grads

    def corrupted(*args):
        gx, gw = real(*args)
        return gx * 1.01, gw

    monkeypatch.setattr(ops, "_dwconv2d_grads", corrupted)
    assert main(["gradcheck", "ops"]) == 1
    out = capsys.readouterr().out
    failing = out.strip().splitlines()[-1]
    assert failing.startswith("gradient check failed") and "dwconv2d" in failing


def test_parser_lists_subcommands():
    text = build_parser().format_help()
    for cmd in ("train", "enhance", "eval", "synth", "gradcheck"):
        assert cmd in text


def test_thread_cap_env(monkeypatch, tmp_path):
    monkeypatch.setenv("STEREO_ENHANCE_THREADS", "1")
    assert main(["synth", "--generate", "1", "--size", "16", "--outdir", str(tmp_path)]) == 0
