import numpy as np
import pytest

from dcinet import checkpoint as ck
from dcinet import trainer as tr
from dcinet.data import load_manifest
from dcinet.gradcheck import randomize
from dcinet.losses import total_loss
from dcinet.network import build_model
from dcinet.tensor import Tape, Tensor
from dcinet.trainer import (LOG_HEADER, AdamState, TrainConfig, TrainingError, adam_step,
                            lr_at, split_rows, train)

from conftest import tiny_config, write_corpus


def quick_cfg(**kw):
    base = dict(batch_size=2, crop=16, lr0=1e-3, epochs=2, val_fraction=0.0,
                checkpoint_every=100)
    return TrainConfig(**{**base, **kw})


def test_adam_zero_gradient_leaves_params():
    p = Tensor(np.array([1.0, -2.0]), requires_grad=True)
    st = AdamState()
    adam_step([("p", p)], {p: np.zeros(2)}, st, 0.1)
    assert p.data.tolist() == [1.0, -2.0] and st.step == 1


def test_adam_first_step_moves_by_lr():
    p = Tensor(np.array([0.0]), requires_grad=True)
    adam_step([("p", p)], {p: np.array([1.0])}, AdamState(), 0.1)
    # bias-corrected first step: -lr * g / (|g| + eps)
    assert p.data[0] == pytest.approx(-0.1 / (1 + 1e-8), rel=1e-12)


def test_adam_hand_two_steps():
    p = Tensor(np.array([0.5]), requires_grad=True)
    st = AdamState()
    m = v = 0.0
    x = 0.5
    for t, g in enumerate([0.3, -0.7], start=1):
        adam_step([("p", p)], {p: np.array([g])}, st, 0.01)
        m = 0.9 * m + 0.1 * g
        v = 0.999 * v + 0.001 * g * g
        x -= 0.01 * (m / (1 - 0.9 ** t)) / ((v / (1 - 0.999 ** t)) ** 0.5 + 1e-8)
    assert p.data[0] == pytest.approx(x, rel=1e-14)


def test_adam_deterministic(rng):
    g = rng.standard_normal(5)
    out = []
    for _ in range(2):
        p = Tensor(np.arange(5.0), requires_grad=True)
        adam_step([("p", p)], {p: g}, AdamState(), 0.01)
        out.append(p.data.tobytes())
    assert out[0] == out[1]


def test_adam_rejects_nan_and_names_param():
    p = Tensor(np.zeros(2), requires_grad=True)
    st = AdamState()
    with pytest.raises(FloatingPointError, match="enc1.0.weight"):
        adam_step([("enc1.0.weight", p)], {p: np.array([np.nan, 0.0])}, st, 0.1)
    assert st.step == 0 and p.data.tolist() == [0.0, 0.0]


def test_lr_schedule():
    cfg = TrainConfig()
    assert lr_at(0, cfg) == 2e-4
    assert lr_at(499, cfg) == 2e-4
    assert lr_at(500, cfg) == 1e-4
    assert lr_at(1999, cfg) == pytest.approx(2.5e-5, rel=1e-15)
    with pytest.raises(ValueError):
        lr_at(-1, cfg)


def test_default_protocol():
    cfg = TrainConfig()
    assert (cfg.batch_size, cfg.crop, cfg.lr0, cfg.epochs, cfg.lam) == (16, 128, 2e-4, 2000, 0.1)
    assert (cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps) == (0.9, 0.999, 1e-8)


@pytest.mark.parametrize("bad", [dict(lr0=0), dict(epochs=0), dict(batch_size=0),
                                 dict(loss="huber"), dict(lam=-1)])
def test_config_validation(bad):
    with pytest.raises(ValueError):
        TrainConfig(**bad)


def test_validation_split_is_last_rows(tmp_path):
    man = load_manifest(write_corpus(tmp_path, 10, size=16))
    train_rows, val_rows = split_rows(man, 0.1)
    assert [r.id for r in val_rows] == ["p9"] and len(train_rows) == 9
    assert split_rows(man, 0.0)[1] == []


def test_empty_manifest_gives_untrained_checkpoint(tmp_path):
    (tmp_path / "m.csv").write_text("id,left,right,gt_left,gt_right\n")
    model = build_model(tiny_config())
    res = train(model, load_manifest(tmp_path / "m.csv"), quick_cfg(epochs=1), tmp_path / "run")
    assert res.steps == 0 and res.history == []
    fresh = ck.model_checkpoint(build_model(tiny_config()))
    stored = ck.read_checkpoint(res.checkpoint)
    assert all(np.array_equal(stored.arrays[k], v) for k, v in fresh.arrays.items())
    assert res.log_path.read_text().strip() == ",".join(LOG_HEADER)


def test_log_and_checkpoints(tmp_path):
    man = load_manifest(write_corpus(tmp_path / "d", 5, size=16))
    cfg = quick_cfg(epochs=3, checkpoint_every=2, val_fraction=0.2, val_every=1)
    res = train(build_model(tiny_config()), man, cfg, tmp_path / "run")
    lines = res.log_path.read_text().splitlines()
    assert lines[0] == "epoch,step,l_fre,l_tv,total,lr,val_psnr,val_ssim"
    assert len(lines) == 1 + 3 * 2            # 4 train rows -> 2 batches per epoch
    last = lines[-1].split(",")
    assert float(last[6]) > 0 and 0 < float(last[7]) <= 1
    names = sorted(p.name for p in (tmp_path / "run").glob("*.ckpt"))
    assert names == ["checkpoint_epoch00002.ckpt", "checkpoint_epoch00003.ckpt"]
    head = ck.read_checkpoint(res.checkpoint)
    assert head.epoch == 2 and head.step == 6 and head.extra["train"]["crop"] == 16


def test_overfit_loss_decreases(tmp_path):
    man = load_manifest(write_corpus(tmp_path / "d", 1, size=16))
    res = train(build_model(tiny_config(base_channels=8)), man,
                quick_cfg(batch_size=1, epochs=50, lr0=2e-3), tmp_path / "run")
    totals = [h["total"] for h in res.history]
    assert len(totals) == 50 and totals[-1] < 0.5 * totals[0]


def test_resume_matches_uninterrupted(tmp_path):
    man = load_manifest(write_corpus(tmp_path / "d", 4, size=16))
    cfg = quick_cfg(epochs=4, checkpoint_every=2, online_synthesis=True)
    full = train(build_model(tiny_config()), man, cfg, tmp_path / "full")
    mid = tmp_path / "full" / "checkpoint_epoch00002.ckpt"
    resumed = train(build_model(tiny_config()), man, cfg, tmp_path / "resumed", resume=mid)
    assert resumed.history == full.history[len(full.history) - len(resumed.history):]
    assert len(resumed.history) == 4
    assert resumed.checkpoint.read_bytes() == full.checkpoint.read_bytes()


def test_resume_needs_optimizer_state(tmp_path):
    man = load_manifest(write_corpus(tmp_path / "d", 2, size=16))
    bare = ck.save_checkpoint(build_model(tiny_config()), tmp_path / "bare.ckpt")
    with pytest.raises(TrainingError):
        train(build_model(tiny_config()), man, quick_cfg(), tmp_path / "r", resume=bare)


def test_non_finite_loss_aborts_keeping_last_good(tmp_path, monkeypatch):
    man = load_manifest(write_corpus(tmp_path / "d", 2, size=16))
    calls = {"n": 0}

    def flaky(preds, gts, lam, kind):
        calls["n"] += 1
        loss, rep = total_loss(preds, gts, lam, kind)
        if calls["n"] == 3:
            rep.total = float("nan")
        return loss, rep

    monkeypatch.setattr(tr, "total_loss", flaky)
    cfg = quick_cfg(epochs=5, checkpoint_every=1)
    with pytest.raises(TrainingError, match="checkpoint_epoch00002"):
        train(build_model(tiny_config()), man, cfg, tmp_path / "run")
    assert (tmp_path / "run" / "checkpoint_epoch00002.ckpt").exists()
    assert not (tmp_path / "run" / "checkpoint_epoch00003.ckpt").exists()


def test_train_rejects_rows_without_gt(tmp_path):
    man = load_manifest(write_corpus(tmp_path / "d", 2, size=16, with_gt=False))
    with pytest.raises(Exception, match="ground truth"):
        train(build_model(tiny_config()), man, quick_cfg(), tmp_path / "run")


def _grads(model, rng, size=16):
    l, r, gl, gr = (Tensor(rng.uniform(size=(1, 3, size, size))) for _ in range(4))
    with Tape() as tape:
        loss, _ = total_loss(model(l, r), (gl, gr))
    return loss, tape.backward(loss)


def _live_fraction(model, g):
    total = dead = 0
    for _, p in model.named_parameters():
        total += p.size
        dead += int(np.sum(g.get(p, np.zeros(p.shape)) == 0))
    return 1 - dead / total


@pytest.mark.parametrize("flags", [{}, dict(no_cvi=True), dict(no_csi=True),
                                   dict(no_lrdc=True), dict(no_ecir=True)])
def test_gradient_reaches_parameters_on_random_draws(flags):
    fractions = []
    for seed in range(5):
        model = build_model(tiny_config(seed=seed, **flags))
        randomize(model, seed=seed)
        fractions.append(_live_fraction(model, _grads(model, np.random.default_rng(seed))[1]))
    assert min(fractions) > 0.99


def test_no_permanently_dead_array_from_default_init(rng):
    # Branch outputs start at zero, which blocks the gradient upstream of
    # them. The cross-scale blocks sit behind two such layers, so they open
    # on the third step.
    model = build_model(tiny_config())
    named = list(model.named_parameters())
    adam = AdamState.for_model(model)
    first = _grads(model, rng)[1]
    assert _live_fraction(model, first) < 0.99
    for _ in range(3):
        adam_step(named, _grads(model, rng)[1], adam, 1e-3)
    g = _grads(model, rng)[1]
    for name, p in named:
        assert np.any(g.get(p, np.zeros(1)) != 0), name
    assert _live_fraction(model, g) > 0.99


def test_gradient_reaches_every_array_with_random_weights(rng):
    model = build_model(tiny_config())
    randomize(model, seed=3)
    _, g = _grads(model, rng)
    for name, p in model.named_parameters():
        assert p in g and np.any(g[p] != 0), name
