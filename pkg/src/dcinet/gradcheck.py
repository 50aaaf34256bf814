"""Central finite-difference verification of tape gradients.

Each check reduces an op's output to a scalar with fixed random weights,
then compares the tape gradient against ``(f(x+h) - f(x-h)) / 2h`` at
randomly chosen coordinates of every differentiable input. The error
measure is ``|g_tape - g_fd| / max(1, |g_fd|)``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from . import ops
from .tensor import Tape, Tensor

STEP = 1e-5
PROBES = 100
OPS_TOL = 1e-5
BLOCK_TOL = 1e-4


@dataclass
class CheckResult:
    name: str
    worst: float
    tol: float

    @property
    def passed(self) -> bool:
        return bool(self.worst < self.tol)


def max_rel_error(fn: Callable[[], Tensor], inputs: Sequence[Tensor], probes: int = PROBES,
                  step: float = STEP, seed: int = 0) -> float:
    """Worst relative error over ``probes`` coordinates spread over ``inputs``.

    ``fn`` takes no arguments and reads ``inputs`` (tensors it closes over or
    module parameters); probing rebinds their ``data``.
    """
    rng = np.random.default_rng(seed)
    for t in inputs:
        t.requires_grad = True
    out = fn()
    weights = rng.standard_normal(out.shape)

    def objective() -> float:
        return float(np.sum(fn().data * weights))

    with Tape() as tape:
        root = ops.sum(ops.mul(fn(), Tensor(weights)))
    grads = tape.backward(root)

    worst = 0.0
    sizes = np.array([t.size for t in inputs], dtype=float)
    owners = rng.choice(len(inputs), size=probes, p=sizes / sizes.sum())
    for k in owners:
        t = inputs[k]
        idx = int(rng.integers(t.size))
        g_ad = grads.get(t)
        g_ad = 0.0 if g_ad is None else float(g_ad.reshape(-1)[idx])
        base = t.data
        bumped = base.copy().reshape(-1)
        bumped[idx] += step
        t.data = bumped.reshape(base.shape)
        up = objective()
        bumped[idx] -= 2 * step
        t.data = bumped.reshape(base.shape)
        down = objective()
        t.data = base
        g_fd = (up - down) / (2 * step)
        worst = max(worst, abs(g_ad - g_fd) / max(1.0, abs(g_fd)))
    return worst


def randomize(module, seed: int = 0, std: float = 0.3) -> None:
    """Overwrite every parameter with N(0, std), LayerNorm gains near 1, so
    no branch is trivially zero during a check."""
    rng = np.random.default_rng(seed)
    for name, p in module.named_parameters():
        noise = rng.standard_normal(p.shape) * std
        p.data = 1.0 + noise if name.endswith("gamma") else noise


# ----------------------------------------------------------------- suites

def _arr(rng, *shape):
    return Tensor(rng.standard_normal(shape))


def op_checks(seed: int = 0) -> list:
    """(name, closure -> worst error) for every differentiable op."""
    rng = np.random.default_rng(seed)
    checks = []

    def add(name, fn, inputs):
        checks.append((name, lambda: max_rel_error(fn, inputs, seed=seed)))

    a, b = _arr(rng, 2, 3, 4, 5), _arr(rng, 2, 3, 4, 5)
    pos = Tensor(rng.uniform(0.5, 2.0, (2, 3, 4, 5)))
    for name, f in (("add", ops.add), ("sub", ops.sub), ("mul", ops.mul)):
        add(name, lambda f=f: f(a, b), [a, b])
    add("div", lambda: ops.div(a, pos), [a, pos])
    add("scale", lambda: ops.scale(a, -1.7), [a])
    add("sigmoid", lambda: ops.sigmoid(a), [a])
    add("gelu", lambda: ops.gelu(a), [a])
    add("abs", lambda: ops.abs(a), [a])
    add("sum", lambda: ops.sum(a), [a])
    add("mean", lambda: ops.mean(a), [a])

    q, k = _arr(rng, 2, 3, 5, 4), _arr(rng, 2, 3, 4, 6)
    add("matmul_batched", lambda: ops.matmul_batched(q, k), [q, k])

    x = _arr(rng, 2, 3, 5, 5)
    w, bias = _arr(rng, 4, 3, 3, 3), _arr(rng, 4)
    add("conv2d", lambda: ops.conv2d(x, w, bias, stride=1, pad=1), [x, w, bias])
    x6 = _arr(rng, 2, 3, 6, 6)
    add("conv2d_stride2", lambda: ops.conv2d(x6, w, bias, stride=2, pad=1), [x6, w, bias])

    xd = _arr(rng, 2, 3, 8, 7)
    wd, bd = _arr(rng, 3, 1, 7, 7), _arr(rng, 3)
    add("dwconv2d", lambda: ops.dwconv2d(xd, wd, bd, pad=3), [xd, wd, bd])

    xl = _arr(rng, 2, 5, 4, 3)
    wl, bl = _arr(rng, 3, 5), _arr(rng, 3)
    add("linear_channels", lambda: ops.linear_channels(xl, wl, bl), [xl, wl, bl])

    gamma = Tensor(1.0 + 0.3 * rng.standard_normal(5))
    beta = _arr(rng, 5)
    add("layer_norm", lambda: ops.layer_norm(xl, gamma, beta, 1e-6), [xl, gamma, beta])

    s = _arr(rng, 2, 3, 4, 6)
    add("softmax_lastdim", lambda: ops.softmax_lastdim(s), [s])
    add("global_avg_pool", lambda: ops.global_avg_pool(x), [x])
    gate = _arr(rng, 2, 3, 1, 1)
    add("channel_gate", lambda: ops.channel_gate(x, gate), [x, gate])
    add("resize_bilinear_down", lambda: ops.resize_bilinear(x6, 3, 2), [x6])
    add("resize_bilinear_up", lambda: ops.resize_bilinear(x, 9, 7), [x])

    xf = _arr(rng, 1, 1, 4, 6)
    add("rfft2", lambda: ops.rfft2(xf), [xf])
    add("rfft2_l1", lambda: ops.mean(ops.abs(ops.rfft2(xf))), [xf])
    xo = _arr(rng, 2, 2, 5, 7)
    add("rfft2_odd", lambda: ops.rfft2(xo), [xo])

    c1, c2 = _arr(rng, 2, 2, 3, 3), _arr(rng, 2, 3, 3, 3)
    add("concat_channels", lambda: ops.concat_channels([c1, c2]), [c1, c2])
    add("permute", lambda: ops.permute(q, (0, 2, 3, 1)), [q])
    add("getitem", lambda: x[:, :, 1:, :-1], [x])
    return checks


def block_checks(seed: int = 0) -> list:
    from .blocks import ECIR, LRDC, SIMB, ChannelAttention
    from .dim import CSI, CVI, DIM, FeaturePyramid
    from . import losses

    rng = np.random.default_rng(seed)
    checks = []

    def add(name, fn, module, extra=()):
        if module is not None:
            randomize(module, seed)
        inputs = list(extra) + (module.parameters() if module is not None else [])
        checks.append((name, lambda: max_rel_error(fn, inputs, seed=seed)))

    f = _arr(rng, 1, 4, 8, 8)
    lrdc = LRDC(4, 7, rng)
    add("lrdc", lambda: lrdc(f), lrdc, [f])
    fe = _arr(rng, 1, 8, 5, 5)
    ca = ChannelAttention(8, 4, rng)
    add("channel_attention", lambda: ca(fe), ca, [fe])
    ecir = ECIR(4, 2, 4, rng)
    add("ecir", lambda: ecir(f), ecir, [f])
    simb = SIMB(4, rng)
    add("simb", lambda: simb(f), simb, [f])

    lf, rf = _arr(rng, 1, 4, 3, 6), _arr(rng, 1, 4, 3, 6)
    cvi = CVI(4, rng)
    add("cvi", lambda: ops.concat(list(cvi(lf, rf)[:2]), axis=0), cvi, [lf, rf])

    p1, p2, p3 = _arr(rng, 1, 2, 8, 8), _arr(rng, 1, 4, 4, 4), _arr(rng, 1, 8, 2, 2)
    csi = CSI(2, rng)
    add("csi", lambda: ops.concat([ops.reshape(t, (-1,)) for t in csi([p1, p2, p3])], 0),
        csi, [p1, p2, p3])

    q1, q2, q3 = _arr(rng, 1, 2, 8, 8), _arr(rng, 1, 4, 4, 4), _arr(rng, 1, 8, 2, 2)
    dim = DIM(2, rng)

    def run_dim():
        out = dim(FeaturePyramid([p1, p2, p3], [q1, q2, q3]))
        return ops.concat([ops.reshape(t, (-1,)) for t in out.left + out.right], 0)

    add("dim", run_dim, dim, [p1, p2, p3, q1, q2, q3])

    pl, pr = Tensor(rng.uniform(0, 1, (1, 3, 4, 6))), Tensor(rng.uniform(0, 1, (1, 3, 4, 6)))
    gl, gr = Tensor(rng.uniform(0, 1, (1, 3, 4, 6))), Tensor(rng.uniform(0, 1, (1, 3, 4, 6)))
    add("loss_fre", lambda: losses.loss_fre(pl, pr, gl, gr), None, [pl, pr])
    add("loss_tv", lambda: losses.loss_tv(pl, pr), None, [pl, pr])
    add("total_loss", lambda: losses.total_loss((pl, pr), (gl, gr))[0], None, [pl, pr])
    add("loss_l1", lambda: losses.alt_losses("l1", (pl, pr), (gl, gr)), None, [pl, pr])
    add("loss_l2", lambda: losses.alt_losses("l2", (pl, pr), (gl, gr)), None, [pl, pr])
    sl, sr = Tensor(rng.uniform(0, 1, (1, 3, 12, 13))), Tensor(rng.uniform(0, 1, (1, 3, 12, 13)))
    tl, tr = Tensor(rng.uniform(0, 1, (1, 3, 12, 13))), Tensor(rng.uniform(0, 1, (1, 3, 12, 13)))
    add("loss_ssim", lambda: losses.alt_losses("ssim", (sl, sr), (tl, tr)), None, [sl, sr])
    return checks


def model_checks(seed: int = 0) -> list:
    from .losses import total_loss
    from .network import ModelConfig, build_model

    rng = np.random.default_rng(seed)
    model = build_model(ModelConfig(base_channels=4, seed=seed))
    randomize(model, seed, std=0.2)
    left = Tensor(rng.uniform(0, 1, (1, 3, 8, 8)))
    right = Tensor(rng.uniform(0, 1, (1, 3, 8, 8)))
    gl = Tensor(rng.uniform(0, 1, (1, 3, 8, 8)))
    gr = Tensor(rng.uniform(0, 1, (1, 3, 8, 8)))

    def run():
        return total_loss(model(left, right), (gl, gr))[0]

    inputs = [left, right] + model.parameters()
    return [("model", lambda: max_rel_error(run, inputs, seed=seed))]


SCOPES = {"ops": (op_checks, OPS_TOL), "blocks": (block_checks, BLOCK_TOL),
          "model": (model_checks, BLOCK_TOL)}


def run_scope(scope: str, seed: int = 0) -> list:
    if scope == "all":
        return [r for s in SCOPES for r in run_scope(s, seed)]
    if scope not in SCOPES:
        raise ValueError(f"unknown gradcheck scope {scope!r}; choose from {sorted(SCOPES)} or all")
    factory, tol = SCOPES[scope]
    return [CheckResult(name, fn(), tol) for name, fn in factory(seed)]
