"""Differentiable operators over :class:`~dcinet.tensor.Tensor`.

Every op computes its forward result with numpy and registers a closure that
maps the upstream gradient to one gradient per input. Shapes are checked
eagerly; apart from scalar-vs-tensor arithmetic nothing broadcasts silently.
Image tensors are laid out ``[B, C, H, W]``.
"""

from __future__ import annotations

import math
from numbers import Number
from typing import Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy import fft as sfft
from scipy.special import erf

from .tensor import ShapeError, Tensor, as_tensor, make_output

_SQRT2 = math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


def _is_scalar(b) -> bool:
    return isinstance(b, Number) or (isinstance(b, Tensor) and b.shape == (1,))


def _binary_operands(op: str, a: Tensor, b):
    a = as_tensor(a)
    if isinstance(b, Number):
        return a, None, float(b)
    b = as_tensor(b)
    if a.shape != b.shape and not _is_scalar(b):
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} are not compatible")
    return a, b, None


def _reduce_to(g: np.ndarray, b: Tensor) -> np.ndarray:
    return g if g.shape == b.shape else np.asarray(g.sum()).reshape(b.shape)


# ---------------------------------------------------------------- elementwise

def add(a, b) -> Tensor:
    a, bt, c = _binary_operands("add", a, b)
    if bt is None:
        return make_output("add", a.data + c, [a], lambda g: (g,))
    return make_output("add", a.data + bt.data, [a, bt],
                       lambda g: (g, _reduce_to(g, bt)))


def sub(a, b) -> Tensor:
    a, bt, c = _binary_operands("sub", a, b)
    if bt is None:
        return make_output("sub", a.data - c, [a], lambda g: (g,))
    return make_output("sub", a.data - bt.data, [a, bt],
                       lambda g: (g, _reduce_to(-g, bt)))


def mul(a, b) -> Tensor:
    a, bt, c = _binary_operands("mul", a, b)
    if bt is None:
        return scale(a, c)
    ad, bd = a.data, bt.data
    return make_output("mul", ad * bd, [a, bt],
                       lambda g: (g * bd, _reduce_to(g * ad, bt)))


def div(a, b) -> Tensor:
    a, bt, c = _binary_operands("div", a, b)
    if bt is None:
        return scale(a, 1.0 / c)
    ad, bd = a.data, bt.data
    out = ad / bd

    def backward(g):
        ga = g / bd
        return ga, _reduce_to(-ga * out, bt)

    return make_output("div", out, [a, bt], backward)


def scale(a, s: float) -> Tensor:
    a = as_tensor(a)
    s = float(s)
    return make_output("scale", a.data * s, [a], lambda g: (g * s,))


def neg(a) -> Tensor:
    return scale(a, -1.0)


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    x = a.data
    # Split by sign so exp never overflows.
    e = np.exp(-np.abs(x))
    out = np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    return make_output("sigmoid", out, [a], lambda g: (g * out * (1.0 - out),))


def gelu(a) -> Tensor:
    """Exact (erf) GELU."""
    a = as_tensor(a)
    x = a.data
    cdf = 0.5 * (1.0 + erf(x / _SQRT2))
    out = x * cdf

    def backward(g):
        return (g * (cdf + x * _INV_SQRT_2PI * np.exp(-0.5 * x * x)),)

    return make_output("gelu", out, [a], backward)


def abs(a) -> Tensor:  # noqa: A001 - mirrors numpy naming
    a = as_tensor(a)
    x = a.data
    return make_output("abs", np.abs(x), [a], lambda g: (g * np.sign(x),))


def elementwise(op: str, a, b=None) -> Tensor:
    """Dispatch by name, for callers that select the op at runtime."""
    binary = {"add": add, "sub": sub, "mul": mul, "div": div, "scale": scale}
    unary = {"sigmoid": sigmoid, "gelu": gelu, "abs": abs, "neg": neg}
    if op in binary:
        return binary[op](a, b)
    if op in unary:
        return unary[op](a)
    raise ValueError(f"unknown elementwise op {op!r}")


# ----------------------------------------------------------------- reductions

def sum(a) -> Tensor:  # noqa: A001
    a = as_tensor(a)
    shape = a.shape
    return make_output("sum", np.asarray(a.data.sum()), [a],
                       lambda g: (np.full(shape, g.reshape(-1)[0]),))


def mean(a) -> Tensor:
    a = as_tensor(a)
    shape, n = a.shape, a.size
    return make_output("mean", np.asarray(a.data.mean()), [a],
                       lambda g: (np.full(shape, g.reshape(-1)[0] / n),))


def global_avg_pool(x) -> Tensor:
    x = as_tensor(x)
    _check_rank("global_avg_pool", x, 4)
    B, C, H, W = x.shape
    inv = 1.0 / (H * W)
    return make_output("global_avg_pool", x.data.mean(axis=(2, 3), keepdims=True), [x],
                       lambda g: (np.broadcast_to(g * inv, x.shape).copy(),))


# -------------------------------------------------------------------- layout

def reshape(x, shape) -> Tensor:
    x = as_tensor(x)
    old = x.shape
    return make_output("reshape", x.data.reshape(shape), [x],
                       lambda g: (g.reshape(old),))


def permute(x, axes: Sequence[int]) -> Tensor:
    x = as_tensor(x)
    axes = tuple(axes)
    if sorted(axes) != list(range(x.ndim)):
        raise ShapeError(f"permute: axes {axes} invalid for rank {x.ndim}")
    inverse = tuple(np.argsort(axes))
    return make_output("permute", np.ascontiguousarray(x.data.transpose(axes)), [x],
                       lambda g: (np.ascontiguousarray(g.transpose(inverse)),))


def getitem(x, index) -> Tensor:
    """Basic (slice/int) indexing only, so the backward scatter is a plain
    assignment without duplicate targets."""
    x = as_tensor(x)
    items = index if isinstance(index, tuple) else (index,)
    if not all(isinstance(i, (slice, int)) or i is Ellipsis for i in items):
        raise TypeError("getitem supports only slices, ints and Ellipsis")
    out = np.ascontiguousarray(x.data[index])

    def backward(g):
        full = np.zeros(x.shape)
        full[index] = g
        return (full,)

    return make_output("getitem", out, [x], backward)


def concat(xs: Sequence[Tensor], axis: int) -> Tensor:
    xs = [as_tensor(t) for t in xs]
    if not xs:
        raise ShapeError("concat of an empty list")
    ref = xs[0].shape
    for t in xs[1:]:
        if t.ndim != len(ref) or any(
                d != r for i, (d, r) in enumerate(zip(t.shape, ref)) if i != axis):
            raise ShapeError(
                f"concat: shape {t.shape} does not match {ref} outside axis {axis}")
    sizes = [t.shape[axis] for t in xs]
    bounds = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.ascontiguousarray(p) for p in np.split(g, bounds, axis=axis))

    return make_output("concat", np.concatenate([t.data for t in xs], axis=axis),
                       xs, backward)


def concat_channels(xs: Sequence[Tensor]) -> Tensor:
    for t in xs:
        _check_rank("concat_channels", t, 4)
    return concat(xs, axis=1)


def _check_rank(op: str, x: Tensor, rank: int) -> None:
    if x.ndim != rank:
        raise ShapeError(f"{op}: expected rank {rank}, got shape {x.shape}")


# ------------------------------------------------------------ linear algebra

def matmul_batched(a, b) -> Tensor:
    """``[B,H,W,C] @ [B,H,C,W'] -> [B,H,W,W']``, one product per (batch, row)."""
    a, b = as_tensor(a), as_tensor(b)
    _check_rank("matmul_batched", a, 4)
    _check_rank("matmul_batched", b, 4)
    if a.shape[:2] != b.shape[:2]:
        raise ShapeError(f"matmul_batched: batch/row extents {a.shape} vs {b.shape}")
    if a.shape[3] != b.shape[2]:
        raise ShapeError(f"matmul_batched: inner extents {a.shape} vs {b.shape}")
    ad, bd = a.data, b.data

    def backward(g):
        return g @ bd.swapaxes(-1, -2), ad.swapaxes(-1, -2) @ g

    return make_output("matmul_batched", ad @ bd, [a, b], backward)


def linear_channels(x, w, bias) -> Tensor:
    """Per-pixel affine map across channels (a 1x1 convolution)."""
    x, w, bias = as_tensor(x), as_tensor(w), as_tensor(bias)
    _check_rank("linear_channels", x, 4)
    B, C, H, W = x.shape
    if w.ndim != 2 or w.shape[1] != C:
        raise ShapeError(f"linear_channels: weight {w.shape} vs input channels {C}")
    if bias.shape != (w.shape[0],):
        raise ShapeError(f"linear_channels: bias {bias.shape} vs weight {w.shape}")
    Co = w.shape[0]
    xf = x.data.reshape(B, C, H * W)
    out = (w.data @ xf + bias.data[None, :, None]).reshape(B, Co, H, W)

    def backward(g):
        gf = g.reshape(B, Co, H * W)
        gx = (w.data.T @ gf).reshape(x.shape)
        gw = np.tensordot(gf, xf, axes=([0, 2], [0, 2]))
        return gx, gw, gf.sum(axis=(0, 2))

    return make_output("linear_channels", out, [x, w, bias], backward)


# -------------------------------------------------------------- convolutions

def _out_extent(op: str, n: int, k: int, stride: int, pad: int) -> int:
    span = n + 2 * pad - k
    if span < 0:
        raise ShapeError(f"{op}: kernel {k} larger than padded extent {n + 2 * pad}")
    return span // stride + 1


def conv2d(x, w, bias, stride: int = 1, pad: int = 0) -> Tensor:
    """Dense 2-D cross-correlation, zero padding.

    The output extent is ``(n + 2*pad - k) // stride + 1``; with stride 2 the
    trailing row/column of an even-sized padded input is not visited.
    """
    x, w, bias = as_tensor(x), as_tensor(w), as_tensor(bias)
    _check_rank("conv2d", x, 4)
    if w.ndim != 4 or w.shape[2] != w.shape[3] or w.shape[2] % 2 == 0:
        raise ShapeError(f"conv2d: weight must be [Co,Ci,k,k] with odd k, got {w.shape}")
    Co, Ci, k, _ = w.shape
    B, C, H, W = x.shape
    if C != Ci:
        raise ShapeError(f"conv2d: input channels {C} vs weight {w.shape}")
    if bias.shape != (Co,):
        raise ShapeError(f"conv2d: bias {bias.shape} vs {Co} output channels")
    if stride < 1:
        raise ShapeError("conv2d: stride must be >= 1")
    Ho = _out_extent("conv2d", H, k, stride, pad)
    Wo = _out_extent("conv2d", W, k, stride, pad)
    xp = np.pad(x.data, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x.data
    cols = sliding_window_view(xp, (k, k), axis=(2, 3))[:, :, ::stride, ::stride]
    cols = cols[:, :, :Ho, :Wo]
    out = np.tensordot(cols, w.data, axes=([1, 4, 5], [1, 2, 3]))  # B,Ho,Wo,Co
    out = np.ascontiguousarray(out.transpose(0, 3, 1, 2)) + bias.data[None, :, None, None]

    def backward(g):
        gw = np.tensordot(g, cols, axes=([0, 2, 3], [0, 2, 3]))
        gcols = np.tensordot(g, w.data, axes=([1], [0]))  # B,Ho,Wo,Ci,k,k
        gxp = np.zeros(xp.shape)
        for i in range(k):
            for j in range(k):
                gxp[:, :, i:i + stride * Ho:stride, j:j + stride * Wo:stride] += \
                    gcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
        gx = gxp[:, :, pad:pad + H, pad:pad + W] if pad else gxp
        return np.ascontiguousarray(gx), gw, g.sum(axis=(0, 2, 3))

    return make_output("conv2d", out, [x, w, bias], backward)


def _dwconv2d_grads(g, xp_spec, w_spec, padded_hw, k):
    """Gradients of a depthwise correlation w.r.t. the padded input and the
    weight, from the cached spectra of both."""
    P, Q = padded_hw
    g_spec = sfft.rfft2(g, s=(P, Q), axes=(2, 3))
    gxp = sfft.irfft2(g_spec * w_spec, s=(P, Q), axes=(2, 3))
    cross = (np.conj(g_spec) * xp_spec).sum(axis=0)
    gw = sfft.irfft2(cross, s=(P, Q), axes=(1, 2))[:, :k, :k]
    return gxp, gw[:, None]


def dwconv2d(x, w, bias, pad: int) -> Tensor:
    """Depthwise (groups = channels) cross-correlation, stride 1.

    Evaluated with FFTs of the padded plane size. With that size, the
    circular products used here never wrap for the output region, so forward
    and both gradients are exact linear correlations/convolutions (up to
    ~1e-15 relative rounding).
    """
    x, w, bias = as_tensor(x), as_tensor(w), as_tensor(bias)
    _check_rank("dwconv2d", x, 4)
    B, C, H, W = x.shape
    if w.ndim != 4 or w.shape[:2] != (C, 1) or w.shape[2] != w.shape[3] or w.shape[2] % 2 == 0:
        raise ShapeError(f"dwconv2d: weight must be [{C},1,k,k] with odd k, got {w.shape}")
    if bias.shape != (C,):
        raise ShapeError(f"dwconv2d: bias {bias.shape} vs {C} channels")
    k = w.shape[2]
    Ho = _out_extent("dwconv2d", H, k, 1, pad)
    Wo = _out_extent("dwconv2d", W, k, 1, pad)
    xp = np.pad(x.data, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x.data
    P, Q = xp.shape[2:]
    xp_spec = sfft.rfft2(xp, axes=(2, 3))
    w_spec = sfft.rfft2(w.data[:, 0], s=(P, Q), axes=(1, 2))
    out = sfft.irfft2(xp_spec * np.conj(w_spec), s=(P, Q), axes=(2, 3))[:, :, :Ho, :Wo]
    out = out + bias.data[None, :, None, None]

    def backward(g):
        gfull = np.zeros((B, C, P, Q))
        gfull[:, :, :Ho, :Wo] = g
        gxp, gw = _dwconv2d_grads(gfull, xp_spec, w_spec, (P, Q), k)
        gx = gxp[:, :, pad:pad + H, pad:pad + W]
        return np.ascontiguousarray(gx), gw, g.sum(axis=(0, 2, 3))

    return make_output("dwconv2d", out, [x, w, bias], backward)


# ------------------------------------------------------------- normalization

def layer_norm(x, gamma, beta, eps: float = 1e-6) -> Tensor:
    """Normalize across channels at every spatial position."""
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    _check_rank("layer_norm", x, 4)
    C = x.shape[1]
    if gamma.shape != (C,) or beta.shape != (C,):
        raise ShapeError(f"layer_norm: gamma/beta {gamma.shape}/{beta.shape} vs {C} channels")
    if eps <= 0:
        raise ValueError("layer_norm: eps must be positive")
    xd = x.data
    mu = xd.mean(axis=1, keepdims=True)
    xc = xd - mu
    rstd = 1.0 / np.sqrt((xc * xc).mean(axis=1, keepdims=True) + eps)
    xhat = xc * rstd
    gm = gamma.data[None, :, None, None]
    out = gm * xhat + beta.data[None, :, None, None]

    def backward(g):
        gh = g * gm
        gx = rstd * (gh - gh.mean(axis=1, keepdims=True)
                     - xhat * (gh * xhat).mean(axis=1, keepdims=True))
        return gx, (g * xhat).sum(axis=(0, 2, 3)), g.sum(axis=(0, 2, 3))

    return make_output("layer_norm", out, [x, gamma, beta], backward)


def softmax_lastdim(x) -> Tensor:
    x = as_tensor(x)
    z = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        return (out * (g - (g * out).sum(axis=-1, keepdims=True)),)

    return make_output("softmax_lastdim", out, [x], backward)


def channel_gate(x, s) -> Tensor:
    """``x[B,C,H,W] * s[B,C,1,1]``: the one explicit spatial broadcast."""
    x, s = as_tensor(x), as_tensor(s)
    _check_rank("channel_gate", x, 4)
    if s.shape != x.shape[:2] + (1, 1):
        raise ShapeError(f"channel_gate: gate {s.shape} vs input {x.shape}")
    xd, sd = x.data, s.data
    return make_output("channel_gate", xd * sd, [x, s],
                       lambda g: (g * sd, (g * xd).sum(axis=(2, 3), keepdims=True)))


# ------------------------------------------------------------------ resizing

def bilinear_matrix(n_in: int, n_out: int) -> np.ndarray:
    """``[n_out, n_in]`` interpolation weights, half-pixel centres
    (align_corners=False), source coordinates clamped at the edges."""
    m = np.zeros((n_out, n_in))
    ratio = n_in / n_out
    for i in range(n_out):
        src = max((i + 0.5) * ratio - 0.5, 0.0)
        i0 = min(int(math.floor(src)), n_in - 1)
        i1 = min(i0 + 1, n_in - 1)
        lam = src - i0
        m[i, i0] += 1.0 - lam
        m[i, i1] += lam
    return m


def resize_bilinear(x, height: int, width: int) -> Tensor:
    x = as_tensor(x)
    _check_rank("resize_bilinear", x, 4)
    if height < 1 or width < 1:
        raise ShapeError("resize_bilinear: target extents must be >= 1")
    B, C, H, W = x.shape
    if (height, width) == (H, W):
        return make_output("resize_bilinear", x.data.copy(), [x], lambda g: (g,))
    ry = bilinear_matrix(H, height)
    rx = bilinear_matrix(W, width)
    out = ry @ x.data @ rx.T
    return make_output("resize_bilinear", out, [x], lambda g: (ry.T @ g @ rx,))


# ----------------------------------------------------------------- spectrum

def rfft2(x) -> Tensor:
    """Real 2-D DFT over the last two axes.

    ``[B,C,H,W] -> [B,C,H,W//2+1,2]`` with the last axis holding (real, imag).
    """
    x = as_tensor(x)
    _check_rank("rfft2", x, 4)
    H, W = x.shape[2:]
    Wf = W // 2 + 1
    spec = np.fft.rfft2(x.data, axes=(2, 3))
    out = np.stack([spec.real, spec.imag], axis=-1)

    def backward(g):
        # Adjoint of the half-spectrum map: zero-extend, inverse transform,
        # undo numpy's 1/(H*W) and keep the real part.
        full = np.zeros(x.shape, dtype=np.complex128)
        full[..., :Wf] = g[..., 0] + 1j * g[..., 1]
        return (np.fft.ifft2(full, axes=(2, 3)).real * (H * W),)

    return make_output("rfft2", out, [x], backward)
