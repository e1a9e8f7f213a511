"""Neural-network building blocks over single-sample [C,H,W] tensors.

Convolutions use the cross-correlation convention (no kernel flip), stride 1,
and "same" zero padding of ((k-1)*d)//2 per side, so spatial extents are
preserved; kernels must be odd.  Normalizations use biased variance.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import note_choice
from .errors import EvenKernel, OddExtent, ShapeMismatch
from .tensor import Tensor, _accum, _make


@dataclass
class Conv2dParams:
    """weight [C_out, C_in/groups, k, k], optional bias [C_out], stride fixed at 1."""

    weight: Tensor
    bias: Tensor | None = None
    dilation: int = 1
    groups: int = 1

    def __post_init__(self):
        w = self.weight.data
        if w.ndim != 4 or w.shape[2] != w.shape[3]:
            raise ShapeMismatch(f"conv weight must be [C_out, C_in/g, k, k], got {w.shape}")
        if w.shape[2] % 2 == 0:
            raise EvenKernel(f"kernel extent {w.shape[2]} must be odd")
        if self.dilation < 1 or self.groups < 1:
            raise ShapeMismatch("dilation and groups must be positive")
        if w.shape[0] % self.groups != 0:
            raise ShapeMismatch(f"groups {self.groups} does not divide C_out {w.shape[0]}")
        if self.bias is not None and self.bias.data.shape != (w.shape[0],):
            raise ShapeMismatch(f"bias shape {self.bias.data.shape} != ({w.shape[0]},)")

    @property
    def kernel(self) -> int:
        return self.weight.data.shape[2]

    @property
    def c_out(self) -> int:
        return self.weight.data.shape[0]

    @property
    def c_in(self) -> int:
        return self.weight.data.shape[1] * self.groups


@dataclass
class NormParams:
    """Affine scale/shift over channels plus the variance epsilon."""

    gamma: Tensor
    beta: Tensor
    eps: float = 1e-5

    def __post_init__(self):
        if self.eps <= 0:
            raise ShapeMismatch("norm epsilon must be positive")


@dataclass
class LinearParams:
    """Affine map weight [n_out, n_in] with optional bias [n_out]."""

    weight: Tensor
    bias: Tensor | None = None


def _im2col(xp: np.ndarray, k: int, d: int, h: int, w: int) -> np.ndarray:
    """Gather the k*k shifted views of a padded [C,Hp,Wp] map as [C*k*k, H*W]."""
    c = xp.shape[0]
    cols = np.empty((c, k, k, h * w), dtype=xp.dtype)
    for i in range(k):
        for j in range(k):
            cols[:, i, j] = xp[:, i * d:i * d + h, j * d:j * d + w].reshape(c, h * w)
    return cols.reshape(c * k * k, h * w)


def _col2im(cols: np.ndarray, c: int, k: int, d: int, h: int, w: int, hp: int, wp: int) -> np.ndarray:
    """Scatter-add [C*k*k, H*W] columns back onto a padded [C,Hp,Wp] map."""
    xp = np.zeros((c, hp, wp), dtype=cols.dtype)
    cols = cols.reshape(c, k, k, h, w)
    for i in range(k):
        for j in range(k):
            xp[:, i * d:i * d + h, j * d:j * d + w] += cols[:, i, j]
    return xp


def conv2d(x: Tensor, p: Conv2dParams) -> Tensor:
    """Stride-1 same-padded grouped 2d convolution of a [C_in,H,W] tensor."""
    xd = x.data
    if xd.ndim != 3:
        raise ShapeMismatch(f"conv2d input must be [C,H,W], got {xd.shape}")
    if xd.shape[0] != p.c_in:
        raise ShapeMismatch(f"conv2d input has {xd.shape[0]} channels, weight expects {p.c_in}")
    if p.c_in % p.groups != 0:
        raise ShapeMismatch(f"groups {p.groups} does not divide C_in {p.c_in}")
    c_in, h, w = xd.shape
    k, d, g = p.kernel, p.dilation, p.groups
    c_out = p.c_out
    pad = ((k - 1) * d) // 2
    cg_in, cg_out = c_in // g, c_out // g

    xp = np.zeros((c_in, h + 2 * pad, w + 2 * pad), dtype=xd.dtype)
    xp[:, pad:pad + h, pad:pad + w] = xd
    wd = p.weight.data
    depthwise = g == c_in == c_out

    if depthwise:
        out_data = np.zeros((c_out, h, w), dtype=xd.dtype)
        for i in range(k):
            for j in range(k):
                out_data += wd[:, 0, i, j, None, None] * xp[:, i * d:i * d + h, j * d:j * d + w]
    else:
        # One GEMM per group over im2col columns.
        out_data = np.empty((g, cg_out, h * w), dtype=xd.dtype)
        wg = wd.reshape(g, cg_out, cg_in * k * k)
        for i_g in range(g):
            cols = _im2col(xp[i_g * cg_in:(i_g + 1) * cg_in], k, d, h, w)
            np.matmul(wg[i_g], cols, out=out_data[i_g])
        out_data = out_data.reshape(c_out, h, w)
    if p.bias is not None:
        out_data += p.bias.data[:, None, None]

    prev = (x, p.weight) if p.bias is None else (x, p.weight, p.bias)
    out = _make(out_data, prev, "conv2d")
    if out.requires_grad:
        wt, bt = p.weight, p.bias

        def _bw():
            go = out.grad
            if bt is not None and bt.requires_grad:
                _accum(bt, go.sum(axis=(1, 2)))
            if depthwise:
                if wt.requires_grad:
                    dw = np.zeros_like(wt.data)
                    for i in range(k):
                        for j in range(k):
                            patch = xp[:, i * d:i * d + h, j * d:j * d + w]
                            dw[:, 0, i, j] = (go * patch).sum(axis=(1, 2))
                    _accum(wt, dw)
                if x.requires_grad:
                    dxp = np.zeros_like(xp)
                    for i in range(k):
                        for j in range(k):
                            dxp[:, i * d:i * d + h, j * d:j * d + w] += wd[:, 0, i, j, None, None] * go
                    _accum(x, dxp[:, pad:pad + h, pad:pad + w])
            else:
                gg = go.reshape(g, cg_out, h * w)
                wg = wd.reshape(g, cg_out, cg_in * k * k)
                dw = np.empty_like(wg) if wt.requires_grad else None
                dx = np.empty_like(xd) if x.requires_grad else None
                hp, wp = xp.shape[1:]
                for i_g in range(g):
                    sl = slice(i_g * cg_in, (i_g + 1) * cg_in)
                    if wt.requires_grad or x.requires_grad:
                        cols = _im2col(xp[sl], k, d, h, w)
                    if wt.requires_grad:
                        np.matmul(gg[i_g], cols.T, out=dw[i_g])
                    if x.requires_grad:
                        dcols = wg[i_g].T @ gg[i_g]
                        dx[sl] = _col2im(dcols, cg_in, k, d, h, w, hp, wp)[:, pad:pad + h, pad:pad + w]
                if wt.requires_grad:
                    _accum(wt, dw.reshape(wt.data.shape))
                if x.requires_grad:
                    _accum(x, dx)

        out._backward = _bw
    return out


def gap(x: Tensor) -> Tensor:
    """Per-channel spatial mean of a [C,H,W] tensor -> [C]."""
    xd = x.data
    if xd.ndim != 3:
        raise ShapeMismatch(f"gap input must be [C,H,W], got {xd.shape}")
    n = xd.shape[1] * xd.shape[2]
    out = _make(xd.mean(axis=(1, 2)), (x,), "gap")
    if out.requires_grad:

        def _bw():
            _accum(x, np.broadcast_to(out.grad[:, None, None] / n, xd.shape))

        out._backward = _bw
    return out


def channel_pool(x: Tensor, mode: str) -> Tensor:
    """Reduce the channel axis of [C,H,W] to [1,H,W] by mean or max."""
    xd = x.data
    if xd.ndim != 3:
        raise ShapeMismatch(f"channel_pool input must be [C,H,W], got {xd.shape}")
    c = xd.shape[0]
    if mode == "avg":
        out = _make(xd.mean(axis=0, keepdims=True), (x,), "channel_pool")
        if out.requires_grad:

            def _bw():
                _accum(x, np.broadcast_to(out.grad / c, xd.shape))

            out._backward = _bw
        return out
    if mode == "max":
        idx = xd.argmax(axis=0)  # first max wins on ties
        note_choice(idx)
        out = _make(xd.max(axis=0, keepdims=True), (x,), "channel_pool")
        if out.requires_grad:

            def _bw():
                buf = np.zeros_like(xd)
                np.put_along_axis(buf, idx[None], out.grad, axis=0)
                _accum(x, buf)

            out._backward = _bw
        return out
    raise ValueError(f"unknown channel_pool mode {mode!r}")


def softmax(x: Tensor) -> Tensor:
    """Stable softmax of a rank-1 tensor."""
    xd = x.data
    if xd.ndim != 1:
        raise ShapeMismatch(f"softmax expects a rank-1 tensor, got {xd.shape}")
    e = np.exp(xd - xd.max())
    y = e / e.sum()
    out = _make(y, (x,), "softmax")
    if out.requires_grad:

        def _bw():
            g = out.grad
            _accum(x, y * (g - (g * y).sum()))

        out._backward = _bw
    return out


def log_softmax_channels(x: Tensor) -> Tensor:
    """Log-softmax over axis 0 of a [K,...] tensor, computed stably."""
    xd = x.data
    if xd.ndim < 1:
        raise ShapeMismatch("log_softmax_channels needs rank >= 1")
    s = xd - xd.max(axis=0, keepdims=True)
    y = s - np.log(np.exp(s).sum(axis=0, keepdims=True))
    out = _make(y, (x,), "log_softmax_channels")
    if out.requires_grad:
        p = np.exp(y)

        def _bw():
            g = out.grad
            _accum(x, g - p * g.sum(axis=0, keepdims=True))

        out._backward = _bw
    return out


def relu(x: Tensor) -> Tensor:
    out = _make(np.maximum(x.data, 0.0), (x,), "relu")
    if out.requires_grad:
        mask = x.data > 0

        def _bw():
            _accum(x, out.grad * mask)

        out._backward = _bw
    return out


def leaky_relu(x: Tensor, slope: float = 0.01) -> Tensor:
    xd = x.data
    out = _make(np.where(xd > 0, xd, slope * xd), (x,), "leaky_relu")
    if out.requires_grad:
        factor = np.where(xd > 0, 1.0, slope)

        def _bw():
            _accum(x, out.grad * factor)

        out._backward = _bw
    return out


def _sigmoid_data(xd: np.ndarray) -> np.ndarray:
    # where() evaluates both branches; the discarded one may overflow harmlessly.
    with np.errstate(over="ignore", invalid="ignore"):
        return np.where(xd >= 0, 1.0 / (1.0 + np.exp(-xd)), np.exp(xd) / (1.0 + np.exp(xd)))


def sigmoid(x: Tensor) -> Tensor:
    y = _sigmoid_data(x.data)
    out = _make(y, (x,), "sigmoid")
    if out.requires_grad:

        def _bw():
            _accum(x, out.grad * y * (1.0 - y))

        out._backward = _bw
    return out


def silu(x: Tensor) -> Tensor:
    """x * sigmoid(x)."""
    s = _sigmoid_data(x.data)
    out = _make(x.data * s, (x,), "silu")
    if out.requires_grad:

        def _bw():
            _accum(x, out.grad * (s + x.data * s * (1.0 - s)))

        out._backward = _bw
    return out


def _norm_forward(xd, mu, var, gamma, beta, eps):
    inv = 1.0 / np.sqrt(var + eps)
    xh = (xd - mu) * inv
    return xh, inv, gamma * xh + beta


def instance_norm(x: Tensor, p: NormParams) -> Tensor:
    """Standardize each channel of [C,H,W] over its spatial extent, then affine."""
    xd = x.data
    if xd.ndim != 3:
        raise ShapeMismatch(f"instance_norm input must be [C,H,W], got {xd.shape}")
    if p.gamma.data.shape != (xd.shape[0],):
        raise ShapeMismatch(f"gamma shape {p.gamma.data.shape} != ({xd.shape[0]},)")
    mu = xd.mean(axis=(1, 2), keepdims=True)
    var = xd.var(axis=(1, 2), keepdims=True)  # biased
    xh, inv, y = _norm_forward(xd, mu, var, p.gamma.data[:, None, None], p.beta.data[:, None, None], p.eps)
    out = _make(y, (x, p.gamma, p.beta), "instance_norm")
    if out.requires_grad:
        gt, bt = p.gamma, p.beta

        def _bw():
            g = out.grad
            if gt.requires_grad:
                _accum(gt, (g * xh).sum(axis=(1, 2)))
            if bt.requires_grad:
                _accum(bt, g.sum(axis=(1, 2)))
            if x.requires_grad:
                gh = g * gt.data[:, None, None]
                m1 = gh.mean(axis=(1, 2), keepdims=True)
                m2 = (gh * xh).mean(axis=(1, 2), keepdims=True)
                _accum(x, inv * (gh - m1 - xh * m2))

        out._backward = _bw
    return out


def layer_norm(x: Tensor, p: NormParams) -> Tensor:
    """Standardize the trailing (channel) axis of [..., C] per position, then affine."""
    xd = x.data
    c = xd.shape[-1]
    if p.gamma.data.shape != (c,):
        raise ShapeMismatch(f"gamma shape {p.gamma.data.shape} != ({c},)")
    mu = xd.mean(axis=-1, keepdims=True)
    var = xd.var(axis=-1, keepdims=True)  # biased
    xh, inv, y = _norm_forward(xd, mu, var, p.gamma.data, p.beta.data, p.eps)
    out = _make(y, (x, p.gamma, p.beta), "layer_norm")
    if out.requires_grad:
        gt, bt = p.gamma, p.beta
        lead = tuple(range(xd.ndim - 1))

        def _bw():
            g = out.grad
            if gt.requires_grad:
                _accum(gt, (g * xh).sum(axis=lead))
            if bt.requires_grad:
                _accum(bt, g.sum(axis=lead))
            if x.requires_grad:
                gh = g * gt.data
                m1 = gh.mean(axis=-1, keepdims=True)
                m2 = (gh * xh).mean(axis=-1, keepdims=True)
                _accum(x, inv * (gh - m1 - xh * m2))

        out._backward = _bw
    return out


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """Affine map over the trailing axis: y = x @ weight.T + bias."""
    xd, wd = x.data, weight.data
    if wd.ndim != 2:
        raise ShapeMismatch(f"linear weight must be rank-2, got {wd.shape}")
    if xd.ndim < 1 or xd.shape[-1] != wd.shape[1]:
        raise ShapeMismatch(f"linear: input {xd.shape} does not match weight {wd.shape}")
    if bias is not None and bias.data.shape != (wd.shape[0],):
        raise ShapeMismatch(f"linear bias shape {bias.data.shape} != ({wd.shape[0]},)")
    y = xd @ wd.T
    if bias is not None:
        y = y + bias.data
    prev = (x, weight) if bias is None else (x, weight, bias)
    out = _make(y, prev, "linear")
    if out.requires_grad:
        n_in, n_out = wd.shape[1], wd.shape[0]

        def _bw():
            g = out.grad
            g2 = g.reshape(-1, n_out)
            if x.requires_grad:
                _accum(x, (g @ wd).reshape(xd.shape))
            if weight.requires_grad:
                _accum(weight, g2.T @ xd.reshape(-1, n_in))
            if bias is not None and bias.requires_grad:
                _accum(bias, g2.sum(axis=0))

        out._backward = _bw
    return out


def apply_linear(x: Tensor, p: LinearParams) -> Tensor:
    return linear(x, p.weight, p.bias)


def maxpool2(x: Tensor) -> Tensor:
    """2x2 max pooling with stride 2 over a [C,H,W] tensor; extents must be even."""
    xd = x.data
    if xd.ndim != 3:
        raise ShapeMismatch(f"maxpool2 input must be [C,H,W], got {xd.shape}")
    c, h, w = xd.shape
    if h % 2 or w % 2:
        raise OddExtent(f"maxpool2 needs even extents, got {h}x{w}")
    blocks = xd.reshape(c, h // 2, 2, w // 2, 2).transpose(0, 1, 3, 2, 4).reshape(c, h // 2, w // 2, 4)
    idx = blocks.argmax(axis=-1)  # first max wins on ties
    note_choice(idx)
    out = _make(np.take_along_axis(blocks, idx[..., None], axis=-1)[..., 0], (x,), "maxpool2")
    if out.requires_grad:

        def _bw():
            buf = np.zeros((c, h // 2, w // 2, 4), dtype=xd.dtype)
            np.put_along_axis(buf, idx[..., None], out.grad[..., None], axis=-1)
            _accum(x, buf.reshape(c, h // 2, w // 2, 2, 2).transpose(0, 1, 3, 2, 4).reshape(c, h, w))

        out._backward = _bw
    return out


def upsample_nearest2(x: Tensor) -> Tensor:
    """2x nearest-neighbor enlargement of a [C,H,W] tensor."""
    xd = x.data
    if xd.ndim != 3:
        raise ShapeMismatch(f"upsample input must be [C,H,W], got {xd.shape}")
    c, h, w = xd.shape
    out = _make(xd.repeat(2, axis=1).repeat(2, axis=2), (x,), "upsample_nearest2")
    if out.requires_grad:

        def _bw():
            _accum(x, out.grad.reshape(c, h, 2, w, 2).sum(axis=(2, 4)))

        out._backward = _bw
    return out
