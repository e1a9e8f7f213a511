"""Test-time-training module.

The layer keeps a weight matrix as its hidden state.  For every token, in
raster order, it takes one exact gradient step on the quadratic
reconstruction loss ||W k - v||^2 (closed form: W <- W - eta * 2 (W k - v) k^T)
and reads the token out with the freshly updated weights, z = W q.  The same
loop runs during training and inference; outer training differentiates
through the whole unrolled sequence.

``ttt_step`` is the single-token update built from ordinary graph ops.
``ttt_scan`` is the production path: one graph node covering the full loop
with a hand-derived reverse pass (checked against finite differences and
against the unrolled ``ttt_step`` chain in the test suite).
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Iterator

import numpy as np

from .errors import ShapeMismatch
from .ops import (
    Conv2dParams,
    LinearParams,
    NormParams,
    apply_linear,
    conv2d,
    instance_norm,
    layer_norm,
    leaky_relu,
    linear,
    silu,
)
from .tensor import Tensor, _accum, _make, matmul, no_grad

DEFAULT_ETA = 0.1


@dataclass
class ResBlockParams:
    conv: Conv2dParams
    norm: NormParams


@dataclass
class TttParams:
    res1: ResBlockParams
    res2: ResBlockParams
    ln: NormParams
    theta_k: Tensor  # pure projection matrices, no bias
    theta_v: Tensor
    theta_q: Tensor
    gate: LinearParams
    w0: Tensor
    out_proj: LinearParams
    eta: float = DEFAULT_ETA

    def __post_init__(self):
        # eta = 0 is allowed here so the frozen-loop degeneracy can be probed
        # directly; run configs require a strictly positive value.
        if self.eta < 0 or not np.isfinite(self.eta):
            raise ShapeMismatch(f"inner learning rate must be non-negative and finite, got {self.eta}")
        c = self.theta_k.data.shape
        if len(c) != 2 or c[0] != c[1]:
            raise ShapeMismatch(f"inner projections must be square, got {c}")

    def named_parameters(self) -> Iterator[tuple[str, Tensor]]:
        for tag, blk in (("res1", self.res1), ("res2", self.res2)):
            yield f"{tag}.conv.weight", blk.conv.weight
            yield f"{tag}.norm.gamma", blk.norm.gamma
            yield f"{tag}.norm.beta", blk.norm.beta
        yield "ln.gamma", self.ln.gamma
        yield "ln.beta", self.ln.beta
        yield "theta_k", self.theta_k
        yield "theta_v", self.theta_v
        yield "theta_q", self.theta_q
        yield "gate.weight", self.gate.weight
        yield "gate.bias", self.gate.bias
        yield "w0", self.w0
        yield "out_proj.weight", self.out_proj.weight
        yield "out_proj.bias", self.out_proj.bias


@dataclass
class TttTrace:
    """Per-token views and pre-update losses, plus the final inner weights."""

    keys: np.ndarray      # [T, C]
    values: np.ndarray    # [T, C]
    queries: np.ndarray   # [T, C]
    losses: np.ndarray    # [T], loss of W_{t-1} on token t
    w_final: np.ndarray   # [C, C]

    @property
    def tokens(self) -> int:
        return self.losses.shape[0]


def init_ttt(channels: int, rng, eta: float = DEFAULT_ETA, scale: float = 1.0) -> TttParams:
    """Build parameters for one module instance, drawing weights from ``rng``.

    The inner projections are scaled so a typical token's squared key norm
    stays near one, which keeps the default inner step below the descent
    bound eta < 1/||k||^2 regardless of width.
    """
    c = channels

    def conv3(c_io):
        # No bias: the instance norm right after would absorb it.
        w = rng.normal_array(c_io * c_io * 9).reshape(c_io, c_io, 3, 3) * (scale * np.sqrt(2.0 / (c_io * 9)))
        return Conv2dParams(Tensor(w, requires_grad=True), None)

    def norm(n):
        return NormParams(Tensor(np.ones(n), requires_grad=True), Tensor(np.zeros(n), requires_grad=True))

    def lin(n_out, n_in):
        w = rng.normal_array(n_out * n_in).reshape(n_out, n_in) * (scale / np.sqrt(n_in))
        return LinearParams(Tensor(w, requires_grad=True), Tensor(np.zeros(n_out), requires_grad=True))

    def proj():
        return Tensor(rng.normal_array(c * c).reshape(c, c) * (scale / c), requires_grad=True)

    return TttParams(
        res1=ResBlockParams(conv3(c), norm(c)),
        res2=ResBlockParams(conv3(c), norm(c)),
        ln=norm(c),
        theta_k=proj(),
        theta_v=proj(),
        theta_q=proj(),
        gate=lin(c, c),
        w0=Tensor(np.zeros((c, c)), requires_grad=True),
        out_proj=lin(c, c),
        eta=eta,
    )


def ttt_step(w_prev: Tensor, k: Tensor, v: Tensor, eta: float) -> tuple[Tensor, Tensor]:
    """One inner update: returns (W_next, pre-update loss ||W_prev k - v||^2).

    The quadratic loss has the closed-form gradient 2 (W k - v) k^T, so the
    update is an exact rank-1 step; k = 0 leaves the weights unchanged.
    """
    r = matmul(w_prev, k) - v
    loss_before = (r * r).sum()
    c_out, c_in = w_prev.data.shape
    update = r.reshape(c_out, 1) * k.reshape(1, c_in)
    w_next = w_prev - (2.0 * eta) * update
    return w_next, loss_before


def ttt_scan(w0: Tensor, keys: Tensor, values: Tensor, queries: Tensor, eta: float):
    """Run the full token loop as a single graph node.

    Returns (z [T,C], losses [T] ndarray, w_final [C,C] ndarray).  The loss
    and final-weight outputs are detached diagnostics; gradients flow into
    w0 and all three view streams through the hand-derived reverse pass.
    """
    kd, vd, qd = keys.data, values.data, queries.data
    if kd.ndim != 2 or kd.shape != vd.shape or kd.shape != qd.shape:
        raise ShapeMismatch(f"view streams must share [T,C]: {kd.shape} {vd.shape} {qd.shape}")
    t_count, c = kd.shape
    if w0.data.shape != (c, c):
        raise ShapeMismatch(f"inner weights {w0.data.shape} incompatible with width {c}")
    if t_count < 1:
        raise ShapeMismatch("token count must be >= 1")

    walls = np.empty((t_count + 1, c, c), dtype=np.float64)
    walls[0] = w0.data
    resid = np.empty((t_count, c), dtype=np.float64)
    z = np.empty((t_count, c), dtype=np.float64)
    losses = np.empty(t_count, dtype=np.float64)
    two_eta = 2.0 * eta
    for t in range(t_count):
        r = walls[t] @ kd[t]
        r -= vd[t]
        resid[t] = r
        losses[t] = r @ r
        # W_{t+1} = W_t - 2 eta * outer(r, k), written in place
        np.multiply((two_eta * r)[:, None], kd[t][None, :], out=walls[t + 1])
        np.subtract(walls[t], walls[t + 1], out=walls[t + 1])
        z[t] = walls[t + 1] @ qd[t]

    out = _make(z, (w0, keys, values, queries), "ttt_scan")
    if out.requires_grad:

        def _bw():
            gz = out.grad
            g_w = np.zeros((c, c), dtype=np.float64)
            g_k = np.zeros_like(kd)
            g_v = np.zeros_like(vd)
            g_q = np.zeros_like(qd)
            obuf = np.empty((c, c), dtype=np.float64)
            for t in range(t_count - 1, -1, -1):
                np.multiply(gz[t][:, None], qd[t][None, :], out=obuf)
                g_w += obuf
                g_q[t] = walls[t + 1].T @ gz[t]
                g_r = g_w @ kd[t]
                g_r *= -two_eta
                g_k[t] = walls[t].T @ g_r
                g_k[t] -= two_eta * (g_w.T @ resid[t])
                g_v[t] = -g_r
                np.multiply(g_r[:, None], kd[t][None, :], out=obuf)
                g_w += obuf
            if w0.requires_grad:
                _accum(w0, g_w)
            if keys.requires_grad:
                _accum(keys, g_k)
            if values.requires_grad:
                _accum(values, g_v)
            if queries.requires_grad:
                _accum(queries, g_q)

        out._backward = _bw
    return out, losses, walls[t_count].copy()


def ttt_layer(tokens: Tensor, p: TttParams) -> tuple[Tensor, TttTrace]:
    """Project tokens to the three views, run the inner loop, read out z."""
    keys = matmul(tokens, p.theta_k.transpose())
    values = matmul(tokens, p.theta_v.transpose())
    queries = matmul(tokens, p.theta_q.transpose())
    z, losses, w_final = ttt_scan(p.w0, keys, values, queries, p.eta)
    trace = TttTrace(
        keys=keys.data.copy(),
        values=values.data.copy(),
        queries=queries.data.copy(),
        losses=losses,
        w_final=w_final,
    )
    return z, trace


def res_block(x: Tensor, p: ResBlockParams) -> Tensor:
    return x + leaky_relu(instance_norm(conv2d(x, p.conv), p.norm))


def ttt_module_forward(x: Tensor, p: TttParams, mode: str = "train") -> Tensor:
    """Full module on [C,H,W]: residual blocks, per-pixel layer norm, token
    loop, SiLU gate (Hadamard), output projection, reshape back."""
    if mode == "infer":
        with no_grad():
            return _ttt_pipeline(x, p)
    return _ttt_pipeline(x, p)


def _ttt_pipeline(x: Tensor, p: TttParams) -> Tensor:
    if x.data.ndim != 3:
        raise ShapeMismatch(f"expected [C,H,W] input, got {x.data.shape}")
    c, h, w = x.data.shape
    hid = res_block(res_block(x, p.res1), p.res2)
    tokens = hid.reshape(c, h * w).transpose()  # [T, C], raster order
    tokens = layer_norm(tokens, p.ln)
    gate_vals = silu(apply_linear(tokens, p.gate))
    z, _ = ttt_layer(tokens, p)
    out_tokens = linear(z * gate_vals, p.out_proj.weight, p.out_proj.bias)
    return out_tokens.transpose().reshape(c, h, w)
