"""Dynamic multi-scale kernel module.

Pipeline: pooled channel statistics pick one depthwise kernel from a small
bank and one from a large bank (hard argmax, lowest index on ties); the
input is projected to half the channels and run through the two selected
kernels in cascade; the concatenated pair is re-weighted by a spatial
attention map and a channel gate, and added back onto the input.

The hard pick is trained with a straight-through rule: the forward pass
applies only the winning branch, while the selector logits receive the
gradient of the soft mixture with the losing branches treated as detached
zeros.  Unselected bank entries therefore get exactly zero gradient.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Iterator

import numpy as np

from .autodiff import note_choice
from .errors import BadConfig, OddChannels, ShapeMismatch
from .ops import Conv2dParams, LinearParams, apply_linear, channel_pool, conv2d, gap, sigmoid, softmax
from .tensor import Tensor, concat, no_grad, split

SPATIAL_KERNEL = 7
DEFAULT_SMALL_BANK = ((3, 1), (5, 1))
DEFAULT_LARGE_BANK = ((7, 2), (9, 3))


def receptive_field(kernel: int, dilation: int) -> int:
    return (kernel - 1) * dilation + 1


@dataclass
class KernelBank:
    """Depthwise kernel candidates: (size, dilation) pairs plus their weights."""

    entries: list[tuple[int, int]]
    weights: list[Tensor]
    biases: list[Tensor]

    def __post_init__(self):
        if not self.entries:
            raise BadConfig("kernel bank must have at least one entry")
        for k, d in self.entries:
            if k % 2 == 0:
                raise BadConfig(f"bank kernel size {k} must be odd")
            if k < 1 or d < 1:
                raise BadConfig(f"bad bank entry ({k},{d})")

    def __len__(self) -> int:
        return len(self.entries)

    def conv(self, i: int) -> Conv2dParams:
        k, d = self.entries[i]
        channels = self.weights[i].data.shape[0]
        return Conv2dParams(self.weights[i], self.biases[i], dilation=d, groups=channels)


@dataclass
class DmskParams:
    select_small: LinearParams
    select_large: LinearParams
    project: Conv2dParams
    bank_small: KernelBank
    bank_large: KernelBank
    spatial_conv: Conv2dParams
    channel_gate: LinearParams  # acts on the pooled [C] vector, so a 1x1 conv reduces to this dense map
    channels: int = 0

    def named_parameters(self) -> Iterator[tuple[str, Tensor]]:
        yield "select_small.weight", self.select_small.weight
        yield "select_small.bias", self.select_small.bias
        yield "select_large.weight", self.select_large.weight
        yield "select_large.bias", self.select_large.bias
        yield "project.weight", self.project.weight
        yield "project.bias", self.project.bias
        for tag, bank in (("bank_small", self.bank_small), ("bank_large", self.bank_large)):
            for i in range(len(bank)):
                yield f"{tag}.{i}.weight", bank.weights[i]
                yield f"{tag}.{i}.bias", bank.biases[i]
        yield "spatial_conv.weight", self.spatial_conv.weight
        yield "spatial_conv.bias", self.spatial_conv.bias
        yield "channel_gate.weight", self.channel_gate.weight
        yield "channel_gate.bias", self.channel_gate.bias


def validate_bank_ordering(small: list[tuple[int, int]], large: list[tuple[int, int]]) -> None:
    """Every large entry must cover strictly more field than every small entry."""
    worst_small = max(receptive_field(k, d) for k, d in small)
    best_large = min(receptive_field(k, d) for k, d in large)
    if best_large <= worst_small:
        raise BadConfig(
            f"large-bank receptive field {best_large} must exceed small-bank {worst_small}"
        )


def init_dmsk(
    channels: int,
    bank_small,
    bank_large,
    rng,
    check_ordering: bool = True,
    scale: float = 1.0,
) -> DmskParams:
    """Build parameters for one module instance, drawing weights from ``rng``."""
    if channels % 2:
        raise OddChannels(f"channel count {channels} must be even")
    bank_small = [tuple(e) for e in bank_small]
    bank_large = [tuple(e) for e in bank_large]
    for entries in (bank_small, bank_large):
        if not entries:
            raise BadConfig("kernel bank must have at least one entry")
        for k, d in entries:
            if k < 1 or k % 2 == 0 or d < 1:
                raise BadConfig(f"bad bank entry ({k},{d}): kernels must be odd, dilation >= 1")
    if check_ordering:
        validate_bank_ordering(bank_small, bank_large)
    half = channels // 2

    def lin(n_out, n_in):
        w = rng.normal_array(n_out * n_in).reshape(n_out, n_in) * (scale / np.sqrt(n_in))
        return LinearParams(Tensor(w, requires_grad=True), Tensor(np.zeros(n_out), requires_grad=True))

    def conv(c_out, c_in_per_group, k, dilation=1, groups=1):
        fan_in = c_in_per_group * k * k
        w = rng.normal_array(c_out * c_in_per_group * k * k).reshape(c_out, c_in_per_group, k, k)
        w *= scale * np.sqrt(2.0 / fan_in)
        return Conv2dParams(
            Tensor(w, requires_grad=True),
            Tensor(np.zeros(c_out), requires_grad=True),
            dilation=dilation,
            groups=groups,
        )

    def bank(entries):
        ws, bs = [], []
        for k, d in entries:
            p = conv(half, 1, k, dilation=d, groups=half)
            ws.append(p.weight)
            bs.append(p.bias)
        return KernelBank(list(entries), ws, bs)

    return DmskParams(
        select_small=lin(len(bank_small), channels),
        select_large=lin(len(bank_large), channels),
        project=conv(half, channels, 1),
        bank_small=bank(bank_small),
        bank_large=bank(bank_large),
        spatial_conv=conv(2, 2, SPATIAL_KERNEL),
        channel_gate=lin(channels, channels),
        channels=channels,
    )


def select_kernels(x_gap: Tensor, p: DmskParams):
    """Softmax selection weights and hard argmax indices for both banks."""
    w_s = softmax(apply_linear(x_gap, p.select_small))
    w_b = softmax(apply_linear(x_gap, p.select_large))
    idx_s = int(np.argmax(w_s.data))  # first max -> lowest-index tie-break
    idx_b = int(np.argmax(w_b.data))
    note_choice(("dmsk_select", idx_s, idx_b))
    return idx_s, w_s, idx_b, w_b


def straight_through(branch: Tensor, gate: Tensor) -> Tensor:
    """Identity in value; routes the soft-mixture gradient into ``gate``.

    gate is the selected softmax weight (rank-0).  Forward returns branch
    exactly; backward gives gate the inner product of the output adjoint
    with the detached branch values.
    """
    return branch + (gate - gate.detach()) * branch.detach()


def dmsk_forward(x: Tensor, p: DmskParams, mode: str = "train") -> Tensor:
    """Run the module on [C,H,W]; output shape equals input shape.

    With all parameters zero the output equals the input exactly: every
    conv path produces zeros, so the residual passes the input through.
    Forward values are identical in both modes; "infer" skips graph capture.
    """
    if x.data.ndim != 3:
        raise ShapeMismatch(f"expected [C,H,W] input, got {x.data.shape}")
    if x.data.shape[0] % 2:
        raise OddChannels(f"channel count {x.data.shape[0]} must be even")
    if mode == "infer":
        with no_grad():
            return _dmsk_pipeline(x, p)
    return _dmsk_pipeline(x, p)


def _dmsk_pipeline(x: Tensor, p: DmskParams) -> Tensor:
    c = x.data.shape[0]
    x_gap = gap(x)
    idx_s, w_s, idx_b, w_b = select_kernels(x_gap, p)

    xl = conv2d(x, p.project)
    x1 = straight_through(conv2d(xl, p.bank_small.conv(idx_s)), w_s[idx_s])
    x2 = straight_through(conv2d(x1, p.bank_large.conv(idx_b)), w_b[idx_b])

    x_sp = concat([x1, x2], axis=0)
    pooled = concat([channel_pool(x_sp, "avg"), channel_pool(x_sp, "max")], axis=0)
    att = sigmoid(conv2d(pooled, p.spatial_conv))
    w1, w2 = split(att, 0, [1, 1])
    x_ch = w1 * x_sp + w2 * x_sp

    w_ch = sigmoid(apply_linear(gap(x_ch), p.channel_gate))
    return w_ch.reshape(c, 1, 1) * x_ch + x
