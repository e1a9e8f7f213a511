"""Reference 2D encoder-decoder with dynamic skip connections.

Encoder levels are two conv3x3 + instance norm + leaky ReLU stages with 2x
max pooling between levels; the decoder mirrors them with 2x nearest
upsampling and channel concatenation.  Each skip pathway is either passed
through unchanged or routed through the multi-scale kernel module, the
test-time-training module, or both in sequence (the full dynamic block).
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterator

import numpy as np

from .dmsk import DmskParams, dmsk_forward, init_dmsk
from .errors import BadConfig, BadInputSize
from .ops import Conv2dParams, NormParams, conv2d, instance_norm, leaky_relu, maxpool2, upsample_nearest2
from .tensor import Tensor, concat, no_grad
from .ttt import TttParams, init_ttt, ttt_module_forward

SKIP_MODES = ("plain", "dmsk", "ttt", "dsc")
PLACEMENTS = ("all", "deepest")


@dataclass
class DscBlockParams:
    """Multi-scale kernel module followed by the test-time-training module."""

    dmsk: DmskParams
    ttt: TttParams

    def named_parameters(self) -> Iterator[tuple[str, Tensor]]:
        for name, t in self.dmsk.named_parameters():
            yield f"dmsk.{name}", t
        for name, t in self.ttt.named_parameters():
            yield f"ttt.{name}", t


def dsc_block(x: Tensor, p: DscBlockParams, mode: str = "train") -> Tensor:
    return ttt_module_forward(dmsk_forward(x, p.dmsk, mode), p.ttt, mode)


@dataclass
class ConvStage:
    conv: Conv2dParams
    norm: NormParams


@dataclass
class LevelBlock:
    """Two conv+norm+activation stages."""

    stage1: ConvStage
    stage2: ConvStage


@dataclass
class SkipPath:
    mode: str  # one of SKIP_MODES
    dmsk: DmskParams | None = None
    ttt: TttParams | None = None


@dataclass
class UNetParams:
    levels: int
    channels: list[int]
    in_channels: int
    num_classes: int
    enc: list[LevelBlock] = field(default_factory=list)
    dec: list[LevelBlock] = field(default_factory=list)
    skips: list[SkipPath] = field(default_factory=list)
    head: Conv2dParams | None = None

    def named_parameters(self) -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}

        def block(prefix: str, blk: LevelBlock):
            for i, st in enumerate((blk.stage1, blk.stage2), start=1):
                out[f"{prefix}.conv{i}.weight"] = st.conv.weight
                out[f"{prefix}.norm{i}.gamma"] = st.norm.gamma
                out[f"{prefix}.norm{i}.beta"] = st.norm.beta

        for l, blk in enumerate(self.enc, start=1):
            block(f"enc{l}", blk)
        for l, sk in enumerate(self.skips, start=1):
            if sk.dmsk is not None:
                for name, t in sk.dmsk.named_parameters():
                    out[f"skip{l}.dmsk.{name}"] = t
            if sk.ttt is not None:
                for name, t in sk.ttt.named_parameters():
                    out[f"skip{l}.ttt.{name}"] = t
        for l, blk in enumerate(self.dec, start=1):
            block(f"dec{l}", blk)
        out["head.weight"] = self.head.weight
        out["head.bias"] = self.head.bias
        return out

    def param_count(self) -> int:
        return sum(t.data.size for t in self.named_parameters().values())


def _conv_stage(rng, c_in: int, c_out: int, k: int = 3) -> ConvStage:
    # No conv bias: the instance norm right after would absorb it.
    fan_in = c_in * k * k
    w = rng.normal_array(c_out * fan_in).reshape(c_out, c_in, k, k) * np.sqrt(2.0 / fan_in)
    conv = Conv2dParams(Tensor(w, requires_grad=True), None)
    norm = NormParams(Tensor(np.ones(c_out), requires_grad=True), Tensor(np.zeros(c_out), requires_grad=True))
    return ConvStage(conv, norm)


def dsc_levels(levels: int, placement: str) -> list[int]:
    """1-based skip levels that carry the configured block."""
    if placement not in PLACEMENTS:
        raise BadConfig(f"unknown dsc placement {placement!r}")
    if levels < 2:
        return []
    if placement == "deepest":
        return [levels - 1]
    return list(range(1, levels))


def build_unet(
    levels: int,
    channels: list[int],
    in_channels: int,
    num_classes: int,
    skip_mode: str,
    dsc_placement: str,
    bank_small,
    bank_large,
    eta: float,
    rng,
    check_bank_ordering: bool = True,
) -> UNetParams:
    """Construct all parameters, drawing weights deterministically from ``rng``."""
    if levels < 1 or len(channels) != levels:
        raise BadConfig(f"need one channel width per level, got {channels} for {levels} levels")
    if any(b <= a for a, b in zip(channels, channels[1:])):
        raise BadConfig(f"channel widths must be strictly increasing, got {channels}")
    if skip_mode not in SKIP_MODES:
        raise BadConfig(f"unknown skip mode {skip_mode!r}")
    if num_classes < 2:
        raise BadConfig(f"need at least 2 classes, got {num_classes}")

    p = UNetParams(levels=levels, channels=list(channels), in_channels=in_channels, num_classes=num_classes)
    prev = in_channels
    for c in channels:
        p.enc.append(LevelBlock(_conv_stage(rng, prev, c), _conv_stage(rng, c, c)))
        prev = c

    active = set(dsc_levels(levels, dsc_placement)) if skip_mode != "plain" else set()
    for l in range(1, levels):
        c = channels[l - 1]
        if l in active:
            dmsk = (
                init_dmsk(c, bank_small, bank_large, rng, check_ordering=check_bank_ordering)
                if skip_mode in ("dmsk", "dsc")
                else None
            )
            ttt = init_ttt(c, rng, eta=eta) if skip_mode in ("ttt", "dsc") else None
            p.skips.append(SkipPath(skip_mode, dmsk, ttt))
        else:
            p.skips.append(SkipPath("plain"))

    for l in range(1, levels):
        c, c_below = channels[l - 1], channels[l]
        p.dec.append(LevelBlock(_conv_stage(rng, c + c_below, c), _conv_stage(rng, c, c)))

    hw = rng.normal_array(num_classes * channels[0]).reshape(num_classes, channels[0], 1, 1)
    hw *= np.sqrt(2.0 / channels[0])
    p.head = Conv2dParams(Tensor(hw, requires_grad=True), Tensor(np.zeros(num_classes), requires_grad=True))
    return p


def _level_block(x: Tensor, blk: LevelBlock) -> Tensor:
    for st in (blk.stage1, blk.stage2):
        x = leaky_relu(instance_norm(conv2d(x, st.conv), st.norm))
    return x


def skip_forward(x: Tensor, sk: SkipPath, mode: str) -> Tensor:
    if sk.mode == "plain":
        return x
    if sk.mode == "dmsk":
        return dmsk_forward(x, sk.dmsk, mode)
    if sk.mode == "ttt":
        return ttt_module_forward(x, sk.ttt, mode)
    return ttt_module_forward(dmsk_forward(x, sk.dmsk, mode), sk.ttt, mode)


def unet_forward(x: Tensor, p: UNetParams, mode: str = "train") -> Tensor:
    """Per-pixel class logits [K,H,W] at the input resolution.

    Forward values are identical in both modes; "infer" skips graph capture.
    """
    if mode == "infer":
        with no_grad():
            return _unet_pipeline(x, p, mode)
    return _unet_pipeline(x, p, mode)


def _unet_pipeline(x: Tensor, p: UNetParams, mode: str) -> Tensor:
    if x.data.ndim != 3 or x.data.shape[0] != p.in_channels:
        raise BadInputSize(f"expected [{p.in_channels},H,W] input, got {x.data.shape}")
    h, w = x.data.shape[1:]
    step = 1 << (p.levels - 1)
    if h % step or w % step or h < step or w < step:
        raise BadInputSize(f"{h}x{w} input not divisible by 2^{p.levels - 1}")

    feats = []
    cur = x
    for l in range(p.levels):
        if l > 0:
            cur = maxpool2(cur)
        cur = _level_block(cur, p.enc[l])
        feats.append(cur)

    cur = feats[-1]
    for l in range(p.levels - 1, 0, -1):
        skip = skip_forward(feats[l - 1], p.skips[l - 1], mode)
        cur = concat([skip, upsample_nearest2(cur)], axis=0)
        cur = _level_block(cur, p.dec[l - 1])
    return conv2d(cur, p.head)


# -- closed-form parameter count ------------------------------------------------


def _conv_count(c_in: int, c_out: int, k: int, groups: int = 1, bias: bool = True) -> int:
    return c_out * (c_in // groups) * k * k + (c_out if bias else 0)


def _norm_count(c: int) -> int:
    return 2 * c


def _stage_count(c_in: int, c_out: int) -> int:
    return _conv_count(c_in, c_out, 3, bias=False) + _norm_count(c_out)


def _dmsk_count(c: int, bank_small, bank_large) -> int:
    half = c // 2
    n = len(bank_small) * c + len(bank_small)          # small selector
    n += len(bank_large) * c + len(bank_large)          # large selector
    n += _conv_count(c, half, 1)                        # projection
    for k, _ in list(bank_small) + list(bank_large):
        n += _conv_count(half, half, k, groups=half)    # depthwise entries
    n += _conv_count(2, 2, 7)                           # spatial attention
    n += c * c + c                                      # channel gate
    return n


def _ttt_count(c: int) -> int:
    n = 2 * (_conv_count(c, c, 3, bias=False) + _norm_count(c))  # residual blocks
    n += _norm_count(c)                                 # layer norm
    n += 3 * c * c                                      # unbiased view projections
    n += c * c + c                                      # gate branch
    n += c * c                                          # initial inner weights
    n += c * c + c                                      # output projection
    return n


def expected_param_count(
    levels: int,
    channels: list[int],
    in_channels: int,
    num_classes: int,
    skip_mode: str,
    dsc_placement: str,
    bank_small,
    bank_large,
) -> int:
    """Parameter total computed from configuration arithmetic alone; must
    agree with the registry (guards silent shape drift)."""
    total = 0
    prev = in_channels
    for c in channels:
        total += _stage_count(prev, c) + _stage_count(c, c)
        prev = c
    active = set(dsc_levels(levels, dsc_placement)) if skip_mode != "plain" else set()
    for l in range(1, levels):
        if l in active:
            c = channels[l - 1]
            if skip_mode in ("dmsk", "dsc"):
                total += _dmsk_count(c, bank_small, bank_large)
            if skip_mode in ("ttt", "dsc"):
                total += _ttt_count(c)
    for l in range(1, levels):
        c, c_below = channels[l - 1], channels[l]
        total += _stage_count(c + c_below, c) + _stage_count(c, c)
    total += _conv_count(channels[0], num_classes, 1)
    return total
