from pathlib import Path

import numpy as np
import pytest

from dscnet.dataio import Prng
from dscnet.dmsk import dmsk_forward, init_dmsk
from dscnet.errors import BadConfig, BadInputSize
from dscnet.tensor import Tensor
from dscnet.tensorfile import read_tensor
from dscnet.ttt import init_ttt, ttt_module_forward
from dscnet.unet import (
    DscBlockParams,
    build_unet,
    dsc_block,
    dsc_levels,
    expected_param_count,
    unet_forward,
)
from dscnet.verify import gradcheck_unet

DATA = Path(__file__).parent / "data"

_BANKS = dict(bank_small=[(3, 1), (5, 1)], bank_large=[(7, 2), (9, 3)])


def _build(levels=2, channels=(4, 8), skip_mode="dsc", placement="all", classes=2, seed=50, **kw):
    args = dict(_BANKS)
    args.update(kw)
    return build_unet(
        levels=levels,
        channels=list(channels),
        in_channels=1,
        num_classes=classes,
        skip_mode=skip_mode,
        dsc_placement=placement,
        eta=0.1,
        rng=Prng(seed),
        **args,
    )


def _input(h, w, seed=51):
    return Tensor(Prng(seed).normal_array(h * w).reshape(1, h, w))


# -- dsc block -------------------------------------------------------------------


def test_dsc_block_is_composition_of_public_modules():
    rng = Prng(52)
    blk = DscBlockParams(
        dmsk=init_dmsk(4, [(3, 1)], [(5, 2)], rng),
        ttt=init_ttt(4, rng, eta=0.1),
    )
    x = Tensor(Prng(53).normal_array(4 * 8 * 8).reshape(4, 8, 8))
    got = dsc_block(x, blk, "train")
    want = ttt_module_forward(dmsk_forward(x, blk.dmsk, "train"), blk.ttt, "train")
    assert np.array_equal(got.data, want.data)  # definitional composition, bitwise
    assert got.data.shape == (4, 8, 8)


def test_dsc_block_zero_params_give_zeros():
    rng = Prng(54)
    blk = DscBlockParams(
        dmsk=init_dmsk(8, [(3, 1)], [(5, 2)], rng),
        ttt=init_ttt(8, rng),
    )
    for _, t in blk.named_parameters():
        t.data[...] = 0.0
    x = Tensor(Prng(55).normal_array(8 * 8 * 8).reshape(8, 8, 8))
    out = dsc_block(x, blk, "train")
    assert np.array_equal(out.data, np.zeros((8, 8, 8)))


# -- network forward -----------------------------------------------------------------


def test_logits_shape_contract():
    p = _build(classes=3)
    out = unet_forward(_input(16, 16), p, "train")
    assert out.data.shape == (3, 16, 16)
    p4 = _build(levels=3, channels=(4, 8, 16), classes=2)
    out = unet_forward(_input(32, 16, seed=56), p4, "train")
    assert out.data.shape == (2, 32, 16)


def test_bad_input_size():
    p = _build()
    with pytest.raises(BadInputSize):
        unet_forward(Tensor(np.zeros((1, 15, 16))), p, "train")
    with pytest.raises(BadInputSize):
        unet_forward(Tensor(np.zeros((2, 16, 16))), p, "train")


def test_mode_flag_never_changes_forward_values():
    p = _build(seed=57)
    x = _input(16, 16, seed=58)
    train_out = unet_forward(x, p, "train")
    infer_out = unet_forward(x, p, "infer")
    assert np.array_equal(train_out.data, infer_out.data)
    assert infer_out.requires_grad is False


def test_plain_and_zeroed_dsc_configurations_differ():
    # A zero-parameter block feeds zeros to the decoder while a plain skip
    # passes the encoder features; the two nets must disagree.
    plain = _build(skip_mode="plain", seed=59)
    dsc = _build(skip_mode="dsc", seed=59)
    for name, t in dsc.named_parameters().items():
        if name.startswith("skip"):
            t.data[...] = 0.0
        else:
            t.data = plain.named_parameters()[name].data.copy()
    x = _input(16, 16, seed=60)
    a = unet_forward(x, plain, "infer").data
    b = unet_forward(x, dsc, "infer").data
    assert np.abs(a - b).max() > 1e-6


def test_golden_logits_regression():
    p = _build(seed=61)
    x = _input(16, 16, seed=62)
    logits = unet_forward(x, p, "infer")
    golden = read_tensor(DATA / "golden_unet_logits.dsct")
    assert logits.data.shape == golden.data.shape
    assert np.abs(logits.data - golden.data).max() < 1e-12


def test_determinism_bitwise():
    p = _build(seed=63)
    x = _input(16, 16, seed=64)
    assert np.array_equal(unet_forward(x, p, "train").data, unet_forward(x, p, "train").data)


# -- registry and counting --------------------------------------------------------------


@pytest.mark.parametrize(
    "levels,channels,skip_mode,placement,classes",
    [
        (2, (4, 8), "dsc", "all", 2),
        (3, (4, 8, 16), "dsc", "deepest", 3),
        (3, (2, 6, 12), "dmsk", "all", 2),
        (2, (4, 8), "ttt", "all", 4),
        (2, (4, 8), "plain", "all", 2),
    ],
)
def test_param_count_matches_closed_form(levels, channels, skip_mode, placement, classes):
    p = _build(levels=levels, channels=channels, skip_mode=skip_mode, placement=placement, classes=classes)
    want = expected_param_count(
        levels, list(channels), 1, classes, skip_mode, placement,
        _BANKS["bank_small"], _BANKS["bank_large"],
    )
    assert p.param_count() == want


def test_registry_names_are_unique_and_stable():
    p = _build(levels=3, channels=(4, 8, 16), placement="all")
    names = list(p.named_parameters())
    assert len(names) == len(set(names))
    assert "enc1.conv1.weight" in names
    assert "skip1.dmsk.project.weight" in names
    assert "skip2.ttt.w0" in names
    assert "head.bias" in names


def test_dsc_levels_placement():
    assert dsc_levels(4, "all") == [1, 2, 3]
    assert dsc_levels(4, "deepest") == [3]
    assert dsc_levels(2, "deepest") == [1]
    with pytest.raises(BadConfig):
        dsc_levels(3, "bottleneck")


def test_config_validation():
    with pytest.raises(BadConfig):
        _build(channels=(8, 4))  # not increasing
    with pytest.raises(BadConfig):
        _build(skip_mode="wild")
    with pytest.raises(BadConfig):
        _build(classes=1)


def test_two_level_dsc_network_passes_grad_check():
    report = next(iter(gradcheck_unet().values()))
    assert report.passed, f"max rel err {report.max_rel_err}"
