import math

import numpy as np
import pytest

from dscnet.autodiff import grad_check
from dscnet.config import parse_config
from dscnet.dataio import Prng, synth_dataset
from dscnet.errors import BadMask, ShapeMismatch
from dscnet.tensor import Tensor
from dscnet.traineval import (
    DICE_SMOOTH,
    MetricsReport,
    boundary_pixels,
    dice_metric,
    evaluate_params,
    iou_metric,
    miou,
    nsd_metric,
    seg_loss,
    sgd_step,
    train,
)

from oracles import nsd_naive


def _mask(arr):
    return Tensor(np.asarray(arr, dtype=np.float64))


# -- seg_loss -------------------------------------------------------------------


def test_loss_vanishes_for_confident_correct_logits():
    rng = Prng(70)
    ids = (rng.uniform_array(16).reshape(4, 4) > 0.5).astype(np.int64)
    logits = np.zeros((2, 4, 4))
    np.put_along_axis(logits, ids[None], 50.0, axis=0)
    loss = seg_loss(Tensor(logits), _mask(ids))
    assert loss.item() < 1e-4  # margin -> inf pushes both terms to 0


def test_uniform_logits_balanced_mask_ce_is_ln2():
    logits = Tensor(np.zeros((2, 4, 4)))
    ids = np.zeros((4, 4), dtype=np.int64)
    ids[:2] = 1  # balanced
    ce_only = seg_loss(logits, _mask(ids), lambda_ce=1.0, lambda_dice=0.0)
    assert abs(ce_only.item() - math.log(2.0)) < 1e-12


def test_loss_vs_transcribed_formula_oracle():
    rng = Prng(71)
    k, h, w = 3, 4, 5
    logits = rng.normal_array(k * h * w).reshape(k, h, w)
    ids = np.array([[rng.below(k) for _ in range(w)] for _ in range(h)])
    got = seg_loss(Tensor(logits), _mask(ids), lambda_ce=0.7, lambda_dice=1.3).item()

    # Plain-numpy transcription of the loss definition.
    ex = np.exp(logits - logits.max(axis=0, keepdims=True))
    probs = ex / ex.sum(axis=0, keepdims=True)
    onehot = np.eye(k)[ids].transpose(2, 0, 1)
    ce = -(np.log(probs) * onehot).sum() / (h * w)
    inter = (probs * onehot).sum(axis=(1, 2))
    dice = (2 * inter + DICE_SMOOTH) / (probs.sum(axis=(1, 2)) + onehot.sum(axis=(1, 2)) + DICE_SMOOTH)
    want = 0.7 * ce + 1.3 * (1.0 - dice.mean())
    assert abs(got - want) < 1e-10


def test_loss_validation():
    with pytest.raises(BadMask):
        seg_loss(Tensor(np.zeros((2, 2, 2))), _mask([[0, 2], [0, 1]]))
    with pytest.raises(BadMask):
        seg_loss(Tensor(np.zeros((2, 2, 2))), _mask([[0.5, 0], [0, 1]]))
    with pytest.raises(ShapeMismatch):
        seg_loss(Tensor(np.zeros((2, 2, 2))), _mask(np.zeros((3, 3))))


def test_loss_gradient_passes_grad_check():
    rng = Prng(72)
    logits = Tensor(rng.normal_array(3 * 4 * 4).reshape(3, 4, 4), requires_grad=True)
    ids = np.array([[rng.below(3) for _ in range(4)] for _ in range(4)])
    mask = _mask(ids)
    report = grad_check(lambda: seg_loss(logits, mask), {"logits": logits})
    assert report.passed, report.max_rel_err


# -- hard metrics -----------------------------------------------------------------


def test_identical_masks_score_one():
    m = np.array([[0, 1], [1, 0]])
    assert dice_metric(m, m, 1) == 1.0
    assert iou_metric(m, m, 1) == 1.0
    assert nsd_metric(m, m, 1) == 1.0


def test_formula_case_half_overlap():
    pred = np.array([[1, 1, 0, 0]])
    gt = np.array([[0, 1, 1, 0]])
    assert dice_metric(pred, gt, 1) == 0.5  # |P|=2, |G|=2, overlap 1
    assert abs(iou_metric(pred, gt, 1) - 1 / 3) < 1e-15


def test_empty_empty_conventions():
    zeros = np.zeros((3, 3), dtype=np.int64)
    assert dice_metric(zeros, zeros, 1) == 1.0
    assert iou_metric(zeros, zeros, 1) == 1.0
    assert nsd_metric(zeros, zeros, 1) == 1.0
    ones = np.ones((3, 3), dtype=np.int64)
    assert dice_metric(ones, zeros, 1) == 0.0
    assert nsd_metric(ones, zeros, 1) == 0.0  # one side empty scores zero


def test_metrics_are_symmetric():
    rng = Prng(73)
    a = (rng.uniform_array(64).reshape(8, 8) > 0.6).astype(np.int64)
    b = (rng.uniform_array(64).reshape(8, 8) > 0.6).astype(np.int64)
    assert dice_metric(a, b, 1) == dice_metric(b, a, 1)
    assert iou_metric(a, b, 1) == iou_metric(b, a, 1)
    assert nsd_metric(a, b, 1) == nsd_metric(b, a, 1)


def test_metric_ranges():
    rng = Prng(74)
    for _ in range(20):
        a = (rng.uniform_array(36).reshape(6, 6) > rng.uniform()).astype(np.int64)
        b = (rng.uniform_array(36).reshape(6, 6) > rng.uniform()).astype(np.int64)
        for fn in (dice_metric, iou_metric, nsd_metric):
            v = fn(a, b, 1)
            assert 0.0 <= v <= 1.0
        assert 0.0 <= miou(a, b, 2) <= 1.0


def test_boundary_extraction():
    region = np.zeros((5, 5), dtype=bool)
    region[1:4, 1:4] = True
    b = boundary_pixels(region)
    assert b.sum() == 8  # ring of the 3x3 block
    assert not b[2, 2]
    full = np.ones((3, 3), dtype=bool)
    assert boundary_pixels(full).sum() == 8  # image border counts as outside


def test_nsd_shifted_square_vs_brute_force_oracle():
    gt = np.zeros((8, 8), dtype=np.int64)
    gt[2:6, 2:6] = 1
    for shift in (1, 2, 3):
        pred = np.zeros((8, 8), dtype=np.int64)
        pred[2:6, 2 + shift:min(8, 6 + shift)] = 1
        for tau in (1, 2, 3):
            assert nsd_metric(pred, gt, 1, tau) == nsd_naive(pred, gt, 1, tau)


def test_nsd_random_masks_vs_brute_force_oracle():
    rng = Prng(75)
    for _ in range(10):
        a = (rng.uniform_array(64).reshape(8, 8) > 0.55).astype(np.int64)
        b = (rng.uniform_array(64).reshape(8, 8) > 0.55).astype(np.int64)
        assert nsd_metric(a, b, 1, 2) == nsd_naive(a, b, 1, 2)


# -- optimizer -----------------------------------------------------------------------


def test_sgd_no_momentum_is_plain_step():
    p = {"w": Tensor(np.array([1.0, 2.0]))}
    vel = {}
    sgd_step(p, {"w": np.array([0.5, -1.0])}, lr=0.1, momentum=0.0, velocity=vel)
    assert np.allclose(p["w"].data, [0.95, 2.1], atol=1e-15)


def test_sgd_zero_grads_decay_velocity():
    p = {"w": Tensor(np.array([0.0]))}
    vel = {"w": np.array([1.0])}
    for _ in range(3):
        sgd_step(p, {"w": np.array([0.0])}, lr=1.0, momentum=0.5, velocity=vel)
    # velocity halves each step: positions move by 0.5, 0.25, 0.125
    assert abs(vel["w"][0] - 0.125) < 1e-15
    assert abs(p["w"].data[0] + 0.875) < 1e-15


def test_sgd_two_hand_steps():
    p = {"w": Tensor(np.array([1.0]))}
    vel = {}
    sgd_step(p, {"w": np.array([2.0])}, lr=0.1, momentum=0.9, velocity=vel)
    # v=2, w = 1 - 0.2 = 0.8
    sgd_step(p, {"w": np.array([1.0])}, lr=0.1, momentum=0.9, velocity=vel)
    # v = 1.8 + 1 = 2.8, w = 0.8 - 0.28 = 0.52
    assert abs(p["w"].data[0] - 0.52) < 1e-15


# -- loops ----------------------------------------------------------------------------


def _tiny_config(steps=3, lr=0.05, skip_mode="dsc", seed=5, batch_size=2):
    return parse_config(
        {
            "data": {"seed": 3, "n": 4, "H": 16, "W": 16, "K": 2, "scale_mix": 0.5},
            "model": {
                "levels": 2,
                "channels": [4, 8],
                "skip_mode": skip_mode,
                "dsc_placement": "all",
                "banks": {"small": [[3, 1]], "large": [[5, 2]]},
                "eta": 0.1,
            },
            "train": {
                "lr": lr,
                "momentum": 0.9,
                "steps": steps,
                "batch_size": batch_size,
                "seed": seed,
                "eval_every": 2,
            },
            "eval": {"tau": 2},
            "out_dir": "unused",
        }
    )


def _tiny_dataset(cfg):
    d = cfg.data
    return synth_dataset(d.seed, d.n, d.H, d.W, d.K, d.scale_mix)


def test_train_is_bitwise_deterministic():
    cfg = _tiny_config()
    ds = _tiny_dataset(cfg)
    a = train(cfg, ds)
    b = train(cfg, ds)
    assert a.report.loss_curve == b.report.loss_curve  # exact float equality
    for name, t in a.params.named_parameters().items():
        assert t.data.tobytes() == b.params.named_parameters()[name].data.tobytes()
    assert a.report.metric_dict() == b.report.metric_dict()


def test_lr_zero_keeps_parameters_and_flat_loss():
    # Full-batch steps make the frozen loss curve exactly flat.
    cfg = _tiny_config(steps=4, lr=0.0, batch_size=4)
    ds = _tiny_dataset(cfg)
    result = train(cfg, ds)
    losses = [row[1] for row in result.report.loss_curve]
    assert losses == [losses[0]] * 4

    from dscnet.traineval import build_model

    fresh = build_model(cfg).named_parameters()
    for name, t in result.params.named_parameters().items():
        assert t.data.tobytes() == fresh[name].data.tobytes()  # unchanged


def test_train_emits_curve_and_evals():
    cfg = _tiny_config(steps=4)
    result = train(cfg, _tiny_dataset(cfg))
    assert len(result.report.loss_curve) == 4
    assert [s for s, _, _ in result.report.loss_curve] == [0, 1, 2, 3]
    assert result.report.eval_points and result.report.eval_points[0][0] == 2
    assert result.meta.step == 4
    d = result.report.to_dict()
    assert set(d) >= {"dice", "miou", "nsd", "loss_curve", "wall_time_s"}


def test_training_reduces_loss_on_easy_data():
    cfg = _tiny_config(steps=25, lr=0.02, seed=6)
    result = train(cfg, _tiny_dataset(cfg))
    losses = [row[1] for row in result.report.loss_curve]
    assert losses[-1] < losses[0] * 0.8


def test_evaluate_matches_training_final_metrics():
    cfg = _tiny_config(steps=3)
    ds = _tiny_dataset(cfg)
    result = train(cfg, ds)
    again = evaluate_params(result.params, ds, cfg.eval.tau)
    assert again.metric_dict() == result.report.metric_dict()


def test_metrics_report_fields_in_range():
    cfg = _tiny_config(steps=2)
    result = train(cfg, _tiny_dataset(cfg))
    rep: MetricsReport = result.report
    for v in (rep.dice, rep.miou, rep.nsd, *rep.dice_per_class, *rep.iou_per_class, *rep.nsd_per_class):
        assert 0.0 <= v <= 1.0


def test_nonfinite_loss_aborts_with_diagnostic_dump(tmp_path):
    from dscnet.errors import NonFiniteLoss

    cfg = _tiny_config(steps=2)
    ds = _tiny_dataset(cfg)
    poisoned = ds[0].image.data.copy()
    poisoned[0, 0, 0] = np.inf
    ds[0] = type(ds[0])(image=Tensor(poisoned), mask=ds[0].mask)
    with np.errstate(invalid="ignore", over="ignore"), pytest.raises(NonFiniteLoss):
        train(cfg, ds, diagnostics_dir=tmp_path / "diag")
    dumps = list((tmp_path / "diag").glob("nonfinite_step*/samples/*.img.dsct"))
    assert dumps  # offending batch was written out
