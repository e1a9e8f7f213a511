"""Loss, segmentation metrics, SGD, and the training/evaluation loops.

The loss is mean pixel cross-entropy plus one minus the mean soft Dice over
classes (smoothing 1e-5 in numerator and denominator), each with its own
weight.  Metrics are hard Dice / IoU with the empty-empty-equals-one
convention, and a normalized surface distance at Chebyshev tolerance tau.
Training is bitwise deterministic for a fixed seed: one thread, a fixed
shuffle stream, and fixed reduction orders.
"""
from __future__ import annotations

import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .config import RunConfig, TrainConfig, config_hash, effective_banks
from .dataio import CheckpointMeta, Prng, SegSample, save_dataset
from .errors import BadMask, NonFiniteLoss, ShapeMismatch
from .ops import log_softmax_channels
from .tensor import Tensor
from .unet import UNetParams, build_unet, unet_forward

DICE_SMOOTH = 1e-5


# -- loss -------------------------------------------------------------------


def _mask_ids(mask: Tensor, k: int) -> np.ndarray:
    ids = mask.data
    rounded = ids.astype(np.int64)
    if not np.array_equal(rounded, ids):
        raise BadMask("mask entries must be integral class ids")
    if rounded.min() < 0 or rounded.max() >= k:
        raise BadMask(f"mask ids must lie in [0,{k - 1}], got [{rounded.min()},{rounded.max()}]")
    return rounded


def seg_loss(
    logits: Tensor,
    mask: Tensor,
    lambda_ce: float = 1.0,
    lambda_dice: float = 1.0,
    smooth: float = DICE_SMOOTH,
) -> Tensor:
    """Weighted cross-entropy plus soft-Dice loss of [K,H,W] logits."""
    if logits.data.ndim != 3:
        raise ShapeMismatch(f"logits must be [K,H,W], got {logits.data.shape}")
    k, h, w = logits.data.shape
    if mask.data.shape != (h, w):
        raise ShapeMismatch(f"mask shape {mask.data.shape} != {(h, w)}")
    ids = _mask_ids(mask, k)
    onehot = Tensor(np.eye(k)[ids].transpose(2, 0, 1))

    logp = log_softmax_channels(logits)
    ce = -(logp * onehot).sum() * (1.0 / (h * w))
    probs = logp.exp()
    inter = (probs * onehot).sum(axis=(1, 2))
    sums = probs.sum(axis=(1, 2)) + onehot.sum(axis=(1, 2))
    dice = (inter * 2.0 + smooth) / (sums + smooth)
    return lambda_ce * ce + lambda_dice * (1.0 - dice.mean())


# -- hard metrics -------------------------------------------------------------


def dice_metric(pred: np.ndarray, gt: np.ndarray, cls: int) -> float:
    if pred.shape != gt.shape:
        raise ShapeMismatch(f"pred {pred.shape} vs gt {gt.shape}")
    p = pred == cls
    g = gt == cls
    np_, ng = int(p.sum()), int(g.sum())
    if np_ == 0 and ng == 0:
        return 1.0
    return 2.0 * int((p & g).sum()) / (np_ + ng)


def iou_metric(pred: np.ndarray, gt: np.ndarray, cls: int) -> float:
    if pred.shape != gt.shape:
        raise ShapeMismatch(f"pred {pred.shape} vs gt {gt.shape}")
    p = pred == cls
    g = gt == cls
    union = int((p | g).sum())
    if union == 0:
        return 1.0
    return int((p & g).sum()) / union


def miou(pred: np.ndarray, gt: np.ndarray, num_classes: int) -> float:
    return float(np.mean([iou_metric(pred, gt, c) for c in range(num_classes)]))


def boundary_pixels(region: np.ndarray) -> np.ndarray:
    """Region pixels with a 4-neighbor outside the region (image border counts
    as outside)."""
    padded = np.pad(region, 1, constant_values=False)
    interior = (
        padded[:-2, 1:-1] & padded[2:, 1:-1] & padded[1:-1, :-2] & padded[1:-1, 2:]
    )
    return region & ~interior


def _dilate_chebyshev(mask: np.ndarray, radius: int) -> np.ndarray:
    h, w = mask.shape
    padded = np.pad(mask, radius, constant_values=False)
    out = np.zeros_like(mask)
    for dy in range(2 * radius + 1):
        for dx in range(2 * radius + 1):
            out |= padded[dy:dy + h, dx:dx + w]
    return out


def nsd_metric(pred: np.ndarray, gt: np.ndarray, cls: int, tau: int = 2) -> float:
    """Mean of the two boundary-coverage fractions at Chebyshev tolerance tau.

    Both boundaries empty -> 1; exactly one empty -> that side's vacuous
    fraction counts as 0 (a fully missing prediction scores low).
    """
    if pred.shape != gt.shape:
        raise ShapeMismatch(f"pred {pred.shape} vs gt {gt.shape}")
    bp = boundary_pixels(pred == cls)
    bg = boundary_pixels(gt == cls)
    n_bp, n_bg = int(bp.sum()), int(bg.sum())
    if n_bp == 0 and n_bg == 0:
        return 1.0
    frac_p = int((bp & _dilate_chebyshev(bg, tau)).sum()) / n_bp if n_bp else 0.0
    frac_g = int((bg & _dilate_chebyshev(bp, tau)).sum()) / n_bg if n_bg else 0.0
    return 0.5 * (frac_p + frac_g)


# -- reports ------------------------------------------------------------------


@dataclass
class MetricsReport:
    dice_per_class: list[float]
    dice: float
    iou_per_class: list[float]
    miou: float
    nsd_per_class: list[float]
    nsd: float
    tau: int
    loss_curve: list[tuple[int, float, float]] = field(default_factory=list)
    eval_points: list[tuple[int, float]] = field(default_factory=list)
    wall_time_s: float = 0.0

    def metric_dict(self) -> dict:
        """Metric fields only, for exact reproducibility comparisons."""
        return {
            "dice_per_class": self.dice_per_class,
            "dice": self.dice,
            "iou_per_class": self.iou_per_class,
            "miou": self.miou,
            "nsd_per_class": self.nsd_per_class,
            "nsd": self.nsd,
            "tau": self.tau,
        }

    def to_dict(self) -> dict:
        out = self.metric_dict()
        out["loss_curve"] = [list(row) for row in self.loss_curve]
        out["eval_points"] = [list(row) for row in self.eval_points]
        out["wall_time_s"] = self.wall_time_s
        return out


def evaluate_params(params: UNetParams, dataset: list[SegSample], tau: int = 2) -> MetricsReport:
    """Metrics over a dataset with frozen parameters (per-class means over
    samples, then means over classes)."""
    start = time.perf_counter()
    k = params.num_classes
    dice_acc = np.zeros(k)
    iou_acc = np.zeros(k)
    nsd_acc = np.zeros(k)
    for sample in dataset:
        logits = unet_forward(sample.image, params, mode="infer")
        pred = logits.data.argmax(axis=0)
        gt = sample.mask.data.astype(np.int64)
        for c in range(k):
            dice_acc[c] += dice_metric(pred, gt, c)
            iou_acc[c] += iou_metric(pred, gt, c)
            nsd_acc[c] += nsd_metric(pred, gt, c, tau)
    n = len(dataset)
    dice_pc = (dice_acc / n).tolist()
    iou_pc = (iou_acc / n).tolist()
    nsd_pc = (nsd_acc / n).tolist()
    return MetricsReport(
        dice_per_class=dice_pc,
        dice=float(np.mean(dice_pc)),
        iou_per_class=iou_pc,
        miou=float(np.mean(iou_pc)),
        nsd_per_class=nsd_pc,
        nsd=float(np.mean(nsd_pc)),
        tau=tau,
        wall_time_s=time.perf_counter() - start,
    )


# -- optimizer ----------------------------------------------------------------


def sgd_step(
    params: dict[str, Tensor],
    grads: dict[str, np.ndarray],
    lr: float,
    momentum: float,
    velocity: dict[str, np.ndarray],
) -> None:
    """v <- momentum * v + g;  theta <- theta - lr * v  (in place)."""
    for name, p in params.items():
        g = grads[name]
        v = velocity.get(name)
        if v is None:
            v = np.zeros_like(p.data)
            velocity[name] = v
        v *= momentum
        v += g
        p.data -= lr * v


# -- training loop -------------------------------------------------------------


@dataclass
class TrainResult:
    params: UNetParams
    meta: CheckpointMeta
    report: MetricsReport


def build_model(cfg: RunConfig) -> UNetParams:
    small, large = effective_banks(cfg.model)
    return build_unet(
        levels=cfg.model.levels,
        channels=cfg.model.channels,
        in_channels=cfg.model.in_channels,
        num_classes=cfg.data.K,
        skip_mode=cfg.model.skip_mode,
        dsc_placement=cfg.model.dsc_placement,
        bank_small=small,
        bank_large=large,
        eta=cfg.model.eta,
        rng=Prng(cfg.train.seed),
        check_bank_ordering=cfg.model.kernel_strategy == "both",
    )


def evaluate_checkpoint(path, cfg: RunConfig, dataset: list[SegSample]) -> MetricsReport:
    """Rebuild the model from the config, load the checkpoint into it, and
    evaluate.  Refuses checkpoints whose config hash does not match."""
    from .dataio import apply_checkpoint, load_checkpoint
    from .errors import ConfigError

    loaded, meta = load_checkpoint(path)
    if meta.config_hash != config_hash(cfg):
        raise ConfigError(
            f"checkpoint was produced by a different data/model config (hash {meta.config_hash[:12]}...)"
        )
    params = build_model(cfg)
    apply_checkpoint(params.named_parameters(), loaded)
    return evaluate_params(params, dataset, cfg.eval.tau)


def train(cfg: RunConfig, dataset: list[SegSample], diagnostics_dir=None) -> TrainResult:
    """Run SGD for the configured number of steps and evaluate the result.

    Deterministic given the config: the shuffle stream, batch assembly, and
    gradient accumulation order are all fixed.  A non-finite loss aborts
    with a diagnostic dump of the offending batch.
    """
    start = time.perf_counter()
    params = build_model(cfg)
    registry = params.named_parameters()
    tc: TrainConfig = cfg.train

    shuffle_rng = Prng(tc.seed)
    order: list[int] = []
    velocity: dict[str, np.ndarray] = {}
    curve: list[tuple[int, float, float]] = []
    eval_points: list[tuple[int, float]] = []

    def next_index() -> int:
        nonlocal order
        if not order:
            order = list(range(len(dataset)))
            shuffle_rng.shuffle(order)
        return order.pop()

    for step in range(tc.steps):
        for p in registry.values():
            p.grad = None
        batch = [dataset[next_index()] for _ in range(tc.batch_size)]
        losses = []
        dices = []
        for sample in batch:
            logits = unet_forward(sample.image, params, mode="train")
            loss = seg_loss(logits, sample.mask, tc.lambda_ce, tc.lambda_dice)
            (loss * (1.0 / tc.batch_size)).backward()
            losses.append(float(loss.data))
            pred = logits.data.argmax(axis=0)
            gt = sample.mask.data.astype(np.int64)
            dices.append(np.mean([dice_metric(pred, gt, c) for c in range(params.num_classes)]))
        mean_loss = float(np.mean(losses))
        if not np.isfinite(mean_loss):
            if diagnostics_dir is not None:
                _dump_batch(diagnostics_dir, batch, step)
            raise NonFiniteLoss(f"loss became {mean_loss} at step {step}")
        curve.append((step, mean_loss, float(np.mean(dices))))

        grads = {
            name: (p.grad if p.grad is not None else np.zeros_like(p.data))
            for name, p in registry.items()
        }
        sgd_step(registry, grads, tc.lr, tc.momentum, velocity)

        if tc.eval_every > 0 and (step + 1) % tc.eval_every == 0:
            snap = evaluate_params(params, dataset, cfg.eval.tau)
            eval_points.append((step + 1, snap.dice))

    report = evaluate_params(params, dataset, cfg.eval.tau)
    report.loss_curve = curve
    report.eval_points = eval_points
    report.wall_time_s = time.perf_counter() - start
    meta = CheckpointMeta(config_hash=config_hash(cfg), seed=tc.seed, step=tc.steps)
    return TrainResult(params=params, meta=meta, report=report)


def _dump_batch(root, batch: list[SegSample], step: int) -> None:
    root = Path(root) / f"nonfinite_step{step}"
    save_dataset(root, batch, {"n": len(batch), "note": f"batch at failing step {step}"})
