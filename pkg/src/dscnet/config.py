"""JSON run configuration: schema validation and typed records.

Unknown keys are rejected and missing required keys are reported by their
dotted path, so configs fail loudly instead of silently using defaults.
The full schema is documented in docs/config.md.
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass
from pathlib import Path

from .dmsk import validate_bank_ordering
from .errors import ConfigError


@dataclass
class DataConfig:
    seed: int
    n: int
    H: int
    W: int
    K: int
    scale_mix: float


@dataclass
class ModelConfig:
    levels: int
    channels: list[int]
    skip_mode: str
    dsc_placement: str
    banks_small: list[tuple[int, int]]
    banks_large: list[tuple[int, int]]
    eta: float
    kernel_strategy: str = "both"
    in_channels: int = 1
    # The inner loop runs one gradient step per token in raster order; the
    # keys exist so the choice is explicit in configs, and only the
    # implemented values are accepted.
    ttt_token_order: str = "raster"
    ttt_inner_steps: int = 1


@dataclass
class TrainConfig:
    lr: float
    momentum: float
    steps: int
    batch_size: int
    seed: int
    lambda_dice: float = 1.0
    lambda_ce: float = 1.0
    eval_every: int = 0


@dataclass
class EvalConfig:
    tau: int = 2


@dataclass
class RunConfig:
    data: DataConfig
    model: ModelConfig
    train: TrainConfig
    eval: EvalConfig
    out_dir: str = "runs/out"


_TOP_KEYS = {"data", "model", "train", "eval", "out_dir"}
_DATA_KEYS = {"seed", "n", "H", "W", "K", "scale_mix"}
_MODEL_REQUIRED = {"levels", "channels", "skip_mode", "dsc_placement", "banks", "eta"}
_MODEL_OPTIONAL = {"kernel_strategy", "in_channels", "ttt_token_order", "ttt_inner_steps"}
_TRAIN_REQUIRED = {"lr", "momentum", "steps", "batch_size", "seed"}
_TRAIN_OPTIONAL = {"lambda_dice", "lambda_ce", "eval_every"}
_EVAL_KEYS = {"tau"}

KERNEL_STRATEGIES = ("both", "small_only", "large_only")


def _require(section: dict, name: str, keys: set[str], optional: set[str] = frozenset()):
    for key in section:
        if key not in keys | optional:
            raise ConfigError(f"unknown key '{name}.{key}'")
    for key in keys:
        if key not in section:
            raise ConfigError(f"missing key '{name}.{key}'")


def _number(section: dict, name: str, key: str, kind, positive: bool = False):
    v = section[key]
    if kind is int and (isinstance(v, bool) or not isinstance(v, int)):
        raise ConfigError(f"'{name}.{key}' must be an integer, got {v!r}")
    if kind is float and not isinstance(v, (int, float)):
        raise ConfigError(f"'{name}.{key}' must be a number, got {v!r}")
    if positive and not v > 0:
        raise ConfigError(f"'{name}.{key}' must be positive, got {v!r}")
    return kind(v)


def _bank_list(obj, name: str) -> list[tuple[int, int]]:
    if not isinstance(obj, list) or not obj:
        raise ConfigError(f"'{name}' must be a non-empty list of [kernel, dilation] pairs")
    out = []
    for pair in obj:
        if not (isinstance(pair, list) and len(pair) == 2 and all(isinstance(v, int) for v in pair)):
            raise ConfigError(f"'{name}' entries must be [kernel, dilation] integer pairs, got {pair!r}")
        k, d = pair
        if k < 1 or k % 2 == 0 or d < 1:
            raise ConfigError(f"'{name}' entry [{k},{d}] needs an odd kernel and dilation >= 1")
        out.append((k, d))
    return out


def parse_config(obj: dict) -> RunConfig:
    if not isinstance(obj, dict):
        raise ConfigError("config root must be a JSON object")
    for key in obj:
        if key not in _TOP_KEYS:
            raise ConfigError(f"unknown key '{key}'")
    for key in _TOP_KEYS:
        if key not in obj:
            raise ConfigError(f"missing key '{key}'")

    d = obj["data"]
    _require(d, "data", _DATA_KEYS)
    data = DataConfig(
        seed=_number(d, "data", "seed", int),
        n=_number(d, "data", "n", int, positive=True),
        H=_number(d, "data", "H", int, positive=True),
        W=_number(d, "data", "W", int, positive=True),
        K=_number(d, "data", "K", int, positive=True),
        scale_mix=_number(d, "data", "scale_mix", float),
    )
    if data.K < 2:
        raise ConfigError(f"'data.K' must be >= 2, got {data.K}")
    if not 0.0 <= data.scale_mix <= 1.0:
        raise ConfigError(f"'data.scale_mix' must lie in [0,1], got {data.scale_mix}")

    m = obj["model"]
    _require(m, "model", _MODEL_REQUIRED, _MODEL_OPTIONAL)
    banks = m["banks"]
    if not isinstance(banks, dict) or set(banks) != {"small", "large"}:
        raise ConfigError("'model.banks' must be an object with 'small' and 'large' lists")
    strategy = m.get("kernel_strategy", "both")
    if strategy not in KERNEL_STRATEGIES:
        raise ConfigError(f"'model.kernel_strategy' must be one of {KERNEL_STRATEGIES}, got {strategy!r}")
    channels = m["channels"]
    if not (isinstance(channels, list) and channels and all(isinstance(c, int) and c > 0 for c in channels)):
        raise ConfigError("'model.channels' must be a list of positive integers")
    model = ModelConfig(
        levels=_number(m, "model", "levels", int, positive=True),
        channels=list(channels),
        skip_mode=m["skip_mode"],
        dsc_placement=m["dsc_placement"],
        banks_small=_bank_list(banks["small"], "model.banks.small"),
        banks_large=_bank_list(banks["large"], "model.banks.large"),
        eta=_number(m, "model", "eta", float, positive=True),
        kernel_strategy=strategy,
        in_channels=_number(m, "model", "in_channels", int, positive=True) if "in_channels" in m else 1,
        ttt_token_order=m.get("ttt_token_order", "raster"),
        ttt_inner_steps=_number(m, "model", "ttt_inner_steps", int, positive=True)
        if "ttt_inner_steps" in m
        else 1,
    )
    if model.ttt_token_order != "raster":
        raise ConfigError(f"'model.ttt_token_order' supports only 'raster', got {model.ttt_token_order!r}")
    if model.ttt_inner_steps != 1:
        raise ConfigError(f"'model.ttt_inner_steps' supports only 1, got {model.ttt_inner_steps}")
    if model.skip_mode not in ("plain", "dmsk", "ttt", "dsc"):
        raise ConfigError(f"'model.skip_mode' must be plain|dmsk|ttt|dsc, got {model.skip_mode!r}")
    if model.dsc_placement not in ("all", "deepest"):
        raise ConfigError(f"'model.dsc_placement' must be all|deepest, got {model.dsc_placement!r}")
    if model.levels != len(model.channels):
        raise ConfigError(
            f"'model.channels' must list one width per level: {model.levels} levels vs {model.channels}"
        )

    t = obj["train"]
    _require(t, "train", _TRAIN_REQUIRED, _TRAIN_OPTIONAL)
    train = TrainConfig(
        # lr = 0 is a valid degenerate setting (frozen run); negatives are not
        lr=_number(t, "train", "lr", float),
        momentum=_number(t, "train", "momentum", float),
        steps=_number(t, "train", "steps", int, positive=True),
        batch_size=_number(t, "train", "batch_size", int, positive=True),
        seed=_number(t, "train", "seed", int),
        lambda_dice=_number(t, "train", "lambda_dice", float) if "lambda_dice" in t else 1.0,
        lambda_ce=_number(t, "train", "lambda_ce", float) if "lambda_ce" in t else 1.0,
        eval_every=_number(t, "train", "eval_every", int) if "eval_every" in t else 0,
    )
    if train.lr < 0:
        raise ConfigError(f"'train.lr' must be non-negative, got {train.lr}")
    if not 0.0 <= train.momentum < 1.0:
        raise ConfigError(f"'train.momentum' must lie in [0,1), got {train.momentum}")

    e = obj["eval"]
    _require(e, "eval", _EVAL_KEYS)
    ev = EvalConfig(tau=_number(e, "eval", "tau", int, positive=True))

    if not isinstance(obj["out_dir"], str) or not obj["out_dir"]:
        raise ConfigError("'out_dir' must be a non-empty string")

    cfg = RunConfig(data=data, model=model, train=train, eval=ev, out_dir=obj["out_dir"])
    effective_banks(cfg.model)  # validates receptive-field ordering for "both"
    return cfg


def load_config(path) -> RunConfig:
    try:
        obj = json.loads(Path(path).read_text())
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path}: not valid JSON ({e})") from e
    return parse_config(obj)


def effective_banks(model: ModelConfig) -> tuple[list[tuple[int, int]], list[tuple[int, int]]]:
    """Resolve the kernel strategy to concrete (small, large) bank entries.

    Single-scale strategies reuse one scale set for both cascade stages, so
    the cross-bank receptive-field ordering only applies to "both".
    """
    if model.kernel_strategy == "small_only":
        return model.banks_small, model.banks_small
    if model.kernel_strategy == "large_only":
        return model.banks_large, model.banks_large
    try:
        validate_bank_ordering(model.banks_small, model.banks_large)
    except Exception as e:
        raise ConfigError(str(e)) from e
    return model.banks_small, model.banks_large


def config_hash(cfg: RunConfig) -> str:
    """Hash of the sections that determine data and architecture."""
    payload = json.dumps(
        {"data": asdict(cfg.data), "model": asdict(cfg.model)}, sort_keys=True
    ).encode()
    return hashlib.sha256(payload).hexdigest()
