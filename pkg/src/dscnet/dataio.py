"""Deterministic data generation and on-disk containers.

The generator is driven by a 64-bit counter-based PRNG so identical seeds
produce bitwise-identical datasets on any platform.  Output i is the
splitmix64 finalizer applied to seed + (i+1) * GOLDEN:

    GOLDEN = 0x9E3779B97F4A7C15
    z ^= z >> 30;  z *= 0xBF58476D1CE4E5B9
    z ^= z >> 27;  z *= 0x94D049BB133111EB
    z ^= z >> 31

Uniform doubles are the top 53 bits over 2^53; normals use the Irwin-Hall
sum of 12 uniforms minus 6, which needs only additions and therefore
reproduces exactly across platforms (adequate tails for noise and init).
"""
from __future__ import annotations

import io
import json
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping

import numpy as np

from .errors import BadConfig, ManifestMismatch, TruncatedPayload
from .tensor import Tensor
from .tensorfile import tensor_from_stream, tensor_to_bytes

GOLDEN = 0x9E3779B97F4A7C15
MIX1 = 0xBF58476D1CE4E5B9
MIX2 = 0x94D049BB133111EB
_M64 = (1 << 64) - 1


def _mix64(z: int) -> int:
    z ^= z >> 30
    z = (z * MIX1) & _M64
    z ^= z >> 27
    z = (z * MIX2) & _M64
    z ^= z >> 31
    return z


class Prng:
    """Counter-based generator; scalar and vector draws share one stream."""

    def __init__(self, seed: int):
        self.seed = seed & _M64
        self.counter = 0

    def u64(self) -> int:
        self.counter += 1
        return _mix64((self.seed + self.counter * GOLDEN) & _M64)

    def u64_array(self, n: int) -> np.ndarray:
        idx = np.arange(self.counter + 1, self.counter + n + 1, dtype=np.uint64)
        self.counter += n
        z = np.uint64(self.seed) + idx * np.uint64(GOLDEN)
        z ^= z >> np.uint64(30)
        z *= np.uint64(MIX1)
        z ^= z >> np.uint64(27)
        z *= np.uint64(MIX2)
        z ^= z >> np.uint64(31)
        return z

    def uniform(self) -> float:
        return (self.u64() >> 11) * 2.0 ** -53

    def uniform_array(self, n: int) -> np.ndarray:
        return (self.u64_array(n) >> np.uint64(11)).astype(np.float64) * 2.0 ** -53

    def below(self, n: int) -> int:
        """Unbiased integer in [0, n) via rejection sampling."""
        if n <= 0:
            raise BadConfig(f"below() needs a positive bound, got {n}")
        limit = (1 << 64) - ((1 << 64) % n)
        while True:
            v = self.u64()
            if v < limit:
                return v % n

    def normal(self) -> float:
        acc = 0.0
        for _ in range(12):
            acc += self.uniform()
        return acc - 6.0

    def normal_array(self, n: int) -> np.ndarray:
        # Column-wise accumulation keeps the left-to-right rounding of the
        # scalar path (numpy's pairwise sum would round differently).
        u = self.uniform_array(12 * n).reshape(n, 12)
        acc = u[:, 0].copy()
        for j in range(1, 12):
            acc += u[:, j]
        return acc - 6.0

    def shuffle(self, items: list) -> None:
        """In-place Fisher-Yates."""
        for i in range(len(items) - 1, 0, -1):
            j = self.below(i + 1)
            items[i], items[j] = items[j], items[i]


# -- synthetic segmentation data ------------------------------------------------


@dataclass
class SegSample:
    image: Tensor  # [1, H, W] in [0, 1]
    mask: Tensor   # [H, W] class ids stored as floats


def _is_pow2(n: int) -> bool:
    return n >= 1 and (n & (n - 1)) == 0


def _place_shape(rng: Prng, h: int, w: int, small: bool, taken: list) -> tuple | None:
    """Sample a non-overlapping axis-aligned bbox; small shapes span at most
    h/8, large ones at least h/3 on their major axis."""
    if small:
        lo, hi = 2, max(2, h // 8)
    else:
        lo, hi = -(-h // 3), max(-(-h // 3), h // 2)  # ceil(h/3) .. h/2
    for _ in range(40):
        major = lo + rng.below(hi - lo + 1)
        minor = max(2, major // 2) + rng.below(major - max(2, major // 2) + 1)
        eh, ew = (major, minor) if rng.below(2) == 0 else (minor, major)
        if eh > h - 2 or ew > w - 2:
            continue
        top = 1 + rng.below(h - 1 - eh)
        left = 1 + rng.below(w - 1 - ew)
        box = (top - 1, left - 1, top + eh + 1, left + ew + 1)
        if any(not (box[2] <= o[0] or o[2] <= box[0] or box[3] <= o[1] or o[3] <= box[1]) for o in taken):
            continue
        taken.append(box)
        return top, left, eh, ew
    return None


def _paint(mask, img, top, left, eh, ew, ellipse: bool, cls: int, value: float) -> None:
    if ellipse:
        yy, xx = np.mgrid[0:eh, 0:ew]
        cy, cx = (eh - 1) / 2.0, (ew - 1) / 2.0
        ry, rx = max(eh / 2.0, 0.5), max(ew / 2.0, 0.5)
        inside = ((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2 <= 1.0
        inside[int(round(cy)), int(round(cx))] = True
    else:
        inside = np.ones((eh, ew), dtype=bool)
    view_m = mask[top:top + eh, left:left + ew]
    view_i = img[top:top + eh, left:left + ew]
    view_m[inside] = cls
    view_i[inside] = value


def synth_dataset(seed: int, n: int, h: int, w: int, k: int, scale_mix: float) -> list[SegSample]:
    """Generate ``n`` images of bright shapes at two scale regimes on a dark
    background, with additive Gaussian noise (sigma 0.05) and exact masks.

    ``scale_mix`` is the probability that a shape is drawn from the small
    regime.  Deterministic in ``seed``; sample i uses the stream seeded by
    seed XOR i.
    """
    if not (_is_pow2(h) and _is_pow2(w)) or h < 16 or w < 16:
        raise BadConfig(f"image extents must be powers of two >= 16, got {h}x{w}")
    if k < 2:
        raise BadConfig(f"need at least 2 classes, got {k}")
    if n < 1:
        raise BadConfig(f"need at least one sample, got {n}")
    if not 0.0 <= scale_mix <= 1.0:
        raise BadConfig(f"scale_mix must be in [0,1], got {scale_mix}")

    samples = []
    for i in range(n):
        rng = Prng(seed ^ i)
        img = np.full((h, w), 0.15 + 0.1 * rng.uniform())
        mask = np.zeros((h, w), dtype=np.int64)
        taken: list = []
        n_shapes = 3 + rng.below(4)
        for _ in range(n_shapes):
            small = rng.uniform() < scale_mix
            spot = _place_shape(rng, h, w, small, taken)
            if spot is None:
                continue
            cls = 1 + rng.below(k - 1)
            base = 0.55 + 0.4 * (cls - 1) / max(1, k - 2) if k > 2 else 0.85
            value = min(0.98, base + 0.08 * (rng.uniform() - 0.5))
            _paint(mask, img, *spot, ellipse=rng.below(2) == 0, cls=cls, value=value)
        noise = 0.05 * rng.normal_array(h * w).reshape(h, w)
        img = np.clip(img + noise, 0.0, 1.0)
        samples.append(SegSample(image=Tensor(img[None]), mask=Tensor(mask.astype(np.float64))))
    return samples


def save_dataset(root, samples: list[SegSample], meta: dict) -> None:
    root = Path(root)
    (root / "samples").mkdir(parents=True, exist_ok=True)
    for i, s in enumerate(samples):
        (root / "samples" / f"{i:04d}.img.dsct").write_bytes(tensor_to_bytes(s.image))
        (root / "samples" / f"{i:04d}.msk.dsct").write_bytes(tensor_to_bytes(s.mask))
    (root / "meta.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")


def load_dataset(root) -> tuple[list[SegSample], dict]:
    root = Path(root)
    meta = json.loads((root / "meta.json").read_text())
    samples = []
    for i in range(meta["n"]):
        img = tensor_from_stream(io.BytesIO((root / "samples" / f"{i:04d}.img.dsct").read_bytes()))
        msk = tensor_from_stream(io.BytesIO((root / "samples" / f"{i:04d}.msk.dsct").read_bytes()))
        samples.append(SegSample(image=img, mask=msk))
    return samples, meta


# -- checkpoint container ("DSCK") ---------------------------------------------
#
#   magic 4B | version 1B | header_len u32 LE | header JSON | payload
#
# The header holds config hash, RNG seed, step counter, and a manifest of
# (name, offset, dtype, shape); each payload entry is a complete,
# self-describing tensor record that is cross-checked against the manifest.

CKPT_MAGIC = b"DSCK"
CKPT_VERSION = 1


@dataclass
class CheckpointMeta:
    config_hash: str
    seed: int
    step: int


def save_checkpoint(path, params: Mapping[str, Tensor], meta: CheckpointMeta) -> None:
    entries = []
    chunks = []
    offset = 0
    for name, t in params.items():
        blob = tensor_to_bytes(t)
        entries.append(
            {
                "name": name,
                "offset": offset,
                "dtype": t.data.dtype.name,
                "shape": list(t.data.shape),
            }
        )
        chunks.append(blob)
        offset += len(blob)
    header = json.dumps(
        {
            "config_hash": meta.config_hash,
            "seed": meta.seed,
            "step": meta.step,
            "entries": entries,
        },
        sort_keys=True,
    ).encode()
    with open(path, "wb") as f:
        f.write(CKPT_MAGIC + bytes([CKPT_VERSION]) + struct.pack("<I", len(header)))
        f.write(header)
        for blob in chunks:
            f.write(blob)


def load_checkpoint(path) -> tuple[dict[str, Tensor], CheckpointMeta]:
    raw = Path(path).read_bytes()
    if len(raw) < 9:
        raise TruncatedPayload("checkpoint shorter than its fixed header")
    if raw[:4] != CKPT_MAGIC:
        raise ManifestMismatch(f"not a checkpoint file: magic {raw[:4]!r}")
    if raw[4] != CKPT_VERSION:
        raise ManifestMismatch(f"unsupported checkpoint version {raw[4]}")
    hlen = struct.unpack_from("<I", raw, 5)[0]
    if len(raw) < 9 + hlen:
        raise TruncatedPayload("checkpoint ends inside the JSON header")
    header = json.loads(raw[9:9 + hlen].decode())
    payload = raw[9 + hlen:]
    params: dict[str, Tensor] = {}
    for entry in header["entries"]:
        t = tensor_from_stream(io.BytesIO(payload[entry["offset"]:]))
        if list(t.data.shape) != entry["shape"] or t.data.dtype.name != entry["dtype"]:
            raise ManifestMismatch(
                f"manifest entry {entry['name']!r} disagrees with its stored record"
            )
        params[entry["name"]] = t
    meta = CheckpointMeta(
        config_hash=header["config_hash"], seed=header["seed"], step=header["step"]
    )
    return params, meta


def apply_checkpoint(registry: Mapping[str, Tensor], loaded: Mapping[str, Tensor]) -> None:
    """Copy loaded values into a model's parameter registry, names and shapes
    must match exactly."""
    missing = sorted(set(registry) - set(loaded))
    unknown = sorted(set(loaded) - set(registry))
    if missing or unknown:
        raise ManifestMismatch(f"missing={missing} unknown={unknown}")
    for name, target in registry.items():
        src = loaded[name].data
        if src.shape != target.data.shape:
            raise ManifestMismatch(
                f"{name}: checkpoint shape {src.shape} != model shape {target.data.shape}"
            )
        target.data = src.astype(target.data.dtype, copy=True)
