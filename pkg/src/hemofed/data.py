"""Synthetic CT volumes, the ``FSCN`` volume file format, Dirichlet client partitioning.

Each volume is a stack of ``S`` square slices with a dim, smoothly varying
background. A present subtype draws one bright region whose placement,
shape and brightness identify it (coordinates normalised to ``[-1, 1]``):

==  ================  ============================================  =========
id  label             region                                        intensity
==  ================  ============================================  =========
0   epidural          lens near the rim (r=0.65), 0.3 x 0.6 axes    0.95
1   intraparenchymal  central disc, radius 0.4 to 0.5               0.75
2   intraventricular  midline ellipse, 0.28 x 0.5 axes              0.55
3   subarachnoid      rim band (r 0.62 to 0.98) over a 144 deg arc  0.40
4   subdural          band (r 0.45 to 0.85) over a 180 deg arc      0.85
==  ================  ============================================  =========

Half of the volumes are clean; a positive volume has one subtype (p=0.7) or
two. Each region covers a contiguous run of slices, which defines the slice
labels. Label 5 (``any``) is the OR of labels 0..4, per slice and per volume.
Intensities are rounded to float32 so file round-trips are exact.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import ContractError, FormatError
from .model import NUM_LABELS, ModelConfig

NUM_SUBTYPES = NUM_LABELS - 1
ANY = NUM_LABELS - 1

MAGIC = b"FSCN"
VERSION = 1
_HEADER = struct.Struct("<4sHHHH")

_INTENSITY = (0.95, 0.75, 0.55, 0.40, 0.85)


@dataclass
class VolumeSample:
    volume: np.ndarray          # [S,1,H,W] float64 in [0,1]
    slice_labels: np.ndarray    # [S,6] uint8
    volume_labels: np.ndarray   # [6] uint8

    def __eq__(self, other):
        if not isinstance(other, VolumeSample):
            return NotImplemented
        return (np.array_equal(self.volume, other.volume)
                and np.array_equal(self.slice_labels, other.slice_labels)
                and np.array_equal(self.volume_labels, other.volume_labels))


@dataclass(frozen=True)
class PartitionSpec:
    num_clients: int
    alpha: float
    seed: int = 0

    def __post_init__(self):
        if self.num_clients < 1:
            raise ContractError(f"num_clients must be >= 1, got {self.num_clients}")
        if not self.alpha > 0:
            raise ContractError(f"alpha must be > 0, got {self.alpha}")


def _region_mask(subtype: int, hw: int, rng: np.random.Generator) -> np.ndarray:
    coords = (np.arange(hw) + 0.5) / hw * 2.0 - 1.0
    yy, xx = np.meshgrid(coords, coords, indexing="ij")
    rad = np.hypot(xx, yy)
    ang = np.arctan2(yy, xx)
    theta = rng.uniform(-np.pi, np.pi)
    if subtype == 0:
        cy, cx = 0.65 * np.sin(theta), 0.65 * np.cos(theta)
        # lens: narrow radially, long tangentially
        du = (xx - cx) * np.cos(theta) + (yy - cy) * np.sin(theta)
        dv = -(xx - cx) * np.sin(theta) + (yy - cy) * np.cos(theta)
        mask = (du / 0.3) ** 2 + (dv / 0.6) ** 2 <= 1.0
        center = (cy, cx)
    elif subtype == 1:
        cy, cx = rng.uniform(-0.2, 0.2, size=2)
        r = rng.uniform(0.4, 0.5)
        mask = (xx - cx) ** 2 + (yy - cy) ** 2 <= r * r
        center = (cy, cx)
    elif subtype == 2:
        cy, cx = rng.uniform(-0.3, 0.3), 0.0
        mask = (xx / 0.28) ** 2 + ((yy - cy) / 0.5) ** 2 <= 1.0
        center = (cy, cx)
    elif subtype == 3:
        dang = np.angle(np.exp(1j * (ang - theta)))
        mask = (np.abs(rad - 0.8) <= 0.18) & (np.abs(dang) <= np.pi / 2.5)
        center = (0.85 * np.sin(theta), 0.85 * np.cos(theta))
    elif subtype == 4:
        dang = np.angle(np.exp(1j * (ang - theta)))
        mask = (rad >= 0.45) & (rad <= 0.85) & (np.abs(dang) <= np.pi / 2)
        center = (0.68 * np.sin(theta), 0.68 * np.cos(theta))
    else:
        raise ValueError(subtype)
    if not mask.any():
        iy = int(np.argmin(np.abs(coords - center[0])))
        ix = int(np.argmin(np.abs(coords - center[1])))
        mask[iy, ix] = True
    return mask


def _smooth(field: np.ndarray) -> np.ndarray:
    padded = np.pad(field, ((0, 0), (1, 1), (1, 1)), mode="edge")
    acc = np.zeros_like(field)
    for dy in range(3):
        for dx in range(3):
            acc += padded[:, dy:dy + field.shape[1], dx:dx + field.shape[2]]
    return acc / 9.0


def generate_sample(config: ModelConfig, rng: np.random.Generator) -> VolumeSample:
    s, hw = config.slices_S, config.input_hw
    vol = 0.05 + 0.03 * _smooth(rng.standard_normal((s, hw, hw)))
    slice_labels = np.zeros((s, NUM_LABELS), dtype=np.uint8)
    if rng.random() < 0.5:
        n_types = 1 if rng.random() < 0.7 else 2
        for subtype in sorted(rng.choice(NUM_SUBTYPES, size=n_types, replace=False)):
            mask = _region_mask(int(subtype), hw, rng)
            length = int(rng.integers(1, s + 1))
            start = int(rng.integers(0, s - length + 1))
            for z in range(start, start + length):
                vol[z] = np.where(mask, np.maximum(vol[z], _INTENSITY[subtype]), vol[z])
                slice_labels[z, subtype] = 1
    slice_labels[:, ANY] = slice_labels[:, :NUM_SUBTYPES].max(axis=1)
    vol = np.clip(vol, 0.0, 1.0).astype(np.float32).astype(np.float64)
    return VolumeSample(vol[:, None], slice_labels, slice_labels.max(axis=0))


def generate_dataset(n: int, config: ModelConfig, seed: int) -> list[VolumeSample]:
    """``n`` volumes; sample ``i`` depends only on ``(config, seed, i)``."""
    if n < 1:
        raise ContractError(f"dataset size must be >= 1, got {n}")
    return [generate_sample(config, np.random.default_rng([seed, i])) for i in range(n)]


def label_bucket(sample: VolumeSample) -> int:
    """0 for a clean volume, else ``1 + first positive label index``."""
    labels = sample.volume_labels
    return 0 if not labels.any() else 1 + int(np.argmax(labels))


def partition_dirichlet(dataset: Sequence[VolumeSample], spec: PartitionSpec) -> list[list[int]]:
    """Label-skewed split: per bucket, client shares ~ Dirichlet(alpha).

    Draws are repeated (same generator) until no client is empty, up to 100
    attempts; after that the largest shards donate their last index to empty
    clients. Empty clients are only possible when ``len(dataset) < num_clients``.
    """
    if not dataset:
        raise ContractError("partition_dirichlet: empty dataset")
    k = spec.num_clients
    buckets: dict[int, list[int]] = {}
    for i, sample in enumerate(dataset):
        buckets.setdefault(label_bucket(sample), []).append(i)
    rng = np.random.default_rng(spec.seed)

    shards: list[list[int]] = []
    for _ in range(100):
        shards = [[] for _ in range(k)]
        for b in sorted(buckets):
            idx = np.array(buckets[b])
            rng.shuffle(idx)
            props = rng.dirichlet(np.full(k, spec.alpha))
            cuts = (np.cumsum(props) * len(idx)).astype(int)[:-1]
            for c, part in enumerate(np.split(idx, cuts)):
                shards[c].extend(int(j) for j in part)
        if all(shards) or len(dataset) < k:
            break
    else:
        for c in range(k):
            if not shards[c]:
                donor = max(range(k), key=lambda d: (len(shards[d]), -d))
                shards[c].append(shards[donor].pop())
    return [sorted(s) for s in shards]


# FSCN volume files

def encode_volume(sample: VolumeSample) -> bytes:
    s, _, h, w = sample.volume.shape
    if max(s, h, w) > 0xFFFF:
        raise FormatError(f"dimensions {s}x{h}x{w} exceed u16")
    return b"".join([
        _HEADER.pack(MAGIC, VERSION, s, h, w),
        np.asarray(sample.volume_labels, dtype=np.uint8).tobytes(),
        np.asarray(sample.slice_labels, dtype=np.uint8).tobytes(),
        np.asarray(sample.volume, dtype="<f4").tobytes(),
    ])


def decode_volume(blob: bytes) -> VolumeSample:
    if len(blob) < _HEADER.size:
        raise FormatError(f"truncated header: {len(blob)} bytes", len(blob))
    magic, version, s, h, w = _HEADER.unpack_from(blob)
    if magic != MAGIC:
        raise FormatError(f"bad magic {magic!r}", 0)
    if version != VERSION:
        raise FormatError(f"unsupported version {version}", 4)
    if min(s, h, w) < 1:
        raise FormatError(f"zero dimension in {s}x{h}x{w}", 6)
    pos = _HEADER.size
    need = pos + NUM_LABELS + s * NUM_LABELS + 4 * s * h * w
    if len(blob) < need:
        raise FormatError(f"declared {s}x{h}x{w} needs {need} bytes, file has {len(blob)}", len(blob))
    if len(blob) > need:
        raise FormatError(f"{len(blob) - need} trailing bytes", need)
    vol_labels = np.frombuffer(blob, np.uint8, NUM_LABELS, pos).copy()
    pos += NUM_LABELS
    slice_labels = np.frombuffer(blob, np.uint8, s * NUM_LABELS, pos).reshape(s, NUM_LABELS).copy()
    if vol_labels.max() > 1 or slice_labels.max() > 1:
        raise FormatError("label byte not 0/1", _HEADER.size)
    pos += s * NUM_LABELS
    vol = np.frombuffer(blob, "<f4", s * h * w, pos).astype(np.float64).reshape(s, 1, h, w)
    return VolumeSample(vol, slice_labels, vol_labels)


def save_volume(sample: VolumeSample, path: str | Path) -> None:
    Path(path).write_bytes(encode_volume(sample))


def load_volume(path: str | Path) -> VolumeSample:
    return decode_volume(Path(path).read_bytes())
