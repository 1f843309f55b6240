"""Evaluation metrics, JSON-lines round reports and ``FSCK`` checkpoints."""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .errors import CheckpointMismatchError, ContractError, FormatError, ReportParseError
from .model import NUM_LABELS, ModelConfig, ModelParams, predict


def compute_accuracy(scores: np.ndarray, labels: np.ndarray, threshold: float = 0.5) -> float:
    """Fraction of (sample, label) cells where ``score >= threshold`` matches the label."""
    scores, labels = np.asarray(scores), np.asarray(labels)
    if scores.shape != labels.shape:
        raise ContractError(f"accuracy: scores {scores.shape} vs labels {labels.shape}")
    if scores.size == 0:
        raise ContractError("accuracy: no cells")
    return float(np.mean((scores >= threshold) == (labels == 1)))


def compute_average_precision(scores: Sequence[float], labels: Sequence[int]) -> float | None:
    """Rank-walk AP; ``None`` when there is no positive label.

    Ranking is by descending score with ties kept in original index order.
    """
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    if scores.shape != labels.shape or scores.ndim != 1:
        raise ContractError(f"average precision: scores {scores.shape} vs labels {labels.shape}")
    n_pos = int((labels == 1).sum())
    if n_pos == 0:
        return None
    order = np.argsort(-scores, kind="stable")
    hits = labels[order] == 1
    precision_at = np.cumsum(hits) / np.arange(1, len(hits) + 1)
    return float(precision_at[hits].sum() / n_pos)


def per_label_ap(scores: np.ndarray, labels: np.ndarray) -> tuple[list[float | None], float | None]:
    """AP per label column and their mean over labels with at least one positive."""
    aps = [compute_average_precision(scores[:, j], labels[:, j]) for j in range(scores.shape[1])]
    defined = [a for a in aps if a is not None]
    return aps, (float(np.mean(defined)) if defined else None)


@dataclass
class Evaluation:
    accuracy: float
    ap: list[float | None]
    mean_ap: float | None

    @property
    def ap_undefined(self) -> int:
        return sum(a is None for a in self.ap)


def evaluate(params: Mapping[str, np.ndarray], samples: Sequence, config: ModelConfig) -> Evaluation:
    if not samples:
        raise ContractError("evaluate: no samples")
    scores = np.stack([predict(s.volume, params, config) for s in samples])
    labels = np.stack([s.volume_labels for s in samples])
    ap, mean_ap = per_label_ap(scores, labels)
    return Evaluation(compute_accuracy(scores, labels), ap, mean_ap)


# round reports

@dataclass
class RoundReport:
    """One line of ``reports.jsonl``.

    ``train_loss`` is ``None`` for a skipped round; an ``ap`` entry is ``None``
    when the eval set has no positive for that label. ``wall_seconds`` is
    ``None`` unless timing was requested, so report files stay reproducible.
    """

    round_index: int
    selected: list[int]
    train_loss: float | None
    accuracy: float
    ap: list[float | None]
    mean_ap: float | None
    ap_undefined: int
    uplink_bytes: int
    downlink_bytes: int
    wall_seconds: float | None = None

    def to_line(self) -> str:
        return json.dumps(asdict(self), separators=(",", ":"))

    @classmethod
    def from_line(cls, line: str, lineno: int = 1) -> "RoundReport":
        try:
            record = json.loads(line)
        except json.JSONDecodeError as exc:
            raise ReportParseError(f"not a JSON object: {exc.msg}", lineno) from None
        if not isinstance(record, dict):
            raise ReportParseError("not a JSON object", lineno)
        names = [f.name for f in fields(cls)]
        for name in names:
            if name not in record:
                raise ReportParseError(f"missing field '{name}'", lineno, name)
        extra = sorted(set(record) - set(names))
        if extra:
            raise ReportParseError(f"unknown field '{extra[0]}'", lineno, extra[0])
        ap = record["ap"]
        if not isinstance(ap, list) or len(ap) != NUM_LABELS:
            raise ReportParseError(f"field 'ap' must list {NUM_LABELS} values", lineno, "ap")
        if not isinstance(record["selected"], list):
            raise ReportParseError("field 'selected' must be a list", lineno, "selected")
        return cls(**record)


def append_report(report: RoundReport, path: str | Path) -> None:
    with open(path, "a", encoding="utf-8") as fh:
        fh.write(report.to_line() + "\n")


def read_reports(path: str | Path) -> list[RoundReport]:
    text = Path(path).read_text(encoding="utf-8")
    return [RoundReport.from_line(line, i) for i, line in enumerate(text.splitlines(), start=1)]


# checkpoints

CKPT_MAGIC = b"FSCK"
CKPT_VERSION = 1
_CKPT_HEAD = struct.Struct("<4sH32sIQQI")
_NAME_LEN = struct.Struct("<H")


@dataclass(frozen=True)
class CheckpointMeta:
    config_hash: bytes
    round_index: int
    parameter_count: int
    seed: int


def encode_checkpoint(params: Mapping[str, np.ndarray], meta: CheckpointMeta) -> bytes:
    count = sum(v.size for v in params.values())
    if count != meta.parameter_count:
        raise ContractError(f"meta says {meta.parameter_count} parameters, params hold {count}")
    parts = [_CKPT_HEAD.pack(CKPT_MAGIC, CKPT_VERSION, meta.config_hash, meta.round_index,
                             meta.parameter_count, meta.seed, len(params))]
    for name, value in params.items():
        raw = name.encode("utf-8")
        parts.append(_NAME_LEN.pack(len(raw)) + raw)
        parts.append(struct.pack(f"<B{value.ndim}I", value.ndim, *value.shape))
        parts.append(np.asarray(value, dtype="<f8").tobytes())
    return b"".join(parts)


def decode_checkpoint(blob: bytes, expected_hash: bytes | None = None) -> tuple[ModelParams, CheckpointMeta]:
    if len(blob) < _CKPT_HEAD.size:
        raise FormatError(f"truncated header: {len(blob)} bytes", len(blob))
    magic, version, chash, round_index, count, seed, n_tensors = _CKPT_HEAD.unpack_from(blob)
    if magic != CKPT_MAGIC:
        raise FormatError(f"bad magic {magic!r}", 0)
    if version != CKPT_VERSION:
        raise FormatError(f"unsupported version {version}", 4)
    if expected_hash is not None and chash != expected_hash:
        raise CheckpointMismatchError(
            f"config hash {chash.hex()[:12]} does not match expected {expected_hash.hex()[:12]}", 6)
    pos = _CKPT_HEAD.size

    def take(n: int, what: str) -> bytes:
        nonlocal pos
        if pos + n > len(blob):
            raise FormatError(f"truncated {what}: need {n} bytes, {len(blob) - pos} left", pos)
        chunk = blob[pos:pos + n]
        pos += n
        return chunk

    params: ModelParams = {}
    for _ in range(n_tensors):
        (name_len,) = _NAME_LEN.unpack(take(_NAME_LEN.size, "name length"))
        name = take(name_len, "name").decode("utf-8")
        (rank,) = struct.unpack("<B", take(1, "rank"))
        dims = struct.unpack(f"<{rank}I", take(4 * rank, "dims"))
        size = int(np.prod(dims, dtype=np.int64)) if rank else 1
        if size > (len(blob) - pos) // 8:
            raise FormatError(f"tensor '{name}' declares {size} values past end of file", pos)
        params[name] = np.frombuffer(take(8 * size, f"tensor '{name}'"), "<f8").astype(np.float64).reshape(dims)
    if pos != len(blob):
        raise FormatError(f"{len(blob) - pos} trailing bytes", pos)
    total = sum(v.size for v in params.values())
    if total != count:
        raise FormatError(f"header declares {count} parameters, payload holds {total}", 6 + 32 + 4)
    return params, CheckpointMeta(chash, round_index, count, seed)


def save_checkpoint(params: Mapping[str, np.ndarray], meta: CheckpointMeta, path: str | Path) -> None:
    Path(path).write_bytes(encode_checkpoint(params, meta))


def load_checkpoint(path: str | Path, expected_hash: bytes | None = None) -> tuple[ModelParams, CheckpointMeta]:
    """Read a checkpoint; raises if ``expected_hash`` is given and differs."""
    return decode_checkpoint(Path(path).read_bytes(), expected_hash)
