"""Dense-block slice encoder, GRU over the slice sequence, per-slice label head.

Parameters live in a plain ordered ``dict[str, ndarray]`` (``ModelParams``).
Every forward function comes in two flavours: a graph builder taking a
:class:`~hemofed.autodiff.Graph` and parameter handles, used for training, and
an array-in/array-out wrapper for inference and tests.

Feature length of the encoder for ``block_layout = [n_1, ..., n_B]`` and growth
rate ``k``: start with ``c = 1``; each block adds ``n_b * k`` channels; every
block except the last is followed by a transition to ``max(1, c // 2)``
channels. ``F`` is the final ``c`` (see :func:`feature_length`).
"""

from __future__ import annotations

import json
import hashlib
import math
from dataclasses import asdict, dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .autodiff import Graph, Uniform, Var, glorot_bound, sigmoid, tensor_create, value_and_grad
from .errors import ContractError, DomainError, ShapeError

LABELS = ("epidural", "intraparenchymal", "intraventricular", "subarachnoid", "subdural", "any")
NUM_LABELS = len(LABELS)

ModelParams = dict[str, np.ndarray]


@dataclass(frozen=True)
class ModelConfig:
    input_hw: int = 16
    slices_S: int = 3
    growth_rate_k: int = 4
    block_layout: tuple[int, ...] = (2, 2)
    gru_hidden: int = 8
    num_labels: int = NUM_LABELS

    def __post_init__(self):
        object.__setattr__(self, "block_layout", tuple(int(n) for n in self.block_layout))
        ints = [self.input_hw, self.slices_S, self.growth_rate_k, self.gru_hidden, self.num_labels]
        if not self.block_layout or min(ints + list(self.block_layout)) < 1:
            raise ContractError(f"model config fields must be >= 1: {self}")
        if self.num_labels != NUM_LABELS:
            raise ContractError(f"num_labels must be {NUM_LABELS}, got {self.num_labels}")
        downsample = 2 ** (len(self.block_layout) - 1)
        if self.input_hw % downsample:
            raise ContractError(
                f"input_hw {self.input_hw} not divisible by {downsample} "
                f"({len(self.block_layout) - 1} transition poolings)")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["block_layout"] = list(self.block_layout)
        return d

    def config_hash(self) -> bytes:
        """SHA-256 of the canonical JSON form; identifies checkpoint compatibility."""
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).digest()


def channel_plan(config: ModelConfig) -> list[tuple[list[int], int | None]]:
    """Per block: input channels of each dense layer, and transition output (or None)."""
    plan = []
    c = 1
    for b, n_layers in enumerate(config.block_layout):
        ins = [c + i * config.growth_rate_k for i in range(n_layers)]
        c += n_layers * config.growth_rate_k
        trans = None
        if b < len(config.block_layout) - 1:
            trans = max(1, c // 2)
            c = trans
        plan.append((ins, trans))
    return plan


def feature_length(config: ModelConfig) -> int:
    c = 1
    for b, n_layers in enumerate(config.block_layout):
        c += n_layers * config.growth_rate_k
        if b < len(config.block_layout) - 1:
            c = max(1, c // 2)
    return c


def param_shapes(config: ModelConfig) -> dict[str, tuple[int, ...]]:
    k, hd, f = config.growth_rate_k, config.gru_hidden, feature_length(config)
    shapes: dict[str, tuple[int, ...]] = {}
    for b, (ins, trans) in enumerate(channel_plan(config)):
        for i, cin in enumerate(ins):
            shapes[f"block{b}.layer{i}.kernel"] = (k, cin, 3, 3)
            shapes[f"block{b}.layer{i}.bias"] = (k,)
        if trans is not None:
            shapes[f"transition{b}.kernel"] = (trans, ins[-1] + k, 1, 1)
    for gate in ("z", "r", "h"):
        shapes[f"gru.W_{gate}"] = (f, hd)
    for gate in ("z", "r", "h"):
        shapes[f"gru.U_{gate}"] = (hd, hd)
    for gate in ("z", "r", "h"):
        shapes[f"gru.b_{gate}"] = (hd,)
    shapes["head.weight"] = (hd, config.num_labels)
    shapes["head.bias"] = (config.num_labels,)
    return shapes


def is_bias(name: str) -> bool:
    leaf = name.rsplit(".", 1)[-1]
    return leaf == "bias" or leaf.startswith("b_")


def build_model(config: ModelConfig, seed: int) -> ModelParams:
    """Glorot-uniform weights (one derived seed per tensor), zero biases."""
    params: ModelParams = {}
    for i, (name, shape) in enumerate(param_shapes(config).items()):
        if is_bias(name):
            params[name] = tensor_create(shape, 0.0)
        else:
            sub = int(np.random.SeedSequence([seed, i]).generate_state(1)[0])
            params[name] = tensor_create(shape, Uniform(glorot_bound(shape), sub))
    return params


def parameter_count(params: Mapping[str, np.ndarray]) -> int:
    return int(sum(v.size for v in params.values()))


def flatten(params: Mapping[str, np.ndarray]) -> np.ndarray:
    return np.concatenate([v.reshape(-1) for v in params.values()])


def unflatten(vector: np.ndarray, like: Mapping[str, np.ndarray]) -> ModelParams:
    need = sum(ref.size for ref in like.values())
    if vector.size != need:
        raise ShapeError(f"unflatten: vector has {vector.size} values, model needs {need}")
    out: ModelParams = {}
    pos = 0
    for name, ref in like.items():
        out[name] = vector[pos:pos + ref.size].reshape(ref.shape).copy()
        pos += ref.size
    return out


def copy_params(params: Mapping[str, np.ndarray]) -> ModelParams:
    return {name: v.copy() for name, v in params.items()}


# graph builders

def encoder_graph(g: Graph, x: Var, P: Mapping[str, Var], config: ModelConfig) -> Var:
    """``x``: one slice ``[1,H,W]`` -> feature vector ``[F]``."""
    h = x
    for b, (ins, trans) in enumerate(channel_plan(config)):
        feats = [h]
        for i in range(len(ins)):
            inp = feats[0] if len(feats) == 1 else g.concat_channels(feats)
            out = g.conv2d(inp, P[f"block{b}.layer{i}.kernel"], stride=1, pad=1,
                           bias=P[f"block{b}.layer{i}.bias"])
            feats.append(g.relu(out))
        h = g.concat_channels(feats)
        if trans is not None:
            h = g.pool_avg(g.conv2d(h, P[f"transition{b}.kernel"]), 2)
    return g.global_pool_avg(h)


def time_distributed_graph(g: Graph, volume: np.ndarray, P: Mapping[str, Var],
                           config: ModelConfig) -> Var:
    """Shared encoder on every slice of ``[S,1,H,W]`` -> ``[S,F]``."""
    _check_volume(volume, config)
    rows = [encoder_graph(g, g.const(volume[s]), P, config) for s in range(volume.shape[0])]
    return g.stack(rows)


def gru_graph(g: Graph, features: Var, P: Mapping[str, Var]) -> Var:
    """``[S,F]`` -> all hidden states ``[S,Hd]``; ``h_0 = 0``."""
    s_len, f = features.shape
    w_z = P["gru.W_z"]
    if w_z.shape[0] != f:
        raise ShapeError(f"gru: feature length {f} != W_z rows {w_z.shape[0]}")
    hd = w_z.shape[1]
    ones = g.const(np.ones((1, hd)))
    h = g.const(np.zeros((1, hd)))
    states = []
    for t in range(s_len):
        x_t = g.reshape(g.row(features, t), (1, f))
        z = g.sigmoid(g.add_bias(x_t @ P["gru.W_z"] + h @ P["gru.U_z"], P["gru.b_z"]))
        r = g.sigmoid(g.add_bias(x_t @ P["gru.W_r"] + h @ P["gru.U_r"], P["gru.b_r"]))
        cand = g.tanh(g.add_bias(x_t @ P["gru.W_h"] + (r * h) @ P["gru.U_h"], P["gru.b_h"]))
        h = (ones - z) * h + z * cand
        states.append(h)
    return g.reshape(g.stack(states), (s_len, hd))


def classify_graph(g: Graph, hidden: Var, P: Mapping[str, Var]) -> Var:
    return g.add_bias(hidden @ P["head.weight"], P["head.bias"])


def volume_logits_graph(g: Graph, volume: np.ndarray, P: Mapping[str, Var],
                        config: ModelConfig) -> Var:
    return classify_graph(g, gru_graph(g, time_distributed_graph(g, volume, P, config), P), P)


# array wrappers

def _run(params: Mapping[str, np.ndarray], build) -> np.ndarray:
    g = Graph()
    P = {name: g.const(v) for name, v in params.items()}
    return build(g, P).value


def _check_volume(volume: np.ndarray, config: ModelConfig) -> None:
    hw = config.input_hw
    if volume.ndim != 4 or volume.shape[1:] != (1, hw, hw):
        raise ShapeError(f"volume shape {volume.shape}, expected [S,1,{hw},{hw}]")
    if volume.shape[0] != config.slices_S:
        raise ShapeError(f"volume has {volume.shape[0]} slices, config expects {config.slices_S}")


def encoder_forward(slice_: np.ndarray, params: Mapping[str, np.ndarray],
                    config: ModelConfig) -> np.ndarray:
    hw = config.input_hw
    if slice_.shape != (1, hw, hw):
        raise ShapeError(f"slice shape {slice_.shape}, expected (1, {hw}, {hw})")
    return _run(params, lambda g, P: encoder_graph(g, g.const(slice_), P, config))


def time_distributed_forward(volume: np.ndarray, params: Mapping[str, np.ndarray],
                             config: ModelConfig) -> np.ndarray:
    return _run(params, lambda g, P: time_distributed_graph(g, volume, P, config))


def gru_forward(features: np.ndarray, params: Mapping[str, np.ndarray]) -> np.ndarray:
    features = np.asarray(features, dtype=np.float64)
    if features.ndim != 2:
        raise ShapeError(f"gru: expected [S,F] features, got {features.shape}")
    return _run(params, lambda g, P: gru_graph(g, g.const(features), P))


def classify(hidden: np.ndarray, params: Mapping[str, np.ndarray]) -> tuple[np.ndarray, np.ndarray]:
    """Per-slice logits ``[S,6]`` and volume scores ``[6]`` (max slice probability)."""
    hidden = np.asarray(hidden, dtype=np.float64)
    if hidden.ndim != 2 or hidden.shape[1] != params["head.weight"].shape[0]:
        raise ShapeError(f"classify: hidden {hidden.shape} vs head {params['head.weight'].shape}")
    logits = _run(params, lambda g, P: classify_graph(g, g.const(hidden), P))
    return logits, volume_scores(logits)


def volume_scores(logits: np.ndarray) -> np.ndarray:
    return sigmoid(logits).max(axis=0)


def predict(volume: np.ndarray, params: Mapping[str, np.ndarray],
            config: ModelConfig) -> np.ndarray:
    """Volume-level label probabilities ``[6]``."""
    return volume_scores(_run(params, lambda g, P: volume_logits_graph(g, volume, P, config)))


# training

def batch_loss_builder(batch: Sequence, config: ModelConfig):
    """Loss builder: mean over volumes and slices of the per-slice label BCE."""

    def build(g: Graph, P: Mapping[str, Var]) -> Var:
        total = None
        for sample in batch:
            loss = g.bce_with_logits(volume_logits_graph(g, sample.volume, P, config),
                                     sample.slice_labels)
            total = loss if total is None else total + loss
        return g.scale(total, 1.0 / len(batch))

    return build


def train_step(params: Mapping[str, np.ndarray], batch: Sequence, lr: float,
               config: ModelConfig) -> tuple[ModelParams, float]:
    """One plain SGD step on the batch; returns new params and the pre-step loss."""
    if not batch:
        raise ContractError("train_step: empty batch")
    if not lr >= 0:
        raise DomainError(f"train_step: lr must be >= 0, got {lr}")
    loss, grads = value_and_grad(batch_loss_builder(batch, config), params)
    new = {name: v - lr * grads[name] for name, v in params.items()}
    return new, loss


def prune_by_magnitude(params: Mapping[str, np.ndarray],
                       fraction: float) -> tuple[ModelParams, dict[str, np.ndarray]]:
    """Globally zero the smallest-magnitude weights; biases are never pruned.

    Keeps ``ceil((1 - fraction) * total_weights)`` coordinates, the product
    rounded to 9 decimals first so 0.7 * 10 keeps 3. Ties on magnitude go to
    the earlier parameter (dict order), then the lower flat index. Returns the
    pruned params and a keep-mask per parameter.
    """
    if not 0.0 <= fraction <= 1.0:
        raise DomainError(f"prune fraction {fraction} outside [0, 1]")
    weights = [n for n in params if not is_bias(n)]
    flat = np.concatenate([np.abs(params[n]).reshape(-1) for n in weights]) if weights else np.zeros(0)
    total = flat.size
    keep = math.ceil(round((1.0 - fraction) * total, 9))
    order = np.argsort(flat, kind="stable")
    keep_flat = np.ones(total, dtype=bool)
    keep_flat[order[:total - keep]] = False

    pruned: ModelParams = {}
    masks: dict[str, np.ndarray] = {}
    pos = 0
    for name, v in params.items():
        if is_bias(name):
            mask = np.ones(v.shape, dtype=bool)
        else:
            mask = keep_flat[pos:pos + v.size].reshape(v.shape)
            pos += v.size
        masks[name] = mask
        pruned[name] = np.where(mask, v, 0.0)
    return pruned, masks
