"""Federated averaging simulation.

Every random draw comes from a generator keyed by the simulation seed, a
purpose tag and the (round, client) coordinates it belongs to, so results do
not depend on the order or concurrency in which clients are processed.
Aggregation always folds updates in ascending ``client_id`` order.
"""

from __future__ import annotations

import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Callable, Mapping, Sequence

import numpy as np

from .errors import ContractError, DomainError, ProtocolError, UnrecoverableSumError
from .metrics import RoundReport, evaluate
from .model import ModelConfig, ModelParams, copy_params, parameter_count, train_step

_AVAILABILITY, _SELECTION, _SHUFFLE, _NOISE, _MASK, _DROPOUT = range(1, 7)

MASK_STD = 1.0


def keyed_rng(seed: int | Sequence[int], *key: int) -> np.random.Generator:
    base = [int(seed)] if np.isscalar(seed) else [int(s) for s in seed]
    return np.random.default_rng(base + [int(k) for k in key])


@dataclass
class ClientState:
    client_id: int
    shard: list[int]
    availability: float = 1.0
    local_epochs: int = 1
    batch_size: int = 8

    def __post_init__(self):
        if not 0.0 <= self.availability <= 1.0:
            raise DomainError(f"client {self.client_id}: availability {self.availability} outside [0, 1]")
        if self.local_epochs < 1 or self.batch_size < 1:
            raise ContractError(f"client {self.client_id}: local_epochs and batch_size must be >= 1")


@dataclass
class ModelUpdate:
    """What a client sends upstream: weights, sample count and its mean local loss."""

    params: ModelParams
    sample_count: int
    client_id: int
    train_loss: float = float("nan")


@dataclass(frozen=True)
class DPConfig:
    clip_norm: float = math.inf
    sigma: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if not self.clip_norm > 0:
            raise DomainError(f"clip_norm must be > 0, got {self.clip_norm}")
        if not self.sigma >= 0:
            raise DomainError(f"sigma must be >= 0, got {self.sigma}")
        if self.sigma > 0 and math.isinf(self.clip_norm):
            raise DomainError("sigma > 0 needs a finite clip_norm (noise std is sigma * clip_norm)")


@dataclass(frozen=True)
class SimConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    rounds: int = 1
    lr: float = 0.1
    fraction: float = 1.0
    local_epochs: int = 1
    batch_size: int = 8
    availability: float = 1.0
    dp: DPConfig | None = None
    masking: bool = False
    mask_dropout: float = 0.0
    seed: int = 0
    workers: int = 1
    record_timing: bool = False


@dataclass
class FederatedRun:
    reports: list[RoundReport]
    params: ModelParams


def schedule_round(clients: Sequence[ClientState], fraction: float, round_index: int,
                   seed: int) -> list[int]:
    """Availability draw per client, then a uniform subset of the available ones.

    Clients with empty shards are never available. Returns ascending ids; an
    empty list means the round is skipped.
    """
    if not 0.0 < fraction <= 1.0:
        raise DomainError(f"fraction {fraction} outside (0, 1]")
    available = [c.client_id for c in clients
                 if c.shard and keyed_rng(seed, _AVAILABILITY, round_index, c.client_id).random() < c.availability]
    if not available:
        return []
    m = math.ceil(round(fraction * len(available), 9))
    picks = keyed_rng(seed, _SELECTION, round_index).choice(len(available), size=m, replace=False)
    return sorted(available[i] for i in picks)


def local_train(client: ClientState, global_params: Mapping[str, np.ndarray], dataset: Sequence,
                lr: float, config: ModelConfig, round_index: int = 0, seed: int = 0) -> ModelUpdate:
    """``local_epochs`` shuffled passes of SGD over the client's shard."""
    if not client.shard:
        raise ContractError(f"client {client.client_id} has an empty shard")
    params = copy_params(global_params)
    losses = []
    for epoch in range(client.local_epochs):
        order = keyed_rng(seed, _SHUFFLE, round_index, client.client_id, epoch).permutation(client.shard)
        for start in range(0, len(order), client.batch_size):
            batch = [dataset[i] for i in order[start:start + client.batch_size]]
            params, loss = train_step(params, batch, lr, config)
            losses.append(loss)
    return ModelUpdate(params, len(client.shard), client.client_id, float(np.mean(losses)))


def _check_names(updates: Sequence[ModelUpdate]) -> None:
    ref = updates[0].params
    for u in updates[1:]:
        if list(u.params) != list(ref) or any(u.params[n].shape != ref[n].shape for n in ref):
            raise ProtocolError(f"client {u.client_id} sent a parameter set that differs from "
                                f"client {updates[0].client_id}")


def fedavg_aggregate(updates: Sequence[ModelUpdate]) -> ModelParams:
    """Sample-count weighted mean of client weights, folded in ascending client id."""
    if not updates:
        raise ContractError("fedavg_aggregate: no updates")
    _check_names(updates)
    ordered = sorted(updates, key=lambda u: u.client_id)
    total = sum(u.sample_count for u in ordered)
    out: ModelParams = {}
    for name in ordered[0].params:
        acc = np.zeros_like(ordered[0].params[name])
        for u in ordered:
            acc = acc + (u.sample_count / total) * u.params[name]
        stacked = np.stack([u.params[name] for u in ordered])
        # rounding can push the mean one ulp outside the participants' hull
        out[name] = np.clip(acc, stacked.min(axis=0), stacked.max(axis=0))
    return out


def global_norm(delta: Mapping[str, np.ndarray]) -> float:
    return math.sqrt(sum(float(np.sum(v * v)) for v in delta.values()))


def clip_update(delta: Mapping[str, np.ndarray], clip_norm: float) -> ModelParams:
    """Scale ``delta`` so its global L2 norm is at most ``clip_norm``."""
    if not clip_norm > 0:
        raise DomainError(f"clip_norm must be > 0, got {clip_norm}")
    norm = global_norm(delta)
    if norm <= clip_norm:
        return dict(delta)
    factor = clip_norm / norm
    while True:
        clipped = {name: v * factor for name, v in delta.items()}
        if global_norm(clipped) <= clip_norm:
            return clipped
        factor = np.nextafter(factor, 0.0)


def gaussian_mechanism(delta: Mapping[str, np.ndarray], sigma: float, clip_norm: float,
                       seed: int | Sequence[int]) -> ModelParams:
    """Add i.i.d. N(0, (sigma * clip_norm)^2) noise per coordinate; sigma=0 is the identity."""
    if not sigma >= 0:
        raise DomainError(f"sigma must be >= 0, got {sigma}")
    if sigma == 0:
        return dict(delta)
    std = sigma * clip_norm
    if not math.isfinite(std):
        raise DomainError("noise std must be finite")
    rng = keyed_rng(seed, _NOISE)
    return {name: v + rng.normal(0.0, std, size=v.shape) for name, v in delta.items()}


def privatize(update: ModelUpdate, global_params: Mapping[str, np.ndarray], dp: DPConfig,
              round_index: int) -> ModelUpdate:
    """Clip the weight delta and add Gaussian noise; untouched updates pass through bitwise."""
    delta = {name: update.params[name] - global_params[name] for name in global_params}
    clipped = clip_update(delta, dp.clip_norm)
    if dp.sigma == 0 and all(clipped[n] is delta[n] for n in delta):
        return update
    noised = gaussian_mechanism(clipped, dp.sigma, dp.clip_norm, (dp.seed, round_index, update.client_id))
    params = {name: global_params[name] + noised[name] for name in global_params}
    return replace(update, params=params)


def mask_pairwise(updates: Sequence[ModelUpdate], seed: int | Sequence[int]) -> list[ModelUpdate]:
    """Add ``m_ij`` to client i and subtract it from client j for every pair i < j.

    Masks are N(0, MASK_STD^2) per coordinate, keyed by the pair's client ids,
    so only the coordinate-wise sum over all clients is preserved.
    """
    if len(updates) < 2:
        raise ContractError(f"mask_pairwise needs >= 2 updates, got {len(updates)}")
    _check_names(updates)
    ordered = sorted(updates, key=lambda u: u.client_id)
    masked = [copy_params(u.params) for u in ordered]
    for a in range(len(ordered)):
        for b in range(a + 1, len(ordered)):
            rng = keyed_rng(seed, _MASK, ordered[a].client_id, ordered[b].client_id)
            for name, v in masked[a].items():
                m = rng.normal(0.0, MASK_STD, size=v.shape)
                masked[a][name] = v + m
                masked[b][name] = masked[b][name] - m
    return [replace(u, params=p) for u, p in zip(ordered, masked)]


def secure_sum(masked: Sequence[ModelUpdate], expected_ids: Sequence[int]) -> ModelParams:
    """Coordinate-wise sum of masked updates; every masked client must be present."""
    got = sorted(u.client_id for u in masked)
    missing = sorted(set(expected_ids) - set(got))
    if missing:
        raise UnrecoverableSumError(
            f"clients {missing} dropped after masking; their pairwise masks cannot be removed")
    ordered = sorted(masked, key=lambda u: u.client_id)
    out = {name: np.zeros_like(v) for name, v in ordered[0].params.items()}
    for u in ordered:
        for name in out:
            out[name] = out[name] + u.params[name]
    return out


def masked_fedavg(updates: Sequence[ModelUpdate], seed: int | Sequence[int],
                  dropped: Sequence[int] = ()) -> ModelParams:
    """FedAvg through pairwise masking: clients mask ``n_k * w_k``, the server divides the sum."""
    _check_names(updates)
    total = sum(u.sample_count for u in updates)
    weighted = [replace(u, params={n: u.sample_count * v for n, v in u.params.items()}) for u in updates]
    masked = mask_pairwise(weighted, seed)
    received = [u for u in masked if u.client_id not in set(dropped)]
    summed = secure_sum(received, [u.client_id for u in updates])
    return {name: v / total for name, v in summed.items()}


def comms_account(parameter_count: int, participants: int) -> tuple[int, int]:
    """(downlink, uplink) bytes: float32 weights each way plus an 8-byte sample count up."""
    if parameter_count < 0 or participants < 0:
        raise DomainError("parameter_count and participants must be >= 0")
    return participants * 4 * parameter_count, participants * (4 * parameter_count + 8)


def make_clients(shards: Sequence[Sequence[int]], config: SimConfig) -> list[ClientState]:
    return [ClientState(i, list(s), config.availability, config.local_epochs, config.batch_size)
            for i, s in enumerate(shards)]


def run_federated(config: SimConfig, dataset: Sequence, shards: Sequence[Sequence[int]],
                  eval_set: Sequence, params: Mapping[str, np.ndarray],
                  on_round: Callable[[RoundReport, ModelParams], None] | None = None) -> FederatedRun:
    """Run ``config.rounds`` FedAvg rounds starting from ``params``.

    Clients only ever hand :class:`ModelUpdate` values to the server side.
    """
    clients = {c.client_id: c for c in make_clients(shards, config)}
    global_params = copy_params(params)
    n_params = parameter_count(global_params)
    reports = []
    pool = ThreadPoolExecutor(config.workers) if config.workers > 1 else None
    try:
        for r in range(1, config.rounds + 1):
            started = time.perf_counter()
            selected = schedule_round(list(clients.values()), config.fraction, r, config.seed)
            train_loss = None
            if selected:
                snapshot = global_params

                def work(cid: int) -> ModelUpdate:
                    return local_train(clients[cid], snapshot, dataset, config.lr, config.model, r, config.seed)

                updates = list(pool.map(work, selected)) if pool else [work(c) for c in selected]
                if config.dp is not None:
                    updates = [privatize(u, snapshot, config.dp, r) for u in updates]
                total = sum(u.sample_count for u in updates)
                train_loss = float(sum(u.sample_count / total * u.train_loss for u in updates))
                if config.masking and len(updates) >= 2:
                    dropped = [cid for cid in selected
                               if keyed_rng(config.seed, _DROPOUT, r, cid).random() < config.mask_dropout]
                    global_params = masked_fedavg(updates, (config.seed, r), dropped)
                else:
                    global_params = fedavg_aggregate(updates)
            down, up = comms_account(n_params, len(selected))
            ev = evaluate(global_params, eval_set, config.model)
            report = RoundReport(
                round_index=r, selected=list(selected), train_loss=train_loss,
                accuracy=ev.accuracy, ap=ev.ap, mean_ap=ev.mean_ap, ap_undefined=ev.ap_undefined,
                uplink_bytes=up, downlink_bytes=down,
                wall_seconds=time.perf_counter() - started if config.record_timing else None)
            reports.append(report)
            if on_round is not None:
                on_round(report, global_params)
    finally:
        if pool is not None:
            pool.shutdown()
    return FederatedRun(reports, global_params)


def run_centralized(config: SimConfig, dataset: Sequence, train_indices: Sequence[int],
                    eval_set: Sequence, params: Mapping[str, np.ndarray],
                    on_epoch: Callable[[RoundReport, ModelParams], None] | None = None) -> FederatedRun:
    """Single-worker baseline: one pass per round over all training indices.

    Batch order uses the same keyed shuffle as client 0 of a federated run, so a
    one-client, full-participation federation reproduces it bitwise.
    """
    worker = ClientState(0, list(train_indices), 1.0, config.local_epochs, config.batch_size)
    current = copy_params(params)
    reports = []
    for r in range(1, config.rounds + 1):
        started = time.perf_counter()
        update = local_train(worker, current, dataset, config.lr, config.model, r, config.seed)
        current = update.params
        ev = evaluate(current, eval_set, config.model)
        report = RoundReport(
            round_index=r, selected=[], train_loss=update.train_loss, accuracy=ev.accuracy,
            ap=ev.ap, mean_ap=ev.mean_ap, ap_undefined=ev.ap_undefined, uplink_bytes=0,
            downlink_bytes=0,
            wall_seconds=time.perf_counter() - started if config.record_timing else None)
        reports.append(report)
        if on_epoch is not None:
            on_epoch(report, current)
    return FederatedRun(reports, current)
