"""FedAvg orchestration: broadcast, local updates, size-weighted aggregation."""

from __future__ import annotations

import logging
import math
from collections import OrderedDict
from dataclasses import asdict, dataclass, field, replace
from fractions import Fraction
from typing import Callable, Mapping, Sequence

import numpy as np
import torch

from .channel import stream_seed
from .codec import CodecConfig, init_params
from .data import ClientAssignment, ImageDataset, PartitionSpec
from .trainer import DivergenceError, TrainConfig, epoch_mean, evaluate, local_train

log = logging.getLogger(__name__)

Params = Mapping[str, torch.Tensor]


class AggregationError(ValueError):
    pass


class FederationError(RuntimeError):
    pass


@dataclass(frozen=True)
class FederationConfig:
    num_clients: int = 3
    rounds: int = 60
    participants_per_round: int = 3
    partition: PartitionSpec = field(default_factory=PartitionSpec)
    train: TrainConfig = field(default_factory=TrainConfig)
    eval_samples: int = 500
    seed: int = 0

    def __post_init__(self) -> None:
        if self.rounds < 1:
            raise ValueError("rounds must be >= 1")
        if not 1 <= self.participants_per_round <= self.num_clients:
            raise ValueError("participants_per_round must be in [1, num_clients]")
        if self.partition.num_clients != self.num_clients:
            raise ValueError("partition.num_clients must equal num_clients")


@dataclass
class RoundLog:
    t: int  # 1-based round index
    client_ids: list[int]
    client_losses: list[float]
    client_sizes: list[int]
    global_loss: float
    psnr_eval: float | None = None
    ssim_eval: float | None = None

    def to_record(self) -> dict:
        return {
            "t": self.t,
            "client_ids": self.client_ids,
            "loss_k": self.client_losses,
            "sizes": self.client_sizes,
            "loss_global": self.global_loss,
            "psnr_eval": self.psnr_eval,
            "ssim_eval": self.ssim_eval,
        }


def aggregation_weights(sizes: Sequence[int]) -> list[Fraction]:
    """Exact |D_k| / sum |D_j| weights; they sum to exactly 1."""
    if not sizes or any(int(s) <= 0 for s in sizes):
        raise ValueError("sizes must be a non-empty list of positive integers")
    total = sum(int(s) for s in sizes)
    return [Fraction(int(s), total) for s in sizes]


def fedavg(client_params: Sequence[Params], sizes: Sequence[int]) -> "OrderedDict[str, torch.Tensor]":
    """Size-weighted parameter average, accumulated in float64 in client order."""
    if len(client_params) != len(sizes):
        raise AggregationError("one size is needed per client ParameterSet")
    weights = [float(w) for w in aggregation_weights(sizes)]
    ref = client_params[0]
    out: OrderedDict[str, torch.Tensor] = OrderedDict()
    for name, ref_arr in ref.items():
        acc = torch.zeros(ref_arr.shape, dtype=torch.float64)
        for k, (p, w) in enumerate(zip(client_params, weights)):
            if name not in p:
                raise AggregationError(f"client {k} is missing array {name!r}")
            if p[name].shape != ref_arr.shape:
                raise AggregationError(
                    f"shape mismatch for array {name!r}: client {k} has {tuple(p[name].shape)}, expected {tuple(ref_arr.shape)}"
                )
            acc += w * p[name].detach().to(torch.float64)
        out[name] = acc.to(ref_arr.dtype)
    for k, p in enumerate(client_params):
        extra = set(p) - set(ref)
        if extra:
            raise AggregationError(f"client {k} has unexpected arrays {sorted(extra)}")
    return out


def global_loss(client_losses: Sequence[float], sizes: Sequence[int]) -> float:
    if len(client_losses) != len(sizes):
        raise ValueError("client_losses and sizes must have the same length")
    return float(sum(w * Fraction(float(l)) for w, l in zip(aggregation_weights(sizes), client_losses)))


def select_participants(round: int, cfg: FederationConfig) -> list[int]:
    """Uniform sample without replacement of ``participants_per_round`` client ids."""
    if cfg.participants_per_round == cfg.num_clients:
        return list(range(cfg.num_clients))
    rng = np.random.default_rng(stream_seed(cfg.seed, "select", round))
    return sorted(int(k) for k in rng.choice(cfg.num_clients, cfg.participants_per_round, replace=False))


def _eval_subset(test_data: ImageDataset | None, n: int, seed: int) -> ImageDataset | None:
    if test_data is None or n <= 0:
        return None
    if n >= len(test_data):
        return test_data
    idx = np.sort(np.random.default_rng(stream_seed(seed, "eval-subset")).permutation(len(test_data))[:n])
    return test_data.subset(idx)


def run_federated_training(
    cfg: FederationConfig,
    codec_cfg: CodecConfig,
    train_data: ImageDataset,
    assignment: ClientAssignment,
    test_data: ImageDataset | None = None,
    on_round: Callable[[RoundLog, Params], None] | None = None,
    init: Params | None = None,
) -> tuple["OrderedDict[str, torch.Tensor]", list[RoundLog]]:
    """Algorithm: broadcast the global snapshot, train the selected clients from it, FedAvg, log."""
    if assignment.num_clients != cfg.num_clients:
        raise ValueError(f"assignment has {assignment.num_clients} clients, config expects {cfg.num_clients}")
    assignment.check_cover(len(train_data))
    shards = [train_data.subset(ix) for ix in assignment.client_indices]
    global_params = OrderedDict((k, v.clone()) for k, v in (init or init_params(codec_cfg)).items())
    eval_data = _eval_subset(test_data, cfg.eval_samples, cfg.seed)
    n_max = cfg.train.local_epochs
    logs: list[RoundLog] = []

    for t in range(1, cfg.rounds + 1):
        selected = select_participants(t, cfg)
        updates, losses, sizes = [], [], []
        for k in selected:
            try:
                new_params, trace, bsizes = local_train(
                    global_params, shards[k], cfg.train, codec_cfg, stream=("client", k), epoch_offset=(t - 1) * n_max
                )
            except DivergenceError as exc:
                log.error("round %d: client %d diverged at batch %d (loss=%s)", t, k, exc.batch_index, exc.loss)
                raise FederationError(f"round {t}, client {k}: {exc}") from exc
            per_epoch = math.ceil(len(shards[k]) / cfg.train.batch_size)
            updates.append(new_params)
            losses.append(epoch_mean(trace, bsizes, per_epoch))
            sizes.append(len(shards[k]))
        global_params = fedavg(updates, sizes)
        entry = RoundLog(t, selected, losses, sizes, global_loss(losses, sizes))
        if eval_data is not None:
            report = evaluate(global_params, eval_data, codec_cfg, cfg.train.channel,
                              [cfg.train.channel.snr_db], model_id="global")
            entry.psnr_eval, entry.ssim_eval = report.rows[0].psnr_db, report.rows[0].ssim
        log.info("round %d clients=%s loss=%.6f psnr=%s", t, selected, entry.global_loss, entry.psnr_eval)
        logs.append(entry)
        if on_round is not None:
            on_round(entry, global_params)
    return global_params, logs


def run_local_baselines(
    cfg: FederationConfig,
    codec_cfg: CodecConfig,
    train_data: ImageDataset,
    assignment: ClientAssignment,
    init: Params | None = None,
) -> list[tuple["OrderedDict[str, torch.Tensor]", list[float]]]:
    """Train each client alone for rounds * local_epochs epochs from the shared initialization.

    Returns per client the final ParameterSet and its per-epoch mean loss.
    """
    start = init or init_params(codec_cfg)
    epochs = cfg.rounds * cfg.train.local_epochs
    out = []
    for k, ix in enumerate(assignment.client_indices):
        shard = train_data.subset(ix)
        tcfg = replace(cfg.train, local_epochs=epochs)
        params, trace, bsizes = local_train(start, shard, tcfg, codec_cfg, stream=("client", k))
        per_epoch = math.ceil(len(shard) / cfg.train.batch_size)
        curve = [epoch_mean(trace[: (e + 1) * per_epoch], bsizes[: (e + 1) * per_epoch], per_epoch)
                 for e in range(epochs)]
        out.append((params, curve))
    return out


def config_dict(cfg: FederationConfig) -> dict:
    return asdict(cfg)
