"""End-to-end local training through the channel, and SNR-grid evaluation."""

from __future__ import annotations

import logging
import math
from collections import OrderedDict
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np
import torch

from . import metrics
from .channel import ChannelSpec, equalize, make_rng, stream_seed, transmit
from .codec import CodecConfig, STSCCodec, load_into, snapshot
from .data import ImageDataset
from .storage import MetricsRow

log = logging.getLogger(__name__)


class DivergenceError(RuntimeError):
    def __init__(self, batch_index: int, loss: float, context: str = "") -> None:
        self.batch_index = batch_index
        self.loss = loss
        super().__init__(f"non-finite loss {loss} at batch {batch_index}{context}")


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-3
    batch_size: int = 32
    local_epochs: int = 1
    optimizer: str = "adam"
    channel: ChannelSpec = field(default_factory=ChannelSpec)
    snr_mode: str = "fixed"  # or "random": uniform in snr_range per batch
    snr_range: tuple[float, float] = (0.0, 18.0)
    grad_clip: float | None = 1.0
    seed: int = 0

    def __post_init__(self) -> None:
        if not self.learning_rate >= 0:
            raise ValueError("learning_rate must be non-negative")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.local_epochs < 1:
            raise ValueError("local_epochs must be >= 1")
        if self.optimizer not in ("adam", "sgd"):
            raise ValueError(f"optimizer must be 'adam' or 'sgd', got {self.optimizer!r}")
        if self.snr_mode not in ("fixed", "random"):
            raise ValueError(f"snr_mode must be 'fixed' or 'random', got {self.snr_mode!r}")


def mse_loss(x: torch.Tensor, x_hat: torch.Tensor) -> torch.Tensor:
    return metrics.mse(x, x_hat)


def make_optimizer(name: str, params, lr: float) -> torch.optim.Optimizer:
    if name == "adam":
        return torch.optim.Adam(params, lr=lr, betas=(0.9, 0.999), eps=1e-8)
    return torch.optim.SGD(params, lr=lr)


def forward_through_channel(model: STSCCodec, images: torch.Tensor, spec: ChannelSpec,
                            rng: torch.Generator) -> torch.Tensor:
    y = transmit(model.encoder(images), spec, rng)
    return model.decoder(equalize(y, spec).symbols)


def build_model(params: Mapping[str, torch.Tensor], codec_cfg: CodecConfig) -> STSCCodec:
    dtype = next(iter(params.values())).dtype
    return load_into(STSCCodec(codec_cfg).to(dtype), params)


def local_train(
    params: Mapping[str, torch.Tensor],
    data: ImageDataset,
    cfg: TrainConfig,
    codec_cfg: CodecConfig,
    stream: tuple = (),
    epoch_offset: int = 0,
) -> tuple["OrderedDict[str, torch.Tensor]", list[float], list[int]]:
    """Run ``cfg.local_epochs`` epochs of mini-batch training from ``params``.

    Returns the new ParameterSet, the per-batch loss trace and the matching batch
    sizes. The input ParameterSet is never modified. ``stream`` labels the RNG
    streams (e.g. ``("client", k)``); shuffling and channel draws are keyed by
    ``(stream, epoch_offset + epoch)``, so splitting a run into consecutive calls
    reproduces the same data order and channel realizations.
    """
    model = build_model(params, codec_cfg)
    opt = make_optimizer(cfg.optimizer, model.parameters(), cfg.learning_rate)
    losses: list[float] = []
    sizes: list[int] = []
    model.train()
    step = 0
    for epoch in range(epoch_offset, epoch_offset + cfg.local_epochs):
        shuffle_seed = stream_seed(cfg.seed, "shuffle", *stream, epoch)
        rng = make_rng(cfg.channel.seed, "train", *stream, epoch)
        snr_rng = np.random.default_rng(stream_seed(cfg.seed, "snr", *stream, epoch))
        for batch in data.batches(cfg.batch_size, shuffle=True, seed=shuffle_seed):
            x = batch.data.to(next(model.parameters()).dtype)
            spec = cfg.channel
            if cfg.snr_mode == "random":
                spec = spec.with_snr(float(snr_rng.uniform(*cfg.snr_range)))
            opt.zero_grad(set_to_none=True)
            try:
                loss = mse_loss(x, forward_through_channel(model, x, spec, rng))
            except FloatingPointError:
                raise DivergenceError(step, math.nan, f" (epoch {epoch}, stream {stream})") from None
            value = loss.item()
            if not math.isfinite(value):
                raise DivergenceError(step, value, f" (epoch {epoch}, stream {stream})")
            loss.backward()
            if cfg.grad_clip is not None:
                torch.nn.utils.clip_grad_norm_(model.parameters(), cfg.grad_clip)
            opt.step()
            losses.append(value)
            sizes.append(len(batch))
            step += 1
    return snapshot(model), losses, sizes


def epoch_mean(losses: Sequence[float], sizes: Sequence[int], batches_per_epoch: int) -> float:
    """Sample-weighted mean loss over the last epoch of a trace."""
    ls = np.asarray(losses[-batches_per_epoch:], dtype=np.float64)
    ws = np.asarray(sizes[-batches_per_epoch:], dtype=np.float64)
    return float((ls * ws).sum() / ws.sum())


@dataclass
class EvalRow:
    snr_db: float
    mse: float
    psnr_db: float
    ssim: float


@dataclass
class EvalReport:
    rows: list[EvalRow]
    channel: str
    model_id: str = "model"

    def psnr_at(self, snr_db: float) -> float:
        for r in self.rows:
            if r.snr_db == snr_db:
                return r.psnr_db
        raise KeyError(snr_db)

    def to_metrics_rows(self, experiment_id: str, round: int = 0, **extras) -> list[MetricsRow]:
        return [
            MetricsRow.from_mse(experiment_id, self.channel, r.snr_db, round, r.mse, r.ssim,
                                kind="eval", series=self.model_id, **extras)
            for r in self.rows
        ]


@torch.no_grad()
def evaluate(
    params: Mapping[str, torch.Tensor],
    test_data: ImageDataset,
    codec_cfg: CodecConfig,
    channel: ChannelSpec,
    snr_grid: Sequence[float],
    repeats: int = 1,
    batch_size: int = 250,
    model_id: str = "model",
) -> EvalReport:
    """Average MSE/SSIM over the test split and ``repeats`` channel draws per SNR.

    PSNR is reported from the averaged MSE, so the PSNR column is recomputable
    from the MSE column. ``math.inf`` in the grid means a noiseless channel.
    """
    if not len(snr_grid):
        raise ValueError("snr_grid must not be empty")
    if repeats < 1:
        raise ValueError("repeats must be >= 1")
    model = build_model(params, codec_cfg).eval()
    dtype = next(model.parameters()).dtype
    rows = []
    for gi, snr in enumerate(snr_grid):
        noiseless = math.isinf(snr)
        spec = channel if noiseless else channel.with_snr(snr)
        sq_err, n_vals, ssim_sum, n_img = 0.0, 0, 0.0, 0
        for rep in range(repeats):
            rng = make_rng(channel.seed, "eval", gi, rep)
            for batch in test_data.batches(batch_size):
                x = batch.data.to(dtype)
                s = model.encoder(x)
                y = transmit(s, spec, rng, noise_variance=0.0 if noiseless else None)
                x_hat = model.decoder(equalize(y, spec).symbols)
                sq_err += float(((x - x_hat) ** 2).sum(dtype=torch.float64))
                n_vals += x.numel()
                ssim_sum += float(metrics.ssim_per_image(x, x_hat).sum())
                n_img += x.shape[0]
        m = sq_err / n_vals
        rows.append(EvalRow(float(snr), m, metrics.psnr_from_mse(m), ssim_sum / n_img))
    return EvalReport(rows, channel.kind, model_id)
