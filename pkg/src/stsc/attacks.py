"""Privacy attacks: gradient inversion (DLG) and feature inversion of intercepted symbols."""

from __future__ import annotations

import logging
import math
from collections import OrderedDict
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np
import torch

from . import metrics
from .channel import ChannelSpec, SymbolVector, equalize, make_rng, transmit
from .codec import CodecConfig, Decoder, encode, decode, init_weights
from .data import ImageBatch, ImageDataset
from .storage import MetricsRow
from .trainer import TrainConfig, local_train, mse_loss

log = logging.getLogger(__name__)

Params = Mapping[str, torch.Tensor]
ROW_ORDER = ("legitimate", "trained_inversion", "optimization_inversion")
ROW_LABELS = {
    "legitimate": "Legitimate decoder (upper bound)",
    "trained_inversion": "Trained inversion network",
    "optimization_inversion": "Optimization-based inversion",
    "dlg": "DLG gradient inversion",
}


@dataclass(frozen=True)
class AttackConfig:
    attack: str = "dlg"
    iterations: int = 300
    batch_size_under_attack: int = 1
    optimizer: str = "lbfgs"
    known_pairs: int = 500
    lr: float = 0.1
    inversion_epochs: int = 100
    inversion_lr: float = 1e-3
    inversion_batch_size: int = 32
    capture_mode: str = "gradient"  # or "epoch_diff"
    seed: int = 0

    def __post_init__(self) -> None:
        if self.attack not in ("dlg", "invert_net", "invert_opt"):
            raise ValueError(f"unknown attack {self.attack!r}")
        if self.iterations < 1:
            raise ValueError("iterations must be >= 1")
        if self.attack == "invert_net" and self.known_pairs < 1:
            raise ValueError("known_pairs must be >= 1")
        if self.optimizer not in ("lbfgs", "adam"):
            raise ValueError(f"optimizer must be 'lbfgs' or 'adam', got {self.optimizer!r}")
        if self.capture_mode not in ("gradient", "epoch_diff"):
            raise ValueError(f"capture_mode must be 'gradient' or 'epoch_diff', got {self.capture_mode!r}")


@dataclass
class AttackReport:
    kind: str
    psnr_db: list[float]
    ssim: list[float]
    mse: list[float]
    reference: dict | None = None
    extras: dict = field(default_factory=dict)

    @property
    def mean_mse(self) -> float:
        return float(np.mean(self.mse))

    @property
    def psnr(self) -> float:
        """PSNR of the mean MSE, the same aggregation as :func:`trainer.evaluate`."""
        return metrics.psnr_from_mse(self.mean_mse)

    @property
    def mean_psnr(self) -> float:
        return float(np.mean(self.psnr_db))

    @property
    def mean_ssim(self) -> float:
        return float(np.mean(self.ssim))


def score(kind: str, truth: torch.Tensor, recon: torch.Tensor, **extras) -> AttackReport:
    truth = truth.detach().to(torch.float64)
    recon = recon.detach().to(torch.float64)
    per_mse = ((truth - recon) ** 2).flatten(1).mean(dim=1)
    return AttackReport(
        kind,
        [metrics.psnr_from_mse(float(m)) for m in per_mse],
        [float(v) for v in metrics.ssim_per_image(truth, recon)],
        [float(m) for m in per_mse],
        extras=dict(extras),
    )


# ---------------------------------------------------------------------------
# training-phase: gradient capture and DLG
# ---------------------------------------------------------------------------

ModelFn = Callable[[Params, torch.Tensor], torch.Tensor]


@dataclass
class ObservedUpdate:
    grads: "OrderedDict[str, torch.Tensor]"
    draw: SymbolVector | None
    mode: str


def stsc_forward(codec_cfg: CodecConfig, spec: ChannelSpec, draw: SymbolVector) -> ModelFn:
    """Encoder -> channel replaying ``draw`` -> equalizer -> decoder, as a function of params."""
    def fn(params: Params, x: torch.Tensor) -> torch.Tensor:
        y = transmit(encode(x, params, codec_cfg), spec, frozen=draw)
        return decode(equalize(y, spec).symbols, params, codec_cfg)
    return fn


def gradient_map(model_fn: ModelFn, params: Params, x: torch.Tensor, create_graph: bool = False):
    leaves = OrderedDict((k, v if create_graph and v.requires_grad else v.detach().requires_grad_(True))
                         for k, v in params.items())
    loss = mse_loss(x, model_fn(leaves, x))
    grads = torch.autograd.grad(loss, list(leaves.values()), create_graph=create_graph, allow_unused=True)
    return OrderedDict(
        (k, torch.zeros_like(v) if g is None else g) for (k, v), g in zip(leaves.items(), grads)
    )


def draw_for(params: Params, x: torch.Tensor, codec_cfg: CodecConfig, spec: ChannelSpec,
             rng: torch.Generator) -> SymbolVector:
    with torch.no_grad():
        return transmit(encode(x, params, codec_cfg), spec, rng)


def capture_update(
    params: Params,
    batch: ImageBatch | torch.Tensor,
    cfg: TrainConfig,
    codec_cfg: CodecConfig,
    mode: str = "gradient",
    model_fn: ModelFn | None = None,
) -> ObservedUpdate:
    """What the server sees from a victim client.

    ``gradient``: the single-batch gradient of the reconstruction MSE under one
    channel draw (the attacker-favourable view). ``epoch_diff``: one local epoch
    over the batch, reported as ``(params_before - params_after) / lr``.
    """
    x = batch.data if isinstance(batch, ImageBatch) else batch
    dtype = next(iter(params.values())).dtype
    x = x.to(dtype)
    if mode == "epoch_diff":
        data = ImageDataset((x.detach().numpy() * 255).round().astype(np.uint8), np.zeros(len(x), np.int64))
        new, _, _ = local_train(params, data, replace(cfg, local_epochs=1), codec_cfg, stream=("victim",))
        grads = OrderedDict((k, (params[k] - new[k]) / cfg.learning_rate) for k in params)
        return ObservedUpdate(grads, None, mode)
    if mode != "gradient":
        raise ValueError(f"unknown capture mode {mode!r}")
    draw = None
    if model_fn is None:
        draw = draw_for(params, x, codec_cfg, cfg.channel, make_rng(cfg.channel.seed, "capture"))
        model_fn = stsc_forward(codec_cfg, cfg.channel, draw)
    grads = OrderedDict((k, g.detach()) for k, g in gradient_map(model_fn, params, x).items())
    return ObservedUpdate(grads, draw, mode)


def gradient_match_loss(model_fn: ModelFn, params: Params, dummy: torch.Tensor,
                        observed: Mapping[str, torch.Tensor]) -> torch.Tensor:
    """Squared Euclidean distance between the dummy's gradient map and the observed one."""
    grads = gradient_map(model_fn, params, dummy, create_graph=True)
    return sum(((grads[k] - observed[k]) ** 2).sum() for k in observed)


def _optimize_dummy(objective: Callable[[torch.Tensor], torch.Tensor], dummy: torch.Tensor,
                    cfg: AttackConfig) -> tuple[torch.Tensor, float, list[float]]:
    """Minimize ``objective`` over a [0,1]-clamped dummy; returns the best iterate."""
    dummy = dummy.detach().clone().requires_grad_(True)

    def make_opt(lbfgs: bool):
        if lbfgs:
            return torch.optim.LBFGS([dummy], lr=1.0, max_iter=1, history_size=50,
                                     line_search_fn="strong_wolfe")
        return torch.optim.Adam([dummy], lr=cfg.lr)

    opt = make_opt(cfg.optimizer == "lbfgs")
    best, best_val, trace = dummy.detach().clone(), math.inf, []

    def closure():
        opt.zero_grad()
        val = objective(dummy)
        val.backward()
        return val

    for it in range(cfg.iterations):
        before = dummy.detach().clone()
        try:
            # step() evaluates the closure at the pre-step point first and returns that value
            current = opt.step(closure).item()
            ok = math.isfinite(current) and bool(torch.isfinite(dummy).all())
        except RuntimeError as exc:
            log.warning("line search failed at iteration %d: %s", it, exc)
            current, ok = math.nan, False
        if math.isfinite(current):
            trace.append(current)
            if current < best_val:
                best, best_val = before, current
        if not ok:
            log.warning("falling back to fixed-step descent at iteration %d", it)
            with torch.no_grad():
                dummy.copy_(before)
            opt = make_opt(False)
        if current == 0.0:
            break
        with torch.no_grad():
            dummy.clamp_(0.0, 1.0)
    with torch.enable_grad():
        final = float(objective(dummy).detach())
    if final < best_val:
        best, best_val = dummy.detach().clone(), final
    return best, best_val, trace


def dlg_attack(
    observed: ObservedUpdate,
    params: Params,
    codec_cfg: CodecConfig,
    channel: ChannelSpec,
    cfg: AttackConfig,
    shape: Sequence[int],
    ground_truth: torch.Tensor | None = None,
    model_fn: ModelFn | None = None,
) -> tuple[torch.Tensor, AttackReport]:
    """Deep-leakage-from-gradients: fit a uniform-random dummy batch to the observed gradients."""
    dtype = next(iter(params.values())).dtype
    if model_fn is None:
        if observed.draw is None:
            raise ValueError("DLG against the STSC path needs the frozen channel draw")
        model_fn = stsc_forward(codec_cfg, channel, observed.draw)
    gen = torch.Generator().manual_seed(cfg.seed)
    dummy0 = torch.rand(tuple(shape), generator=gen, dtype=dtype)
    frozen_params = OrderedDict((k, v.detach()) for k, v in params.items())
    objective = lambda d: gradient_match_loss(model_fn, frozen_params, d, observed.grads)  # noqa: E731
    recon, best, trace = _optimize_dummy(objective, dummy0, cfg)
    if ground_truth is None:
        report = AttackReport("dlg", [], [], [], extras={"objective": best})
    else:
        report = score("dlg", ground_truth, recon, objective=best, batch_size=int(shape[0]))
    report.extras["trace_len"] = len(trace)
    return recon, report


# ---------------------------------------------------------------------------
# inference-phase: feature inversion
# ---------------------------------------------------------------------------


def intercept(params: Params, images: torch.Tensor, codec_cfg: CodecConfig, channel: ChannelSpec,
              rng: torch.Generator) -> SymbolVector:
    """Raw (pre-equalization) symbols an eavesdropper receives."""
    with torch.no_grad():
        return transmit(encode(images.to(next(iter(params.values())).dtype), params, codec_cfg), channel, rng)


class InversionNet(torch.nn.Module):
    """Attacker model: the decoder topology with an independent initialization."""

    def __init__(self, codec_cfg: CodecConfig, seed: int) -> None:
        super().__init__()
        self.net = Decoder(codec_cfg)
        init_weights(self.net, torch.Generator().manual_seed(seed))

    def forward(self, y: torch.Tensor) -> torch.Tensor:
        return self.net(y)


def train_inversion_net(
    params: Params,
    pool: ImageDataset,
    pair_count: int,
    channel: ChannelSpec,
    codec_cfg: CodecConfig,
    cfg: AttackConfig,
) -> tuple[InversionNet, torch.Tensor, torch.Tensor]:
    """Fit an inversion network on ``pair_count`` intercepted (y, x) pairs from ``pool``.

    Returns the model and its training pairs (y, x).
    """
    if pair_count < 1:
        raise ValueError("pair_count must be >= 1")
    if pair_count > len(pool):
        raise ValueError(f"pair pool holds {len(pool)} images, fewer than pair_count={pair_count}")
    idx = np.sort(np.random.default_rng(cfg.seed).permutation(len(pool))[:pair_count])
    x = pool.batch(idx).data
    y = intercept(params, x, codec_cfg, channel, make_rng(channel.seed, "attacker-pairs")).symbols
    net = InversionNet(codec_cfg, seed=cfg.seed + 1).to(x.dtype)
    opt = torch.optim.Adam(net.parameters(), lr=cfg.inversion_lr)
    gen = torch.Generator().manual_seed(cfg.seed)
    net.train()
    for _epoch in range(cfg.inversion_epochs):
        order = torch.randperm(pair_count, generator=gen)
        for start in range(0, pair_count, cfg.inversion_batch_size):
            b = order[start : start + cfg.inversion_batch_size]
            opt.zero_grad(set_to_none=True)
            loss = mse_loss(x[b], net(y[b]))
            loss.backward()
            opt.step()
    net.eval()
    return net, y, x


@torch.no_grad()
def run_inversion_net(net: InversionNet, y: SymbolVector | torch.Tensor) -> torch.Tensor:
    sym = y.symbols if isinstance(y, SymbolVector) else y
    return net(sym)


def blind_rescale(y: torch.Tensor) -> torch.Tensor:
    """Rescale each intercepted block to unit mean symbol power (no knowledge of h or n)."""
    power = y.abs().pow(2).mean(dim=1, keepdim=True)
    return y / torch.sqrt(power)


def invert_features_optimization(
    y: SymbolVector | torch.Tensor,
    params: Params,
    codec_cfg: CodecConfig,
    cfg: AttackConfig,
    ground_truth: torch.Tensor | None = None,
    init: torch.Tensor | None = None,
    rescale: bool = True,
) -> tuple[torch.Tensor, AttackReport]:
    """Search for an image whose encoding matches the intercepted symbols."""
    sym = (y.symbols if isinstance(y, SymbolVector) else y).detach()
    target = blind_rescale(sym) if rescale else sym
    dtype = next(iter(params.values())).dtype
    frozen = OrderedDict((k, v.detach()) for k, v in params.items())
    if init is None:
        gen = torch.Generator().manual_seed(cfg.seed)
        init = torch.rand((sym.shape[0], 3, codec_cfg.H, codec_cfg.W), generator=gen, dtype=dtype)

    def objective(d: torch.Tensor) -> torch.Tensor:
        return (encode(d, frozen, codec_cfg) - target).abs().pow(2).sum()

    recon, best, _ = _optimize_dummy(objective, init.to(dtype), cfg)
    if ground_truth is None:
        return recon, AttackReport("optimization_inversion", [], [], [], extras={"objective": best})
    return recon, score("optimization_inversion", ground_truth, recon, objective=best)


@torch.no_grad()
def legitimate_reference(params: Params, images: torch.Tensor, codec_cfg: CodecConfig,
                         channel: ChannelSpec, y: SymbolVector) -> AttackReport:
    """Legitimate receiver on the same intercepted block: equalize then decode."""
    recon = decode(equalize(y, channel).symbols, params, codec_cfg)
    return score("legitimate", images, recon)


@dataclass
class AttackTable:
    rows: list[tuple[str, AttackReport]]

    def to_metrics_rows(self, experiment_id: str, channel: ChannelSpec, **extras) -> list[MetricsRow]:
        return [
            MetricsRow.from_mse(experiment_id, channel.kind, channel.snr_db, 0, rep.mean_mse, rep.mean_ssim,
                                kind="attack", series=name, label=ROW_LABELS.get(name, name),
                                mean_psnr_per_image=rep.mean_psnr, n_images=len(rep.mse), **extras)
            for name, rep in self.rows
        ]

    def format(self) -> str:
        lines = [f"{'Method':<36}{'PSNR (dB)':>10}{'SSIM':>8}"]
        for name, rep in self.rows:
            lines.append(f"{ROW_LABELS.get(name, name):<36}{rep.psnr:>10.2f}{rep.mean_ssim:>8.3f}")
        return "\n".join(lines)


def attack_report(results: Mapping[str, AttackReport], legit_reference: AttackReport) -> AttackTable:
    """Comparison table in the fixed order legitimate / trained inversion / optimization inversion."""
    merged = dict(results)
    merged["legitimate"] = legit_reference
    rows = [(name, merged[name]) for name in ROW_ORDER if name in merged]
    rows += [(name, rep) for name, rep in merged.items() if name not in ROW_ORDER]
    for _, rep in rows:
        rep.reference = {"psnr_db": legit_reference.psnr, "ssim": legit_reference.mean_ssim}
    return AttackTable(rows)


def save_image_grid(path: str | Path, rows: Sequence[torch.Tensor]) -> Path:
    """Lossless PNG with one image batch per row."""
    from PIL import Image

    rows = [r.detach().clamp(0, 1).to(torch.float64) for r in rows]
    n = max(r.shape[0] for r in rows)
    h, w = rows[0].shape[2:]
    canvas = np.ones((len(rows) * (h + 2), n * (w + 2), 3), dtype=np.uint8) * 255
    for i, r in enumerate(rows):
        for j in range(r.shape[0]):
            img = (r[j].permute(1, 2, 0).numpy() * 255).round().astype(np.uint8)
            canvas[i * (h + 2) : i * (h + 2) + h, j * (w + 2) : j * (w + 2) + w] = img
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(canvas).save(path, format="PNG")
    return path
