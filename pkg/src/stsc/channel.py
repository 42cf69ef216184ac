"""Differentiable block-fading channel: AWGN, Rician and Rayleigh with optional CSI equalization."""

from __future__ import annotations

import hashlib
import logging
import math
import warnings
from dataclasses import dataclass, replace

import torch

log = logging.getLogger(__name__)

KINDS = ("awgn", "rician", "rayleigh")
DEEP_FADE_THRESHOLD = 1e-3
EQUALIZE_GUARD = 1e-6
POWER_TOLERANCE = 0.10


class ChannelContractError(ValueError):
    pass


class ChannelContractWarning(UserWarning):
    pass


@dataclass(frozen=True)
class ChannelSpec:
    kind: str = "awgn"
    snr_db: float = 12.0
    rician_k: float = 10.0
    csi: str = "perfect"
    seed: int = 0

    def __post_init__(self) -> None:
        if self.kind not in KINDS:
            raise ValueError(f"channel kind must be one of {KINDS}, got {self.kind!r}")
        if self.csi not in ("perfect", "none"):
            raise ValueError(f"csi must be 'perfect' or 'none', got {self.csi!r}")
        if not math.isfinite(self.snr_db):
            raise ValueError("snr_db must be finite")
        if self.kind == "rician" and not self.rician_k > 0:
            raise ValueError("rician_k must be > 0")

    def with_snr(self, snr_db: float) -> "ChannelSpec":
        return replace(self, snr_db=float(snr_db))


@dataclass
class SymbolVector:
    """Complex symbols (batch, n_sym) plus the fading/noise realization that produced them."""

    symbols: torch.Tensor
    fading: torch.Tensor | None = None
    noise: torch.Tensor | None = None

    @property
    def power(self) -> float:
        return float(self.symbols.detach().abs().pow(2).mean())


def stream_seed(seed: int, *parts: object) -> int:
    """Domain-separated 63-bit seed derived from ``seed`` and labels (e.g. worker id)."""
    h = hashlib.sha256(repr((int(seed),) + tuple(parts)).encode()).digest()
    return int.from_bytes(h[:8], "little") & (2**63 - 1)


def make_rng(seed: int, *parts: object) -> torch.Generator:
    return torch.Generator().manual_seed(stream_seed(seed, *parts) if parts else int(seed))


def snr_to_noise_variance(snr_db: float, signal_power: float = 1.0) -> float:
    """Total complex noise variance; each real component gets half of it."""
    if not signal_power > 0:
        raise ValueError("signal_power must be positive")
    return signal_power / 10 ** (snr_db / 10)


def _cn(shape, rng: torch.Generator, dtype=torch.complex64) -> torch.Tensor:
    # torch draws complex normals with unit total variance split over re/im
    return torch.randn(shape, generator=rng, dtype=dtype)


def sample_fading(spec: ChannelSpec, batch: int, rng: torch.Generator,
                  dtype: torch.dtype = torch.complex64) -> torch.Tensor:
    """One block-fading coefficient per batch item, with E|h|^2 = 1 for every kind."""
    if spec.kind == "awgn":
        return torch.ones(batch, dtype=dtype)
    nlos = _cn((batch,), rng, dtype)
    if spec.kind == "rayleigh":
        return nlos
    k = spec.rician_k
    return math.sqrt(k / (k + 1)) + math.sqrt(1 / (k + 1)) * nlos


def _sample_guarded(spec: ChannelSpec, batch: int, rng: torch.Generator, dtype) -> torch.Tensor:
    h = sample_fading(spec, batch, rng, dtype)
    if spec.csi != "perfect" or spec.kind == "awgn":
        return h
    resampled = 0
    bad = h.abs() < DEEP_FADE_THRESHOLD
    while bad.any():
        n = int(bad.sum())
        resampled += n
        h[bad] = sample_fading(spec, n, rng, dtype)
        bad = h.abs() < DEEP_FADE_THRESHOLD
    if resampled:
        log.info("deep-fade guard resampled %d of %d fading draws", resampled, batch)
    return h


def transmit(s: torch.Tensor | SymbolVector, spec: ChannelSpec, rng: torch.Generator | None = None,
             strict: bool = False, noise_variance: float | None = None,
             frozen: SymbolVector | None = None) -> SymbolVector:
    """y = h*s + n, differentiable in ``s`` with dy/ds = h.

    ``noise_variance`` overrides the SNR-derived value; ``frozen`` replays the
    fading and noise realization recorded in an earlier output.
    """
    sym = s.symbols if isinstance(s, SymbolVector) else s
    if not sym.is_complex():
        raise TypeError("transmit expects complex symbols")
    power = float(sym.detach().abs().pow(2).mean())
    if abs(power - 1.0) > POWER_TOLERANCE:
        msg = f"input symbol power {power:.4f} deviates from 1 by more than {POWER_TOLERANCE:.0%}"
        if strict:
            raise ChannelContractError(msg)
        warnings.warn(msg, ChannelContractWarning, stacklevel=2)
    if frozen is not None:
        h, n = frozen.fading.to(sym.dtype), frozen.noise.to(sym.dtype)
    else:
        if rng is None:
            rng = make_rng(spec.seed)
        batch = sym.shape[0]
        h = _sample_guarded(spec, batch, rng, sym.dtype)
        var = snr_to_noise_variance(spec.snr_db) if noise_variance is None else noise_variance
        n = math.sqrt(var) * _cn(sym.shape, rng, sym.dtype) if var > 0 else torch.zeros_like(sym.detach())
    y = h.reshape(-1, *([1] * (sym.dim() - 1))) * sym + n
    return SymbolVector(y, h, n)


def equalize(y: SymbolVector, spec: ChannelSpec) -> SymbolVector:
    """Zero-forcing y/h under perfect CSI; identity when the receiver has none."""
    if spec.csi == "none" or spec.kind == "awgn":
        return y
    if y.fading is None:
        raise ValueError("perfect-CSI equalization needs the recorded fading coefficients")
    if (y.fading.abs() < EQUALIZE_GUARD).any():
        raise FloatingPointError("fading coefficient below the equalization guard")
    h = y.fading.reshape(-1, *([1] * (y.symbols.dim() - 1)))
    return SymbolVector(y.symbols / h, y.fading, y.noise)


def empirical_snr_db(s: torch.Tensor, n: torch.Tensor) -> float:
    return 10 * math.log10(float(s.abs().pow(2).mean()) / float(n.abs().pow(2).mean()))
