"""Reconstruction quality metrics shared by training, evaluation and attacks."""

from __future__ import annotations

import math

import torch
import torch.nn.functional as F

PSNR_CAP_DB = 100.0
SSIM_WINDOW = 8


def _check_shapes(x: torch.Tensor, x_hat: torch.Tensor) -> None:
    if x.shape != x_hat.shape:
        raise ValueError(f"shape mismatch: {tuple(x.shape)} vs {tuple(x_hat.shape)}")


def mse(x: torch.Tensor, x_hat: torch.Tensor) -> torch.Tensor:
    """Mean squared error over every pixel value and every image in the batch."""
    _check_shapes(x, x_hat)
    return torch.mean((x - x_hat) ** 2)


def psnr_from_mse(mse_value: float, max_value: float = 1.0) -> float:
    if mse_value < 0 or not math.isfinite(mse_value):
        raise ValueError(f"invalid mse {mse_value!r}")
    if mse_value == 0.0:
        return PSNR_CAP_DB
    return min(PSNR_CAP_DB, 10.0 * math.log10(max_value**2 / mse_value))


def psnr(x: torch.Tensor, x_hat: torch.Tensor, max_value: float = 1.0) -> float:
    """PSNR in dB of the batch-level MSE; perfect reconstructions are capped at 100 dB."""
    return psnr_from_mse(float(mse(x, x_hat)), max_value)


def psnr_per_image(x: torch.Tensor, x_hat: torch.Tensor, max_value: float = 1.0) -> list[float]:
    _check_shapes(x, x_hat)
    per = ((x - x_hat) ** 2).flatten(1).mean(dim=1)
    return [psnr_from_mse(float(v), max_value) for v in per]


def ssim_per_image(
    x: torch.Tensor, x_hat: torch.Tensor, max_value: float = 1.0, window: int = SSIM_WINDOW
) -> torch.Tensor:
    """Mean local SSIM per image.

    Images are reduced to grayscale by averaging channels, then compared with
    uniform ``window`` x ``window`` sliding windows at stride 1. Returns a
    tensor of shape ``(batch,)``.
    """
    _check_shapes(x, x_hat)
    if x.dim() == 3:
        x, x_hat = x.unsqueeze(0), x_hat.unsqueeze(0)
    if x.shape[-1] < window or x.shape[-2] < window:
        raise ValueError(f"image {tuple(x.shape[-2:])} smaller than the {window}x{window} SSIM window")
    a = x.to(torch.float64).mean(dim=1, keepdim=True)
    b = x_hat.to(torch.float64).mean(dim=1, keepdim=True)
    c1 = (0.01 * max_value) ** 2
    c2 = (0.03 * max_value) ** 2

    mu_a = F.avg_pool2d(a, window, stride=1)
    mu_b = F.avg_pool2d(b, window, stride=1)
    var_a = F.avg_pool2d(a * a, window, stride=1) - mu_a**2
    var_b = F.avg_pool2d(b * b, window, stride=1) - mu_b**2
    cov = F.avg_pool2d(a * b, window, stride=1) - mu_a * mu_b

    num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
    den = (mu_a**2 + mu_b**2 + c1) * (var_a + var_b + c2)
    return (num / den).flatten(1).mean(dim=1)


def ssim(x: torch.Tensor, x_hat: torch.Tensor, max_value: float = 1.0) -> float:
    return float(ssim_per_image(x, x_hat, max_value).mean())
