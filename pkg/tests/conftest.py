from __future__ import annotations

import numpy as np
import pytest
import torch

from stsc.codec import CodecConfig, init_params
from stsc.data import ImageDataset, write_cifar_binary

# acceptance results, filled by tests/test_acceptance.py and printed at the end of the session
ACCEPTANCE: dict[int, tuple[bool, str]] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[k]
        terminalreporter.write_line(f"criterion {k:>2}: {'PASS' if ok else 'FAIL'}  {detail}")


TINY = CodecConfig(H=8, W=8, C=4, window_size=2, num_heads=1, mlp_ratio=2.0, seed=3)
# 16x16 gives a 4x4 stage-1 grid, so window 2 keeps the shifted window and its mask active
SHIFTED = CodecConfig(H=16, W=16, C=4, window_size=2, num_heads=1, mlp_ratio=2.0, seed=5)
# smallest config that learns visibly within a few seconds
SMALL = CodecConfig(H=16, W=16, C=16, window_size=2, num_heads=2, seed=1)


def smooth_images(n: int, size: int = 32, seed: int = 0) -> np.ndarray:
    """uint8 images built from a few random low-frequency waves (learnable, non-constant)."""
    rng = np.random.default_rng(seed)
    yy, xx = np.meshgrid(np.linspace(0, 1, size), np.linspace(0, 1, size), indexing="ij")
    out = np.empty((n, 3, size, size))
    for i in range(n):
        for c in range(3):
            fx, fy, ph = rng.uniform(0.5, 2.5), rng.uniform(0.5, 2.5), rng.uniform(0, 2 * np.pi)
            out[i, c] = 0.5 + 0.4 * np.sin(2 * np.pi * (fx * xx + fy * yy) + ph)
    return np.clip(out * 255, 0, 255).round().astype(np.uint8)


def smooth_dataset(n: int, size: int = 32, seed: int = 0) -> ImageDataset:
    labels = np.random.default_rng(seed + 1).integers(0, 10, n)
    return ImageDataset(smooth_images(n, size, seed), labels)


@pytest.fixture
def tiny_cfg() -> CodecConfig:
    return TINY


@pytest.fixture
def tiny_params64():
    return init_params(TINY, torch.float64)


@pytest.fixture(scope="session")
def trained_small():
    """SMALL codec trained on smooth 16x16 images; returns (params, per-batch losses, data)."""
    from stsc.channel import ChannelSpec
    from stsc.trainer import TrainConfig, local_train

    data = smooth_dataset(64, size=16, seed=1)
    cfg = TrainConfig(learning_rate=3e-3, batch_size=16, local_epochs=60, channel=ChannelSpec("awgn", 12.0, seed=0))
    params, losses, _ = local_train(init_params(SMALL), data, cfg, SMALL)
    return params, losses, data


@pytest.fixture
def cifar_root(tmp_path):
    """A miniature dataset in the CIFAR-10 binary layout (non-strict sizes)."""
    root = tmp_path / "data"
    write_cifar_binary(root, "train", smooth_images(60, seed=1), np.arange(60) % 10)
    write_cifar_binary(root, "test", smooth_images(20, seed=2), np.arange(20) % 10)
    return root
