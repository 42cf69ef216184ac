"""Swin-Transformer joint source-channel encoder and decoder.

Token grids are channels-last tensors ``(batch, grid_h, grid_w, dim)``. The
encoder runs patch partition -> embedding -> Swin layers (stage 1), then patch
merging -> Swin layers (stage 2), flattens the ``(H/8, W/8, 2C)`` bottleneck,
applies the dense pre-channel map and power-normalizes into complex symbols.
The decoder mirrors it with a learned patch expansion.
"""

from __future__ import annotations

import math
from collections import OrderedDict
from dataclasses import asdict, dataclass
from functools import lru_cache
from typing import Mapping

import torch
import torch.nn as nn
import torch.nn.functional as F
from torch.func import functional_call

PATCH = 4
MASK_VALUE = -1e4
INIT_STD = 0.02

ParameterSet = "OrderedDict[str, torch.Tensor]"


@dataclass(frozen=True)
class CodecConfig:
    H: int = 32
    W: int = 32
    C: int = 32
    window_size: int = 4
    num_heads: int = 4
    depth_per_stage: int = 1
    mlp_ratio: float = 4.0
    wmsa_position_bias: bool = False
    seed: int = 0

    def __post_init__(self) -> None:
        if self.H % 8 or self.W % 8:
            raise ValueError(f"H and W must be divisible by 8, got {self.H}x{self.W}")
        if self.C % self.num_heads:
            raise ValueError(f"C={self.C} must be divisible by num_heads={self.num_heads}")
        if self.window_size < 2 or self.window_size % 2:
            raise ValueError("window_size must be even so the shift is window_size/2")
        if self.depth_per_stage < 1:
            raise ValueError("depth_per_stage must be >= 1")
        for gh, gw in (self.stage1_grid, self.stage2_grid):
            for g in (gh, gw):
                if g > self.window_size and g % self.window_size:
                    raise ValueError(f"grid size {g} is neither <= nor a multiple of window_size={self.window_size}")

    @property
    def stage1_grid(self) -> tuple[int, int]:
        return self.H // 4, self.W // 4

    @property
    def stage2_grid(self) -> tuple[int, int]:
        return self.H // 8, self.W // 8

    @property
    def latent_dim(self) -> int:
        """Real values entering the channel: H/8 * W/8 * 2C."""
        gh, gw = self.stage2_grid
        return gh * gw * 2 * self.C

    @property
    def num_symbols(self) -> int:
        return self.latent_dim // 2

    def to_dict(self) -> dict:
        return asdict(self)


def compression_ratio(config: CodecConfig) -> float:
    """Channel dimensionality over source dimensionality; equals C/96."""
    return config.latent_dim / (3 * config.H * config.W)


# ---------------------------------------------------------------------------
# permutation primitives
# ---------------------------------------------------------------------------


def patch_partition(images: torch.Tensor) -> torch.Tensor:
    """(B, 3, H, W) -> (B, H/4, W/4, 48); each token flattens a 4x4x3 block row-major."""
    B, ch, H, W = images.shape
    if H % PATCH or W % PATCH:
        raise ValueError(f"image size {H}x{W} not divisible by {PATCH}")
    x = images.reshape(B, ch, H // PATCH, PATCH, W // PATCH, PATCH)
    return x.permute(0, 2, 4, 3, 5, 1).reshape(B, H // PATCH, W // PATCH, PATCH * PATCH * ch)


def patch_unpartition(grid: torch.Tensor, channels: int = 3) -> torch.Tensor:
    B, gh, gw, d = grid.shape
    if d != PATCH * PATCH * channels:
        raise ValueError(f"token dim {d} != {PATCH * PATCH * channels}")
    x = grid.reshape(B, gh, gw, PATCH, PATCH, channels)
    return x.permute(0, 5, 1, 3, 2, 4).reshape(B, channels, gh * PATCH, gw * PATCH)


def merge_concat(grid: torch.Tensor) -> torch.Tensor:
    """Concatenate each 2x2 neighbourhood as [top-left, top-right, bottom-left, bottom-right]."""
    B, gh, gw, d = grid.shape
    if gh % 2 or gw % 2:
        raise ValueError(f"patch merging needs even grid dims, got {gh}x{gw}")
    return torch.cat(
        [grid[:, 0::2, 0::2], grid[:, 0::2, 1::2], grid[:, 1::2, 0::2], grid[:, 1::2, 1::2]], dim=-1
    )


def expand_split(grid: torch.Tensor) -> torch.Tensor:
    """Inverse of :func:`merge_concat`: (B, h, w, 4d) -> (B, 2h, 2w, d)."""
    B, gh, gw, d4 = grid.shape
    if d4 % 4:
        raise ValueError(f"token dim {d4} not divisible by 4")
    d = d4 // 4
    x = grid.reshape(B, gh, gw, 2, 2, d)
    return x.permute(0, 1, 3, 2, 4, 5).reshape(B, 2 * gh, 2 * gw, d)


def patch_embed(grid: torch.Tensor, weight: torch.Tensor, bias: torch.Tensor | None = None) -> torch.Tensor:
    if grid.shape[-1] != weight.shape[1]:
        raise ValueError(f"token dim {grid.shape[-1]} does not match embedding input {weight.shape[1]}")
    return F.linear(grid, weight, bias)


def patch_merge(grid: torch.Tensor, weight: torch.Tensor, bias: torch.Tensor | None = None) -> torch.Tensor:
    """2x2 concatenation to 4C followed by the per-token projection to 2C."""
    return F.linear(merge_concat(grid), weight, bias)


def window_partition(grid: torch.Tensor, window_size: int) -> torch.Tensor:
    """(B, h, w, d) -> (B * num_windows, window_size**2, d), windows in raster order."""
    B, gh, gw, d = grid.shape
    if gh % window_size or gw % window_size:
        raise ValueError(f"grid {gh}x{gw} not divisible by window_size={window_size}")
    x = grid.reshape(B, gh // window_size, window_size, gw // window_size, window_size, d)
    return x.permute(0, 1, 3, 2, 4, 5).reshape(-1, window_size * window_size, d)


def window_reverse(windows: torch.Tensor, window_size: int, grid_h: int, grid_w: int) -> torch.Tensor:
    nh, nw = grid_h // window_size, grid_w // window_size
    d = windows.shape[-1]
    x = windows.reshape(-1, nh, nw, window_size, window_size, d)
    return x.permute(0, 1, 3, 2, 4, 5).reshape(-1, grid_h, grid_w, d)


def cyclic_shift(grid: torch.Tensor, shift: int) -> torch.Tensor:
    return torch.roll(grid, shifts=(-shift, -shift), dims=(1, 2))


def cyclic_unshift(grid: torch.Tensor, shift: int) -> torch.Tensor:
    return torch.roll(grid, shifts=(shift, shift), dims=(1, 2))


def build_shift_mask(grid_h: int, grid_w: int, window_size: int, shift: int) -> torch.Tensor:
    """Additive mask (num_windows, N, N) for attention over cyclically shifted windows.

    Tokens whose pre-shift positions belong to different contiguous regions get
    ``MASK_VALUE``; same-region pairs get 0.
    """
    if not 0 < shift < window_size:
        raise ValueError(f"shift must satisfy 0 < shift < window_size, got shift={shift}, window={window_size}")
    labels = torch.zeros(1, grid_h, grid_w, 1)
    spans = (slice(0, -window_size), slice(-window_size, -shift), slice(-shift, None))
    region = 0
    for hs in spans:
        for ws in spans:
            labels[:, hs, ws, :] = region
            region += 1
    win = window_partition(labels, window_size).squeeze(-1)
    diff = win.unsqueeze(1) - win.unsqueeze(2)
    return torch.where(diff != 0, torch.tensor(MASK_VALUE), torch.tensor(0.0))


def relative_position_index(window_size: int) -> torch.Tensor:
    coords = torch.stack(torch.meshgrid(torch.arange(window_size), torch.arange(window_size), indexing="ij"))
    flat = coords.flatten(1)
    rel = (flat[:, :, None] - flat[:, None, :]).permute(1, 2, 0) + (window_size - 1)
    return rel[..., 0] * (2 * window_size - 1) + rel[..., 1]


# ---------------------------------------------------------------------------
# modules
# ---------------------------------------------------------------------------


class WindowAttention(nn.Module):
    """Multi-head self-attention inside windows, with optional relative position bias."""

    def __init__(self, dim: int, window_size: int, num_heads: int, position_bias: bool = True) -> None:
        super().__init__()
        if dim % num_heads:
            raise ValueError(f"dim={dim} not divisible by num_heads={num_heads}")
        self.dim = dim
        self.window_size = window_size
        self.num_heads = num_heads
        self.head_dim = dim // num_heads
        self.qkv = nn.Linear(dim, 3 * dim)
        self.proj = nn.Linear(dim, dim)
        if position_bias:
            self.relative_position_bias_table = nn.Parameter(torch.zeros((2 * window_size - 1) ** 2, num_heads))
            self.register_buffer("relative_position_index", relative_position_index(window_size), persistent=False)
        else:
            self.relative_position_bias_table = None

    def attention_weights(self, x: torch.Tensor, mask: torch.Tensor | None = None):
        Bw, N, D = x.shape
        qkv = self.qkv(x).reshape(Bw, N, 3, self.num_heads, self.head_dim).permute(2, 0, 3, 1, 4)
        q, k, v = qkv[0], qkv[1], qkv[2]
        logits = (q @ k.transpose(-2, -1)) / math.sqrt(self.head_dim)
        if self.relative_position_bias_table is not None:
            bias = self.relative_position_bias_table[self.relative_position_index.reshape(-1)]
            logits = logits + bias.reshape(N, N, self.num_heads).permute(2, 0, 1).unsqueeze(0)
        if mask is not None:
            nw = mask.shape[0]
            logits = logits.reshape(Bw // nw, nw, self.num_heads, N, N) + mask.to(logits.dtype)[None, :, None]
            logits = logits.reshape(Bw, self.num_heads, N, N)
        return torch.softmax(logits, dim=-1), v

    def forward(self, x: torch.Tensor, mask: torch.Tensor | None = None) -> torch.Tensor:
        if not torch.isfinite(x).all():
            raise FloatingPointError("non-finite values entering attention")
        attn, v = self.attention_weights(x, mask)
        out = (attn @ v).transpose(1, 2).reshape(x.shape)
        return self.proj(out)


class Mlp(nn.Sequential):
    def __init__(self, dim: int, hidden: int) -> None:
        super().__init__(OrderedDict(fc1=nn.Linear(dim, hidden), act=nn.ReLU(), fc2=nn.Linear(hidden, dim)))


class SwinSublayer(nn.Module):
    """LN -> (S)W-MSA -> residual, then LN -> MLP -> residual.

    ``shift = 0`` gives the plain window sub-layer. When the grid is no larger
    than the window, the window shrinks to the grid and the shift is dropped.
    """

    def __init__(self, dim: int, grid: tuple[int, int], window_size: int, num_heads: int,
                 shift: int, mlp_ratio: float = 4.0, position_bias: bool = True) -> None:
        super().__init__()
        gh, gw = grid
        if min(gh, gw) <= window_size:
            window_size, shift = min(gh, gw), 0
        self.grid = grid
        self.window_size = window_size
        self.shift = shift
        self.norm1 = nn.LayerNorm(dim)
        self.attn = WindowAttention(dim, window_size, num_heads, position_bias)
        self.norm2 = nn.LayerNorm(dim)
        self.mlp = Mlp(dim, int(dim * mlp_ratio))
        if shift:
            self.register_buffer("attn_mask", build_shift_mask(gh, gw, window_size, shift), persistent=False)
        else:
            self.attn_mask = None

    def attend(self, z: torch.Tensor) -> torch.Tensor:
        gh, gw = self.grid
        if z.shape[1:3] != (gh, gw):
            raise ValueError(f"grid {tuple(z.shape[1:3])} does not match configured {self.grid}")
        if self.shift:
            z = cyclic_shift(z, self.shift)
        win = self.attn(window_partition(z, self.window_size), self.attn_mask)
        z = window_reverse(win, self.window_size, gh, gw)
        if self.shift:
            z = cyclic_unshift(z, self.shift)
        return z

    def forward(self, z: torch.Tensor) -> torch.Tensor:
        z = z + self.attend(self.norm1(z))
        return z + self.mlp(self.norm2(z))


class SwinLayer(nn.Module):
    """A W-MSA sub-layer followed by its shifted-window twin; shape preserving."""

    def __init__(self, dim: int, grid: tuple[int, int], window_size: int, num_heads: int,
                 mlp_ratio: float = 4.0, wmsa_position_bias: bool = False) -> None:
        super().__init__()
        self.wmsa = SwinSublayer(dim, grid, window_size, num_heads, 0, mlp_ratio, wmsa_position_bias)
        self.swmsa = SwinSublayer(dim, grid, window_size, num_heads, window_size // 2, mlp_ratio, True)

    def forward(self, z: torch.Tensor) -> torch.Tensor:
        return self.swmsa(self.wmsa(z))


def _stage(dim: int, grid, cfg: CodecConfig) -> nn.Sequential:
    return nn.Sequential(*[
        SwinLayer(dim, grid, cfg.window_size, cfg.num_heads, cfg.mlp_ratio, cfg.wmsa_position_bias)
        for _ in range(cfg.depth_per_stage)
    ])


def power_normalize(z: torch.Tensor) -> torch.Tensor:
    """Scale each row of real pairs so the complex symbols have mean |s|^2 = 1."""
    n_sym = z.shape[1] // 2
    return z * torch.sqrt(n_sym / z.pow(2).sum(dim=1, keepdim=True))


def to_complex(z: torch.Tensor) -> torch.Tensor:
    """Pair consecutive reals (re, im) into complex symbols."""
    return torch.view_as_complex(z.reshape(z.shape[0], -1, 2).contiguous())


def from_complex(s: torch.Tensor) -> torch.Tensor:
    return torch.view_as_real(s).reshape(s.shape[0], -1)


class Encoder(nn.Module):
    def __init__(self, cfg: CodecConfig) -> None:
        super().__init__()
        self.cfg = cfg
        C = cfg.C
        self.embed = nn.Linear(PATCH * PATCH * 3, C)
        self.stage1 = _stage(C, cfg.stage1_grid, cfg)
        self.merge = nn.Linear(4 * C, 2 * C)
        self.stage2 = _stage(2 * C, cfg.stage2_grid, cfg)
        self.to_channel = nn.Linear(cfg.latent_dim, cfg.latent_dim)

    def features(self, images: torch.Tensor) -> torch.Tensor:
        """Real pre-normalization channel input, shape (B, latent_dim)."""
        if tuple(images.shape[1:]) != (3, self.cfg.H, self.cfg.W):
            raise ValueError(f"image shape {tuple(images.shape[1:])} != (3, {self.cfg.H}, {self.cfg.W})")
        z = self.stage1(patch_embed(patch_partition(images), self.embed.weight, self.embed.bias))
        z = self.stage2(patch_merge(z, self.merge.weight, self.merge.bias))
        return self.to_channel(z.flatten(1))

    def forward(self, images: torch.Tensor) -> torch.Tensor:
        return to_complex(power_normalize(self.features(images)))


class Decoder(nn.Module):
    def __init__(self, cfg: CodecConfig) -> None:
        super().__init__()
        self.cfg = cfg
        C = cfg.C
        self.from_channel = nn.Linear(cfg.latent_dim, cfg.latent_dim)
        self.stage2 = _stage(2 * C, cfg.stage2_grid, cfg)
        self.expand = nn.Linear(2 * C, 4 * C)
        self.stage1 = _stage(C, cfg.stage1_grid, cfg)
        self.head = nn.Linear(C, PATCH * PATCH * 3)

    def forward(self, symbols: torch.Tensor) -> torch.Tensor:
        if symbols.shape[1:] != (self.cfg.num_symbols,):
            raise ValueError(f"expected {self.cfg.num_symbols} symbols per image, got {tuple(symbols.shape[1:])}")
        gh, gw = self.cfg.stage2_grid
        z = self.from_channel(from_complex(symbols)).reshape(-1, gh, gw, 2 * self.cfg.C)
        z = self.stage2(z)
        z = self.stage1(expand_split(self.expand(z)))
        return torch.sigmoid(patch_unpartition(self.head(z)))


def init_weights(module: nn.Module, generator: torch.Generator) -> None:
    for m in module.modules():
        if isinstance(m, nn.Linear):
            nn.init.trunc_normal_(m.weight, std=INIT_STD, a=-2 * INIT_STD, b=2 * INIT_STD, generator=generator)
            nn.init.zeros_(m.bias)
        elif isinstance(m, nn.LayerNorm):
            nn.init.ones_(m.weight)
            nn.init.zeros_(m.bias)
        elif isinstance(m, WindowAttention) and m.relative_position_bias_table is not None:
            nn.init.zeros_(m.relative_position_bias_table)


class STSCCodec(nn.Module):
    def __init__(self, cfg: CodecConfig) -> None:
        super().__init__()
        self.cfg = cfg
        self.encoder = Encoder(cfg)
        self.decoder = Decoder(cfg)
        init_weights(self, torch.Generator().manual_seed(cfg.seed))

    def forward(self, images: torch.Tensor, channel=None) -> torch.Tensor:
        s = self.encoder(images)
        if channel is not None:
            s = channel(s)
        return self.decoder(s)


@lru_cache(maxsize=16)
def _template(cfg: CodecConfig) -> STSCCodec:
    return STSCCodec(cfg)


def init_params(cfg: CodecConfig, dtype: torch.dtype = torch.float32) -> "OrderedDict[str, torch.Tensor]":
    """Fresh seeded ParameterSet; identical order and values for identical configs."""
    model = STSCCodec(cfg).to(dtype)
    return OrderedDict((k, v.detach().clone()) for k, v in model.named_parameters())


def param_names(cfg: CodecConfig) -> list[str]:
    return [k for k, _ in _template(cfg).named_parameters()]


def _call(cfg: CodecConfig, params: Mapping[str, torch.Tensor], method: str, *args):
    model = _template(cfg)
    sub = getattr(model, method.split(".")[0])
    prefix = method.split(".")[0] + "."
    sub_params = {k[len(prefix):]: v for k, v in params.items() if k.startswith(prefix)}
    expected = {k for k, _ in sub.named_parameters()}
    if set(sub_params) != expected:
        missing, extra = sorted(expected - set(sub_params)), sorted(set(sub_params) - expected)
        raise KeyError(f"ParameterSet does not match the {prefix[:-1]}: missing {missing[:3]}, unexpected {extra[:3]}")
    # buffers (shift mask, position index) come from the template
    return functional_call(sub, sub_params, args)


def encode(images: torch.Tensor, params: Mapping[str, torch.Tensor], config: CodecConfig) -> torch.Tensor:
    """Images -> unit-power complex symbols of shape (B, num_symbols)."""
    return _call(config, params, "encoder", images)


def decode(received: torch.Tensor, params: Mapping[str, torch.Tensor], config: CodecConfig) -> torch.Tensor:
    """Complex symbols (B, num_symbols) -> reconstructed images in [0, 1]."""
    return _call(config, params, "decoder", received)


def load_into(model: nn.Module, params: Mapping[str, torch.Tensor]) -> nn.Module:
    with torch.no_grad():
        for name, p in model.named_parameters():
            p.copy_(params[name])
    return model


def snapshot(model: nn.Module) -> "OrderedDict[str, torch.Tensor]":
    return OrderedDict((k, v.detach().clone()) for k, v in model.named_parameters())
