"""Building blocks for the hierarchical per-patch backbones.

The default backbone is a windowed-attention transformer: blocks attend
within fixed windows (alternating blocks shift the grid by half a
window), and stages are separated by 2x patch-merging downsamples. A
plain convolutional stage is provided behind the same interface for the
CNN backbone variants. All blocks operate channels-last on (B, H, W, C).
"""

from __future__ import annotations

import math

import torch
import torch.nn as nn
import torch.nn.functional as F


def window_partition(x: torch.Tensor, window_size: int) -> torch.Tensor:
    B, H, W, C = x.shape
    x = x.view(B, H // window_size, window_size, W // window_size, window_size, C)
    return x.permute(0, 1, 3, 2, 4, 5).reshape(-1, window_size * window_size, C)


def window_reverse(windows: torch.Tensor, window_size: int, H: int, W: int) -> torch.Tensor:
    B = windows.shape[0] // (H * W // window_size // window_size)
    x = windows.view(B, H // window_size, W // window_size, window_size, window_size, -1)
    return x.permute(0, 1, 3, 2, 4, 5).reshape(B, H, W, -1)


def _log_relative_positions(window_size: int) -> torch.Tensor:
    coords = torch.stack(torch.meshgrid(
        torch.arange(window_size), torch.arange(window_size), indexing="ij"))
    flat = torch.flatten(coords, 1)
    rel = flat[:, :, None] - flat[:, None, :]           # 2, N, N
    rel = rel.permute(1, 2, 0).contiguous().float()     # N, N, 2
    return torch.sign(rel) * torch.log1p(rel.abs())


class WindowAttention(nn.Module):
    """Multi-head self-attention within a window, with a learned
    continuous relative-position bias (small MLP on log-spaced offsets).

    The bias MLP maps coordinate offsets, so one set of weights serves any
    effective window size; tables are cached per size.
    """

    def __init__(self, dim: int, window_size: int, num_heads: int, bias_hidden: int = 32):
        super().__init__()
        if dim % num_heads != 0:
            raise ValueError(f"dim {dim} not divisible by num_heads {num_heads}")
        self.dim = dim
        self.window_size = window_size
        self.num_heads = num_heads
        self.scale = (dim // num_heads) ** -0.5

        self.qkv = nn.Linear(dim, dim * 3)
        self.proj = nn.Linear(dim, dim)
        self.bias_mlp = nn.Sequential(
            nn.Linear(2, bias_hidden), nn.ReLU(inplace=True), nn.Linear(bias_hidden, num_heads))
        self._rel_pos_cache: dict[int, torch.Tensor] = {}

    def _rel_pos(self, window: int, device) -> torch.Tensor:
        table = self._rel_pos_cache.get(window)
        if table is None or table.device != device:
            table = _log_relative_positions(window).to(device)
            self._rel_pos_cache[window] = table
        return table

    def forward(self, x: torch.Tensor, mask: torch.Tensor | None = None) -> torch.Tensor:
        # x: (num_windows*B, N, C); mask: (num_windows, N, N) or None
        Bw, N, C = x.shape
        window = int(round(math.sqrt(N)))
        qkv = self.qkv(x).reshape(Bw, N, 3, self.num_heads, C // self.num_heads).permute(2, 0, 3, 1, 4)
        q, k, v = qkv[0], qkv[1], qkv[2]

        attn = (q * self.scale) @ k.transpose(-2, -1)
        bias = self.bias_mlp(self._rel_pos(window, x.device).to(x.dtype)).permute(2, 0, 1)
        attn = attn + bias.unsqueeze(0)
        if mask is not None:
            nw = mask.shape[0]
            attn = attn.view(Bw // nw, nw, self.num_heads, N, N) + mask.unsqueeze(1).unsqueeze(0)
            attn = attn.view(Bw, self.num_heads, N, N)
        attn = attn.softmax(dim=-1)
        out = (attn @ v).transpose(1, 2).reshape(Bw, N, C)
        return self.proj(out)


class Mlp(nn.Module):
    def __init__(self, dim: int, hidden: int):
        super().__init__()
        self.fc1 = nn.Linear(dim, hidden)
        self.fc2 = nn.Linear(hidden, dim)

    def forward(self, x):
        return self.fc2(F.gelu(self.fc1(x)))


def _shift_attn_mask(H: int, W: int, window_size: int, shift: int,
                     device, dtype) -> torch.Tensor:
    """Mask that keeps shifted-window attention within original regions."""
    img_mask = torch.zeros(1, H, W, 1, device=device)
    slices = (slice(0, -window_size), slice(-window_size, -shift), slice(-shift, None))
    cnt = 0
    for hs in slices:
        for ws in slices:
            img_mask[:, hs, ws, :] = cnt
            cnt += 1
    mask_windows = window_partition(img_mask, window_size).squeeze(-1)   # nW, N
    attn_mask = mask_windows.unsqueeze(1) - mask_windows.unsqueeze(2)
    return torch.where(attn_mask != 0, torch.full_like(attn_mask, -100.0),
                       torch.zeros_like(attn_mask)).to(dtype)


class WindowedBlock(nn.Module):
    """Pre-norm windowed attention + MLP, optionally on a shifted grid."""

    def __init__(self, dim: int, num_heads: int, window_size: int, shifted: bool,
                 mlp_ratio: float = 4.0, bias_hidden: int = 32):
        super().__init__()
        self.window_size = window_size
        self.shifted = shifted
        self.norm1 = nn.LayerNorm(dim)
        self.attn = WindowAttention(dim, window_size, num_heads, bias_hidden=bias_hidden)
        self.norm2 = nn.LayerNorm(dim)
        self.mlp = Mlp(dim, max(1, int(dim * mlp_ratio)))
        self._mask_cache: dict[tuple, torch.Tensor] = {}

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        B, H, W, C = x.shape
        ws = min(self.window_size, H, W)
        shift = ws // 2 if (self.shifted and (H > ws or W > ws)) else 0

        shortcut = x
        x = self.norm1(x)
        if shift:
            x = torch.roll(x, shifts=(-shift, -shift), dims=(1, 2))
            key = (H, W, ws, shift, x.device, x.dtype)
            mask = self._mask_cache.get(key)
            if mask is None:
                mask = _shift_attn_mask(H, W, ws, shift, x.device, x.dtype)
                self._mask_cache[key] = mask
        else:
            mask = None

        if H % ws or W % ws:
            raise ValueError(
                f"token map {H}x{W} not divisible by effective window {ws}; "
                "choose a window size compatible with every stage resolution")
        windows = window_partition(x, ws)
        windows = self.attn(windows, mask)
        x = window_reverse(windows, ws, H, W)
        if shift:
            x = torch.roll(x, shifts=(shift, shift), dims=(1, 2))
        x = shortcut + x
        return x + self.mlp(self.norm2(x))


class PatchMerging(nn.Module):
    """2x2 neighborhood concat + linear projection: halves H/W, doubles C."""

    def __init__(self, dim: int):
        super().__init__()
        self.norm = nn.LayerNorm(4 * dim)
        self.reduction = nn.Linear(4 * dim, 2 * dim, bias=False)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        B, H, W, C = x.shape
        x = x.view(B, H // 2, 2, W // 2, 2, C).permute(0, 1, 3, 2, 4, 5).reshape(B, H // 2, W // 2, 4 * C)
        return self.reduction(self.norm(x))


class ConvBlock(nn.Module):
    """Residual 3x3 conv block used by the CNN backbone variant."""

    def __init__(self, dim: int):
        super().__init__()
        self.conv1 = nn.Conv2d(dim, dim, 3, padding=1)
        self.conv2 = nn.Conv2d(dim, dim, 3, padding=1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        # channels-last in, channels-last out
        y = x.permute(0, 3, 1, 2)
        y = self.conv2(F.gelu(self.conv1(y)))
        return x + y.permute(0, 2, 3, 1)


class ConvDownsample(nn.Module):
    def __init__(self, dim: int):
        super().__init__()
        self.conv = nn.Conv2d(dim, 2 * dim, 2, stride=2)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.conv(x.permute(0, 3, 1, 2)).permute(0, 2, 3, 1)


def make_stage(kind: str, dim: int, depth: int, num_heads: int, window_size: int,
               mlp_ratio: float = 4.0, bias_hidden: int = 32) -> nn.Module:
    """A stage is `depth` blocks at constant resolution and width."""
    if kind == "windowed":
        blocks = [WindowedBlock(dim, num_heads, window_size, shifted=(i % 2 == 1),
                                mlp_ratio=mlp_ratio, bias_hidden=bias_hidden)
                  for i in range(depth)]
    elif kind == "cnn":
        blocks = [ConvBlock(dim) for _ in range(depth)]
    else:
        raise ValueError(f"unknown backbone stage kind {kind!r}")
    return nn.Sequential(*blocks)


def init_backbone_weights(module: nn.Module) -> None:
    """Truncated-normal projections (sigma=0.02), zeroed norm biases."""
    for m in module.modules():
        if isinstance(m, nn.Linear):
            nn.init.trunc_normal_(m.weight, std=0.02)
            if m.bias is not None:
                nn.init.zeros_(m.bias)
        elif isinstance(m, nn.LayerNorm):
            nn.init.ones_(m.weight)
            nn.init.zeros_(m.bias)
        elif isinstance(m, (nn.Conv2d, nn.ConvTranspose2d)):
            fan_in = m.in_channels * math.prod(m.kernel_size)
            nn.init.trunc_normal_(m.weight, std=min(0.02, (2.0 / fan_in) ** 0.5))
            if m.bias is not None:
                nn.init.zeros_(m.bias)
