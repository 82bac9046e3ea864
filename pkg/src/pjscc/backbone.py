"""Transformer feature machinery: patch embedding, shifted-window attention
blocks and the down/upsampling stages used by the encoder (TFE) and the
decoder (TFS).

Feature maps cross module boundaries as ``[B, C, H, W]`` tensors; attention
internals work on channels-last tokens.
"""
from __future__ import annotations

import enum
from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F


class Resample(str, enum.Enum):
    DOWN = "down"
    UP = "up"
    NONE = "none"


@dataclass(frozen=True)
class StageConfig:
    num_blocks: int
    embed_dim: int
    window_size: int
    num_heads: int
    resample: Resample = Resample.NONE
    out_dim: int | None = None
    mlp_ratio: float = 4.0

    def __post_init__(self):
        if self.num_blocks < 1:
            raise ValueError("a stage needs at least one block")
        if self.embed_dim % self.num_heads:
            raise ValueError(f"embed_dim {self.embed_dim} not divisible by "
                             f"num_heads {self.num_heads}")
        object.__setattr__(self, "resample", Resample(self.resample))


def init_weights(module: nn.Module) -> None:
    """Truncated-normal(0.02) linear weights, zero biases, unit LayerNorm."""
    if isinstance(module, nn.Linear):
        nn.init.trunc_normal_(module.weight, std=0.02)
        if module.bias is not None:
            nn.init.zeros_(module.bias)
    elif isinstance(module, nn.LayerNorm):
        nn.init.ones_(module.weight)
        nn.init.zeros_(module.bias)


class Mlp(nn.Module):
    def __init__(self, dim: int, hidden: int, out_dim: int | None = None):
        super().__init__()
        self.fc1 = nn.Linear(dim, hidden)
        self.act = nn.GELU()
        self.fc2 = nn.Linear(hidden, out_dim or dim)

    def forward(self, x):
        return self.fc2(self.act(self.fc1(x)))


class PatchEmbed(nn.Module):
    """Split an image into non-overlapping patches, project, add position."""

    def __init__(self, image_size: tuple[int, int], patch_size: int, embed_dim: int,
                 in_chans: int = 3):
        super().__init__()
        H, W = image_size
        for axis, n in (("height", H), ("width", W)):
            if n % patch_size:
                raise ValueError(f"image {axis} {n} not divisible by patch size {patch_size}")
        self.patch_size = patch_size
        self.grid = (H // patch_size, W // patch_size)
        self.proj = nn.Linear(in_chans * patch_size * patch_size, embed_dim)
        self.pos_embed = nn.Parameter(torch.zeros(1, embed_dim, *self.grid))
        nn.init.trunc_normal_(self.pos_embed, std=0.02)

    def forward(self, x):
        B, C, H, W = x.shape
        p = self.patch_size
        for axis, n in (("height", H), ("width", W)):
            if n % p:
                raise ValueError(f"image {axis} {n} not divisible by patch size {p}")
        if (H // p, W // p) != self.grid:
            raise ValueError(f"expected a {self.grid[0] * p}x{self.grid[1] * p} image, got {H}x{W}")
        # [B, C, H, W] -> [B, H/p, W/p, C*p*p]
        patches = F.pixel_unshuffle(x, p).permute(0, 2, 3, 1)
        tokens = self.proj(patches)
        return tokens.permute(0, 3, 1, 2) + self.pos_embed


def patch_embed(image: torch.Tensor, patch_size: int, embed_dim: int) -> torch.Tensor:
    """Functional form on a single ``[3, H, W]`` image with fresh parameters."""
    H, W = image.shape[-2:]
    layer = PatchEmbed((H, W), patch_size, embed_dim).to(image.dtype)
    return layer(image.unsqueeze(0))[0]


def window_partition(x, ws):
    # x: [B, H, W, C] -> [B * nW, ws*ws, C]
    B, H, W, C = x.shape
    x = x.view(B, H // ws, ws, W // ws, ws, C)
    return x.permute(0, 1, 3, 2, 4, 5).reshape(-1, ws * ws, C)


def window_reverse(windows, ws, H, W):
    C = windows.shape[-1]
    B = windows.shape[0] // ((H // ws) * (W // ws))
    x = windows.view(B, H // ws, W // ws, ws, ws, C)
    return x.permute(0, 1, 3, 2, 4, 5).reshape(B, H, W, C)


class WindowAttention(nn.Module):
    """Multi-head self-attention inside a window with relative position bias."""

    def __init__(self, dim: int, window_size: int, num_heads: int):
        super().__init__()
        self.dim = dim
        self.window_size = window_size
        self.num_heads = num_heads
        self.scale = (dim // num_heads) ** -0.5
        self.qkv = nn.Linear(dim, 3 * dim)
        self.proj = nn.Linear(dim, dim)

        ws = window_size
        self.relative_position_bias_table = nn.Parameter(
            torch.zeros((2 * ws - 1) ** 2, num_heads))
        nn.init.trunc_normal_(self.relative_position_bias_table, std=0.02)
        coords = torch.stack(torch.meshgrid(torch.arange(ws), torch.arange(ws),
                                            indexing="ij")).flatten(1)
        rel = (coords[:, :, None] - coords[:, None, :]).permute(1, 2, 0) + (ws - 1)
        index = rel[..., 0] * (2 * ws - 1) + rel[..., 1]
        self.register_buffer("relative_position_index", index, persistent=False)

    def forward(self, x, mask=None):
        # x: [B_, N, C]
        B_, N, C = x.shape
        h = self.num_heads
        qkv = self.qkv(x).reshape(B_, N, 3, h, C // h).permute(2, 0, 3, 1, 4)
        q, k, v = qkv[0], qkv[1], qkv[2]
        attn = (q * self.scale) @ k.transpose(-2, -1)
        bias = self.relative_position_bias_table[self.relative_position_index.view(-1)]
        attn = attn + bias.view(N, N, h).permute(2, 0, 1).unsqueeze(0)
        if mask is not None:
            nW = mask.shape[0]
            attn = attn.view(B_ // nW, nW, h, N, N) + mask[None, :, None].to(attn.dtype)
            attn = attn.view(B_, h, N, N)
        attn = attn.softmax(dim=-1)
        out = (attn @ v).transpose(1, 2).reshape(B_, N, C)
        return self.proj(out)


def shifted_window_mask(H: int, W: int, ws: int, shift: int) -> torch.Tensor:
    img = torch.zeros(1, H, W, 1)
    cnt = 0
    spans = (slice(0, -ws), slice(-ws, -shift), slice(-shift, None))
    for hs in spans:
        for wsl in spans:
            img[:, hs, wsl, :] = cnt
            cnt += 1
    ids = window_partition(img, ws).squeeze(-1)
    mask = ids[:, None, :] - ids[:, :, None]
    return mask.masked_fill(mask != 0, -100.0).masked_fill(mask == 0, 0.0)


class SwinLayer(nn.Module):
    """One (optionally shifted) windowed attention layer plus its MLP."""

    def __init__(self, dim: int, num_heads: int, window_size: int, shift: bool,
                 mlp_ratio: float = 4.0):
        super().__init__()
        self.window_size = window_size
        self.shift = shift
        self.norm1 = nn.LayerNorm(dim)
        self.attn = WindowAttention(dim, window_size, num_heads)
        self.norm2 = nn.LayerNorm(dim)
        self.mlp = Mlp(dim, int(dim * mlp_ratio))

    def forward(self, x):
        # x: [B, H, W, C]
        B, H, W, C = x.shape
        ws = self.window_size
        if H % ws or W % ws:
            raise ValueError(f"feature grid {H}x{W} not divisible by window size {ws}")
        shift = ws // 2 if self.shift and min(H, W) > ws else 0

        shortcut = x
        y = self.norm1(x)
        mask = None
        if shift:
            y = torch.roll(y, shifts=(-shift, -shift), dims=(1, 2))
            mask = shifted_window_mask(H, W, ws, shift).to(x.device)
        y = self.attn(window_partition(y, ws), mask)
        y = window_reverse(y, ws, H, W)
        if shift:
            y = torch.roll(y, shifts=(shift, shift), dims=(1, 2))
        x = shortcut + y
        return x + self.mlp(self.norm2(x))


class SwinBlock(nn.Module):
    """A regular-window layer followed by a shifted-window layer."""

    def __init__(self, dim: int, num_heads: int, window_size: int, mlp_ratio: float = 4.0):
        super().__init__()
        self.layers = nn.ModuleList([
            SwinLayer(dim, num_heads, window_size, shift=False, mlp_ratio=mlp_ratio),
            SwinLayer(dim, num_heads, window_size, shift=True, mlp_ratio=mlp_ratio),
        ])

    def forward(self, x):
        # x: [B, C, H, W]
        y = x.permute(0, 2, 3, 1)
        for layer in self.layers:
            y = layer(y)
        return y.permute(0, 3, 1, 2)


class PatchMerging(nn.Module):
    """2x2 neighbourhood concat + linear map: [C, H, W] -> [out_dim, H/2, W/2]."""

    def __init__(self, dim: int, out_dim: int):
        super().__init__()
        self.norm = nn.LayerNorm(4 * dim)
        self.reduction = nn.Linear(4 * dim, out_dim)

    def forward(self, x):
        B, C, H, W = x.shape
        if H % 2 or W % 2:
            raise ValueError(f"cannot downsample odd feature grid {H}x{W}")
        t = x.permute(0, 2, 3, 1)
        t = torch.cat([t[:, 0::2, 0::2], t[:, 1::2, 0::2],
                       t[:, 0::2, 1::2], t[:, 1::2, 1::2]], dim=-1)
        return self.reduction(self.norm(t)).permute(0, 3, 1, 2)


class PatchExpand(nn.Module):
    """Linear map to 4*out_dim channels then 2x2 pixel shuffle."""

    def __init__(self, dim: int, out_dim: int, scale: int = 2):
        super().__init__()
        self.scale = scale
        self.norm = nn.LayerNorm(dim)
        self.expand = nn.Linear(dim, scale * scale * out_dim)

    def forward(self, x):
        t = self.expand(self.norm(x.permute(0, 2, 3, 1)))
        return F.pixel_shuffle(t.permute(0, 3, 1, 2), self.scale)


def downsample(x: torch.Tensor, out_dim: int) -> torch.Tensor:
    """Functional patch merging on ``[C, H, W]`` with fresh parameters."""
    layer = PatchMerging(x.shape[0], out_dim).to(x.dtype)
    return layer(x.unsqueeze(0))[0]


def upsample(x: torch.Tensor, out_dim: int) -> torch.Tensor:
    layer = PatchExpand(x.shape[0], out_dim).to(x.dtype)
    return layer(x.unsqueeze(0))[0]


class TransformerStage(nn.Module):
    """``num_blocks`` Swin blocks followed by the configured resampling layer.

    With ``Resample.DOWN`` this is an encoder TFE stage; with ``Resample.UP``
    a decoder TFS stage.
    """

    def __init__(self, cfg: StageConfig):
        super().__init__()
        self.cfg = cfg
        self.blocks = nn.ModuleList([
            SwinBlock(cfg.embed_dim, cfg.num_heads, cfg.window_size, cfg.mlp_ratio)
            for _ in range(cfg.num_blocks)
        ])
        out_dim = cfg.out_dim or cfg.embed_dim
        if cfg.resample is Resample.DOWN:
            self.resample = PatchMerging(cfg.embed_dim, out_dim)
        elif cfg.resample is Resample.UP:
            self.resample = PatchExpand(cfg.embed_dim, out_dim)
        else:
            self.resample = nn.Identity()

    def forward(self, x):
        if x.shape[1] != self.cfg.embed_dim:
            raise ValueError(f"stage expects {self.cfg.embed_dim} channels, got {x.shape[1]}")
        for block in self.blocks:
            x = block(x)
        return self.resample(x)
