"""Paired-patch discriminators.

Both take the source image concatenated channelwise with either the driving
image (real pair) or the generated image (fake pair) and return a spatial map
of realness logits, one per patch.
"""
from __future__ import annotations

import torch
import torch.nn as nn

from .errors import ConfigurationError


def pair(source: torch.Tensor, other: torch.Tensor) -> torch.Tensor:
    return torch.cat([source, other], dim=1)


class PatchEmbed(nn.Module):
    """Non-overlapping kernel-p, stride-p convolution plus learned positions."""

    def __init__(self, patch_size: int = 16, embed_dim: int = 192, image_size: int = 256,
                 in_channels: int = 2, use_pos_embed: bool = True):
        super().__init__()
        if patch_size < 1 or image_size % patch_size:
            raise ConfigurationError(f"patch_size {patch_size} must divide image_size {image_size}")
        self.patch_size = patch_size
        self.grid = image_size // patch_size
        self.proj = nn.Conv2d(in_channels, embed_dim, patch_size, stride=patch_size)
        self.pos_embed = nn.Parameter(torch.zeros(1, self.grid * self.grid, embed_dim))
        nn.init.trunc_normal_(self.pos_embed, std=0.02)
        self.use_pos_embed = use_pos_embed

    @property
    def num_tokens(self) -> int:
        return self.grid * self.grid

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        tokens = self.proj(x).flatten(2).transpose(1, 2)  # (B, L, d)
        if self.use_pos_embed:
            tokens = tokens + self.pos_embed
        return tokens


class MultiHeadAttention(nn.Module):
    def __init__(self, dim: int, heads: int):
        super().__init__()
        if dim % heads:
            raise ConfigurationError(f"embed_dim {dim} not divisible by heads {heads}")
        self.heads = heads
        self.scale = (dim // heads) ** -0.5
        self.qkv = nn.Linear(dim, 3 * dim)
        self.out = nn.Linear(dim, dim)
        self.keep_attention = False
        self.last_attention: torch.Tensor | None = None

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        b, n, d = x.shape
        q, k, v = self.qkv(x).reshape(b, n, 3, self.heads, d // self.heads).permute(2, 0, 3, 1, 4)
        attn = torch.softmax((q @ k.transpose(-2, -1)) * self.scale, dim=-1)
        if self.keep_attention:
            self.last_attention = attn.detach()
        return self.out((attn @ v).transpose(1, 2).reshape(b, n, d))


class MHABlock(nn.Module):
    """Pre-norm transformer block."""

    def __init__(self, dim: int = 192, heads: int = 3, mlp_ratio: float = 4.0):
        super().__init__()
        hidden = int(dim * mlp_ratio)
        self.norm1 = nn.LayerNorm(dim)
        self.attn = MultiHeadAttention(dim, heads)
        self.norm2 = nn.LayerNorm(dim)
        self.mlp = nn.Sequential(nn.Linear(dim, hidden), nn.GELU(), nn.Linear(hidden, dim))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        x = x + self.attn(self.norm1(x))
        return x + self.mlp(self.norm2(x))


class ViTPatchDiscriminator(nn.Module):
    """Patch embedding, ``num_blocks`` attention blocks and a per-token linear
    realness head reshaped to a (grid x grid) logit map."""

    def __init__(self, num_blocks: int = 12, patch_size: int = 16, embed_dim: int = 192,
                 heads: int = 3, mlp_ratio: float = 4.0, image_size: int = 256,
                 use_pos_embed: bool = True):
        super().__init__()
        if num_blocks < 1:
            raise ConfigurationError(f"num_blocks must be >= 1, got {num_blocks}")
        self.embed = PatchEmbed(patch_size, embed_dim, image_size, 2, use_pos_embed)
        self.blocks = nn.ModuleList(MHABlock(embed_dim, heads, mlp_ratio) for _ in range(num_blocks))
        self.norm = nn.LayerNorm(embed_dim)
        self.head = nn.Linear(embed_dim, 1)
        self.apply(self._init)

    @staticmethod
    def _init(m: nn.Module):
        if isinstance(m, nn.Linear):
            nn.init.trunc_normal_(m.weight, std=0.02)
            nn.init.zeros_(m.bias)
        elif isinstance(m, nn.LayerNorm):
            nn.init.ones_(m.weight)
            nn.init.zeros_(m.bias)

    def keep_attention(self, flag: bool = True):
        for blk in self.blocks:
            blk.attn.keep_attention = flag
            blk.attn.last_attention = None

    def attention_maps(self) -> list[torch.Tensor]:
        return [blk.attn.last_attention for blk in self.blocks]

    def tokens(self, x: torch.Tensor) -> torch.Tensor:
        t = self.embed(x)
        for blk in self.blocks:
            t = blk(t)
        return t

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        g = self.embed.grid
        scores = self.head(self.norm(self.tokens(x)))  # (B, L, 1)
        return scores.transpose(1, 2).reshape(x.shape[0], 1, g, g)


class BasicPatchDiscriminator(nn.Module):
    """pix2pix 70x70 PatchGAN: three stride-2 stages, one stride-1 stage and a
    stride-1 head; a 256 input gives a 30x30 logit map."""

    def __init__(self, in_channels: int = 2, base: int = 64, n_layers: int = 3):
        super().__init__()
        layers: list[nn.Module] = [nn.Conv2d(in_channels, base, 4, 2, 1), nn.LeakyReLU(0.2)]
        mult = 1
        for i in range(1, n_layers):
            prev, mult = mult, min(2 ** i, 8)
            layers += [nn.Conv2d(base * prev, base * mult, 4, 2, 1, bias=False),
                       nn.InstanceNorm2d(base * mult), nn.LeakyReLU(0.2)]
        prev, mult = mult, min(2 ** n_layers, 8)
        layers += [nn.Conv2d(base * prev, base * mult, 4, 1, 1, bias=False),
                   nn.InstanceNorm2d(base * mult), nn.LeakyReLU(0.2),
                   nn.Conv2d(base * mult, 1, 4, 1, 1)]
        self.net = nn.Sequential(*layers)
        for m in self.modules():
            if isinstance(m, nn.Conv2d):
                nn.init.normal_(m.weight, 0.0, 0.02)
                if m.bias is not None:
                    nn.init.zeros_(m.bias)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.net(x)


def receptive_field(kernels_strides) -> int:
    """Receptive field of a conv stack given [(kernel, stride), ...]."""
    rf, jump = 1, 1
    for k, s in kernels_strides:
        rf += (k - 1) * jump
        jump *= s
    return rf


def build_discriminator(kind: str = "vit", num_blocks: int = 12, patch_size: int = 16,
                        embed_dim: int = 192, heads: int = 3, mlp_ratio: float = 4.0,
                        image_size: int = 256) -> nn.Module:
    if kind == "vit":
        return ViTPatchDiscriminator(num_blocks, patch_size, embed_dim, heads, mlp_ratio, image_size)
    if kind == "patchgan":
        return BasicPatchDiscriminator()
    raise ConfigurationError(f"unknown discriminator kind {kind!r} (expected 'vit' or 'patchgan')")
