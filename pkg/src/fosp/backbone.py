"""Four-stage hierarchical encoder producing a coarse-to-fine feature pyramid.

Stage strides are 4, 8, 16, 32. Outputs are returned coarsest first, so level ``i``
(1-based) sits at ``H / 2**(6 - i)``.
"""

from __future__ import annotations

import torch
import torch.nn as nn
import torch.nn.functional as F


class ShapeError(ValueError):
    pass


def check_image(x: torch.Tensor) -> None:
    if x.dim() != 4 or x.shape[1] != 3:
        raise ShapeError(f"expected an image batch Nx3xHxW, got {tuple(x.shape)}")
    bad = [f"{name}={size}" for name, size in (("height", x.shape[2]), ("width", x.shape[3])) if size % 32]
    if bad:
        raise ShapeError(f"image {' and '.join(bad)} not divisible by 32")
    if not torch.isfinite(x).all():
        raise ValueError("image contains non-finite values")


class LayerNorm2d(nn.Module):
    """LayerNorm over the channel axis of an NCHW tensor."""

    def __init__(self, channels: int, eps: float = 1e-6):
        super().__init__()
        self.norm = nn.LayerNorm(channels, eps=eps)

    def forward(self, x):
        return self.norm(x.permute(0, 2, 3, 1)).permute(0, 3, 1, 2)


class PatchEmbed(nn.Module):
    def __init__(self, in_ch, out_ch, kernel, stride):
        super().__init__()
        self.proj = nn.Conv2d(in_ch, out_ch, kernel, stride=stride, padding=kernel // 2)
        self.norm = LayerNorm2d(out_ch)

    def forward(self, x):
        return self.norm(self.proj(x))


class ConvMixer(nn.Module):
    """Depthwise 3x3 spatial mixing followed by a pointwise MLP, both residual."""

    def __init__(self, dim, expansion=2):
        super().__init__()
        self.norm1 = LayerNorm2d(dim)
        self.spatial = nn.Conv2d(dim, dim, 3, padding=1, groups=dim)
        self.norm2 = LayerNorm2d(dim)
        self.mlp = nn.Sequential(
            nn.Conv2d(dim, dim * expansion, 1),
            nn.GELU(),
            nn.Conv2d(dim * expansion, dim, 1),
        )

    def forward(self, x):
        x = x + self.spatial(self.norm1(x))
        return x + self.mlp(self.norm2(x))


class AttentionMixer(nn.Module):
    """Self-attention with spatially reduced keys/values, then a pointwise MLP."""

    def __init__(self, dim, heads=1, reduction=1, expansion=2):
        super().__init__()
        self.norm1 = LayerNorm2d(dim)
        self.reduce = nn.Conv2d(dim, dim, reduction, stride=reduction) if reduction > 1 else nn.Identity()
        self.attn = nn.MultiheadAttention(dim, heads, batch_first=True)
        self.norm2 = LayerNorm2d(dim)
        self.mlp = nn.Sequential(
            nn.Conv2d(dim, dim * expansion, 1),
            nn.GELU(),
            nn.Conv2d(dim * expansion, dim, 1),
        )

    def forward(self, x):
        n, c, h, w = x.shape
        y = self.norm1(x)
        q = y.flatten(2).transpose(1, 2)
        kv = self.reduce(y).flatten(2).transpose(1, 2)
        out, _ = self.attn(q, kv, kv, need_weights=False)
        x = x + out.transpose(1, 2).reshape(n, c, h, w)
        return x + self.mlp(self.norm2(x))


class HierarchicalEncoder(nn.Module):
    """Strided patch embeddings with mixing blocks; a stand-in for a MiT-style backbone.

    Args:
        channels: pyramid channel counts ordered coarse to fine, ``(C_1, C_2, C_3, C_4)``.
        depths: mixing blocks per stage, ordered fine to coarse (the order stages run).
        mixer: ``"conv"`` or ``"attention"``.
    """

    def __init__(self, channels=(256, 160, 64, 32), depths=(1, 1, 1, 1), mixer="conv"):
        super().__init__()
        if len(channels) != 4 or len(depths) != 4:
            raise ValueError("channels and depths need four entries each")
        if mixer not in ("conv", "attention"):
            raise ValueError(f"unknown mixer {mixer!r}")
        self.channels = tuple(int(c) for c in channels)
        fine_to_coarse = self.channels[::-1]
        self.embeds = nn.ModuleList()
        self.stages = nn.ModuleList()
        in_ch = 3
        for k, (ch, depth) in enumerate(zip(fine_to_coarse, depths)):
            kernel, stride = (7, 4) if k == 0 else (3, 2)
            self.embeds.append(PatchEmbed(in_ch, ch, kernel, stride))
            if mixer == "conv":
                blocks = [ConvMixer(ch) for _ in range(depth)]
            else:
                blocks = [AttentionMixer(ch, reduction=(8, 4, 2, 1)[k]) for _ in range(depth)]
            self.stages.append(nn.Sequential(*blocks, LayerNorm2d(ch)))
            in_ch = ch

    def forward(self, image: torch.Tensor) -> list[torch.Tensor]:
        check_image(image)
        x = image - 0.5
        feats = []
        for embed, stage in zip(self.embeds, self.stages):
            x = stage(embed(x))
            feats.append(x)
        return feats[::-1]


def check_pyramid(feats: list[torch.Tensor], height: int, width: int) -> None:
    if len(feats) != 4:
        raise ShapeError(f"pyramid needs 4 levels, got {len(feats)}")
    for i, f in enumerate(feats, start=1):
        s = 2 ** (6 - i)
        if tuple(f.shape[-2:]) != (height // s, width // s):
            raise ShapeError(f"level {i} is {tuple(f.shape[-2:])}, expected {(height // s, width // s)}")


def upsample2x(x: torch.Tensor) -> torch.Tensor:
    return F.interpolate(x, scale_factor=2, mode="bilinear", align_corners=False)


def downsample2x(x: torch.Tensor) -> torch.Tensor:
    return F.avg_pool2d(x, 2)


def resize(x: torch.Tensor, size) -> torch.Tensor:
    if tuple(x.shape[-2:]) == tuple(size):
        return x
    return F.interpolate(x, size=tuple(size), mode="bilinear", align_corners=False)
