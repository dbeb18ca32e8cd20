"""Domain fusion of origin and foreground pyramids, the decode head, and the plain baseline head."""

from __future__ import annotations

import torch
import torch.nn as nn
import torch.nn.functional as F

from .backbone import ShapeError, resize, upsample2x


def enhance_origin(feats: list[torch.Tensor], fm: torch.Tensor) -> list[torch.Tensor]:
    """``F_i + FM_i * F_i`` with the Focus Map bilinearly resampled to each level."""
    return [f + resize(fm, f.shape[-2:]) * f for f in feats]


class PointwiseMLP(nn.Sequential):
    def __init__(self, in_ch, out_ch, hidden=None):
        hidden = hidden or out_ch
        super().__init__(nn.Conv2d(in_ch, hidden, 1), nn.GELU(), nn.Conv2d(hidden, out_ch, 1))


class DecodeHead(nn.Module):
    """1x1 conv to a single logit channel, bilinear x4 to image size."""

    def __init__(self, channels):
        super().__init__()
        self.proj = nn.Conv2d(channels, 1, 1)
        nn.init.zeros_(self.proj.weight)
        nn.init.zeros_(self.proj.bias)

    def forward(self, fused: torch.Tensor, size=None) -> torch.Tensor:
        logits = self.proj(fused)
        size = size or (4 * fused.shape[-2], 4 * fused.shape[-1])
        return F.interpolate(logits, size=tuple(size), mode="bilinear", align_corners=False)


class DomainFusion(nn.Module):
    """Coarse-to-fine merge: at each stage concat(origin, foreground, up2(previous)) -> MLP."""

    def __init__(self, channels=(256, 160, 64, 32), fuse_channels=128):
        super().__init__()
        self.channels = tuple(channels)
        self.fuse_channels = fuse_channels
        self.stages = nn.ModuleList(
            PointwiseMLP(2 * c + (fuse_channels if i else 0), fuse_channels) for i, c in enumerate(channels)
        )
        self.head = DecodeHead(fuse_channels)

    def fuse(self, origin: list[torch.Tensor], foreground: list[torch.Tensor]) -> torch.Tensor:
        fused = None
        for i, (o, f, mlp) in enumerate(zip(origin, foreground, self.stages), start=1):
            if o.shape != f.shape:
                raise ShapeError(f"stage {i}: origin {tuple(o.shape)} vs foreground {tuple(f.shape)}")
            if o.shape[1] != self.channels[i - 1]:
                raise ShapeError(f"stage {i}: expected {self.channels[i - 1]} channels, got {o.shape[1]}")
            parts = [o, f] if fused is None else [o, f, upsample2x(fused)]
            fused = mlp(torch.cat(parts, dim=1))
        return fused

    def forward(self, origin, foreground, size=None):
        return self.head(self.fuse(origin, foreground), size)


class BaselineHead(nn.Module):
    """All-MLP decoder: project every level, upsample to 1/4, concat, fuse, decode."""

    def __init__(self, channels=(256, 160, 64, 32), fuse_channels=128):
        super().__init__()
        self.proj = nn.ModuleList(nn.Conv2d(c, fuse_channels, 1) for c in channels)
        self.fuse = nn.Sequential(nn.Conv2d(4 * fuse_channels, fuse_channels, 1), nn.GELU())
        self.head = DecodeHead(fuse_channels)

    def forward(self, feats, size=None):
        target = feats[-1].shape[-2:]
        parts = [resize(p(f), target) for p, f in zip(self.proj, feats)]
        return self.head(self.fuse(torch.cat(parts, dim=1)), size)
