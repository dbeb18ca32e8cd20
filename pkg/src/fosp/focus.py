"""Bidirectional cascade: coarse and fine pyramid levels steered toward mid resolution.

The coarsest level goes through a logits head, its sigmoid gates the features
(``Q * F + F``), the result is upsampled and merged with the next level by a conv.
The finest level mirrors this with 2x average pooling. The two mid-resolution
logits are merged into the Focus Map at 1/16 scale.
"""

from __future__ import annotations

import math

import torch
import torch.nn as nn

from .backbone import ShapeError, downsample2x, resize, upsample2x


def query_guide(feature: torch.Tensor, logits: torch.Tensor) -> torch.Tensor:
    if feature.shape[-2:] != logits.shape[-2:]:
        raise ShapeError(f"feature {tuple(feature.shape[-2:])} and logits {tuple(logits.shape[-2:])} differ in size")
    return torch.sigmoid(logits) * feature + feature


def _conv3(in_ch: int) -> nn.Conv2d:
    conv = nn.Conv2d(in_ch, 1, 3, padding=1)
    bound = 1.0 / math.sqrt(in_ch * 9)
    nn.init.uniform_(conv.weight, -bound, bound)
    nn.init.uniform_(conv.bias, -bound, bound)
    return conv


class BidirectionalCascade(nn.Module):
    """Logits heads for the extreme levels, the two cascade merges and the Focus Map fusion."""

    def __init__(self, channels=(256, 160, 64, 32)):
        super().__init__()
        c1, c2, c3, c4 = channels
        self.head_coarse = _conv3(c1)
        self.head_fine = _conv3(c4)
        self.low_mid_conv = _conv3(c1 + c2)
        self.high_mid_conv = _conv3(c4 + c3)
        self.merge = nn.Conv2d(2, 1, 1)
        nn.init.uniform_(self.merge.weight, -1 / math.sqrt(2), 1 / math.sqrt(2))
        nn.init.zeros_(self.merge.bias)

    def low_mid(self, f1: torch.Tensor, f2: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        if tuple(f2.shape[-2:]) != (2 * f1.shape[-2], 2 * f1.shape[-1]):
            raise ShapeError(f"low-mid cascade needs f2 at twice f1's size, got {tuple(f1.shape[-2:])} and {tuple(f2.shape[-2:])}")
        g1 = self.head_coarse(f1)
        guided = upsample2x(query_guide(f1, g1))
        g2 = self.low_mid_conv(torch.cat([guided, f2], dim=1))
        return g1, g2

    def high_mid(self, f4: torch.Tensor, f3: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        if tuple(f4.shape[-2:]) != (2 * f3.shape[-2], 2 * f3.shape[-1]):
            raise ShapeError(f"high-mid cascade needs f4 at twice f3's size, got {tuple(f4.shape[-2:])} and {tuple(f3.shape[-2:])}")
        g4 = self.head_fine(f4)
        guided = downsample2x(query_guide(f4, g4))
        g3 = self.high_mid_conv(torch.cat([guided, f3], dim=1))
        return g4, g3

    def focus_map(self, g2: torch.Tensor, g3: torch.Tensor) -> torch.Tensor:
        if not (torch.isfinite(g2).all() and torch.isfinite(g3).all()):
            raise ValueError("non-finite logits")
        g3 = resize(g3, g2.shape[-2:])
        return torch.sigmoid(self.merge(torch.cat([g2, g3], dim=1)))

    def forward(self, feats: list[torch.Tensor]) -> tuple[torch.Tensor, list[torch.Tensor]]:
        f1, f2, f3, f4 = feats
        g1, g2 = self.low_mid(f1, f2)
        g4, g3 = self.high_mid(f4, f3)
        return self.focus_map(g2, g3), [g1, g2, g3, g4]
