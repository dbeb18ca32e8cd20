"""Foreground separation through a weight-shared inpainter.

One branch sees the image with the Focus Map as mask, the other the image with an
all-zeros mask. The same ``Inpainter`` instance computes both, so a zero Focus Map
gives bit-identical branches and an exactly zero foreground.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .backbone import ShapeError, resize

log = logging.getLogger(__name__)


class DivergenceError(RuntimeError):
    pass


class GatedConv(nn.Module):
    def __init__(self, in_ch, out_ch, kernel=3, stride=1):
        super().__init__()
        self.feature = nn.Conv2d(in_ch, out_ch, kernel, stride=stride, padding=kernel // 2)
        self.gate = nn.Conv2d(in_ch, out_ch, kernel, stride=stride, padding=kernel // 2)

    def forward(self, x):
        return self.feature(x) * torch.sigmoid(self.gate(x))


def _conv(in_ch, out_ch, stride=1, gated=False):
    if gated:
        return GatedConv(in_ch, out_ch, 3, stride)
    return nn.Conv2d(in_ch, out_ch, 3, stride=stride, padding=1)


class DecoderBlock(nn.Module):
    def __init__(self, in_ch, out_ch, gated=False):
        super().__init__()
        self.conv1 = _conv(in_ch, out_ch, gated=gated)
        self.conv2 = _conv(out_ch, out_ch, gated=gated)

    def forward(self, x):
        x = F.interpolate(x, scale_factor=2, mode="nearest")
        return self.conv2(F.gelu(self.conv1(x)))


class Inpainter(nn.Module):
    """RGB + mask embedding, strided conv encoder to 1/32, three 2x decoder blocks, image head.

    ``channels`` is the pyramid config ``(C_1, .., C_4)``, coarse to fine; the latent has
    ``C_1`` channels and decoder ``k`` emits ``C_{k+1}``.
    """

    def __init__(self, channels=(256, 160, 64, 32), width=16, gated=False):
        super().__init__()
        c1, c2, c3, c4 = channels
        self.embed = _conv(4, width, gated=gated)
        widths = [width, 2 * width, 4 * width, 8 * width, 16 * width]
        downs = []
        for a, b in zip(widths, widths[1:] + [c1]):
            downs.append(_conv(a, b, stride=2, gated=gated))
        self.encoder = nn.ModuleList(downs)
        self.decoders = nn.ModuleList(
            [DecoderBlock(c1, c2, gated), DecoderBlock(c2, c3, gated), DecoderBlock(c3, c4, gated)]
        )
        self.head = nn.Conv2d(c4, 3, 3, padding=1)

    def encode(self, image: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
        if mask.shape[-2:] != image.shape[-2:]:
            raise ShapeError(f"mask {tuple(mask.shape[-2:])} does not match image {tuple(image.shape[-2:])}")
        x = F.gelu(self.embed(torch.cat([image - 0.5, mask], dim=1)))
        for k, down in enumerate(self.encoder):
            x = down(x)
            if k < len(self.encoder) - 1:
                x = F.gelu(x)
        return x

    def decode(self, latent: torch.Tensor) -> list[torch.Tensor]:
        feats = [latent]
        for dec in self.decoders:
            feats.append(dec(feats[-1]))
        return feats

    def reconstruct(self, feats: list[torch.Tensor], size) -> torch.Tensor:
        x = F.interpolate(feats[-1], size=tuple(size), mode="bilinear", align_corners=False)
        return torch.sigmoid(self.head(x))

    def forward(self, image, mask):
        feats = self.decode(self.encode(image, mask))
        return feats, self.reconstruct(feats, image.shape[-2:])


def full_res_mask(fm: torch.Tensor, size) -> torch.Tensor:
    return resize(fm, size).clamp(0.0, 1.0)


def separate(
    image: torch.Tensor,
    fm: torch.Tensor | None,
    inpainter: Inpainter,
    beta: float = 10.0,
) -> list[torch.Tensor]:
    """Foreground pyramid ``beta * |F_masked - F_blank|`` at the four decoder scales.

    ``fm`` may be the 1/16 Focus Map or any map resampled to image size; ``None`` means blank.
    """
    if not beta > 0:
        raise ValueError(f"gain must be positive, got {beta}")
    size = image.shape[-2:]
    n = image.shape[0]
    blank = image.new_zeros((n, 1, *size))
    mask = blank if fm is None else full_res_mask(fm, size)
    masked = inpainter.decode(inpainter.encode(image, mask))
    plain = inpainter.decode(inpainter.encode(image, blank))
    return [beta * (a - b).abs() for a, b in zip(masked, plain)]


def coverage_mask(gt: torch.Tensor, cell: int = 16) -> torch.Tensor:
    """Coarse any-smoke cells at ``1/cell`` scale: an idealised Focus Map derived from ground truth."""
    return F.max_pool2d(gt.float(), cell)


@dataclass
class InpainterTrainResult:
    losses: list[float]
    steps: int


def _batch_masks(gt: torch.Tensor, rng: np.random.Generator) -> torch.Tensor:
    cells = coverage_mask(gt)
    if rng.random() < 0.5:
        cells = F.max_pool2d(cells, 3, stride=1, padding=1)
    return full_res_mask(cells, gt.shape[-2:])


def inpaint_loss(inpainter, images, backgrounds, masks):
    """L1 to ``B`` inside the mask and ``I`` outside, plus plain identity reconstruction with a blank mask."""
    _, recon_masked = inpainter(images, masks)
    target = masks * backgrounds + (1 - masks) * images
    _, recon_blank = inpainter(images, torch.zeros_like(masks))
    return (recon_masked - target).abs().mean() + (recon_blank - images).abs().mean()


def train_inpainter(
    inpainter: Inpainter,
    images: torch.Tensor,
    backgrounds: torch.Tensor,
    gts: torch.Tensor,
    steps: int = 600,
    batch_size: int = 6,
    learning_rate: float = 1e-3,
    seed: int = 0,
    log_every: int = 50,
) -> InpainterTrainResult:
    """Fit the inpainter on composited pairs; returns the per-step loss curve."""
    if images.shape[0] == 0:
        raise ValueError("inpainter training set is empty")
    losses: list[float] = []
    if steps <= 0:
        return InpainterTrainResult(losses, 0)
    rng = np.random.default_rng(seed)
    opt = torch.optim.AdamW(inpainter.parameters(), lr=learning_rate, weight_decay=0.0)
    inpainter.train()
    n = images.shape[0]
    for step in range(steps):
        idx = torch.from_numpy(rng.choice(n, size=min(batch_size, n), replace=False))
        masks = _batch_masks(gts[idx], rng)
        loss = inpaint_loss(inpainter, images[idx], backgrounds[idx], masks)
        if not torch.isfinite(loss):
            raise DivergenceError(f"inpainter loss became {loss.item()} at step {step}")
        opt.zero_grad(set_to_none=True)
        loss.backward()
        opt.step()
        losses.append(float(loss.item()))
        if log_every and step % log_every == 0:
            log.info("inpainter step %d loss %.5f", step, losses[-1])
    inpainter.eval()
    return InpainterTrainResult(losses, steps)


@torch.no_grad()
def masked_region_error(inpainter: Inpainter, images, backgrounds, gts) -> float:
    """Mean absolute background error over ground-truth smoke pixels, with a coverage-cell mask."""
    masks = full_res_mask(coverage_mask(gts), gts.shape[-2:])
    _, recon = inpainter(images, masks)
    sel = gts.expand_as(recon) > 0
    return float((recon - backgrounds).abs()[sel].mean())

