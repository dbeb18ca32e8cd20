"""Binary cross-entropy, the multi-resolution focus loss and the total training objective."""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn.functional as F

EPS = 1e-7


@dataclass(frozen=True)
class LossWeights:
    focus_map: float = 0.1
    logits: tuple[float, float, float, float] = (0.1, 0.1, 0.1, 0.1)
    base: float = 0.5

    def __post_init__(self):
        values = (self.focus_map, self.base, *self.logits)
        if len(self.logits) != 4:
            raise ValueError("need exactly four logits weights")
        if any(not (0 <= v < float("inf")) for v in values):
            raise ValueError(f"loss weights must be finite and non-negative, got {values}")


def bce(pred: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    """Mean BCE of probabilities against a {0, 1} target, probabilities clamped to [eps, 1 - eps]."""
    if pred.shape != target.shape:
        raise ValueError(f"shape mismatch: prediction {tuple(pred.shape)} vs target {tuple(target.shape)}")
    if not ((target == 0) | (target == 1)).all():
        raise ValueError("target must be binary")
    p = pred.clamp(EPS, 1 - EPS)
    return -(target * torch.log(p) + (1 - target) * torch.log1p(-p)).mean()


def resample_target(gt: torch.Tensor, size) -> torch.Tensor:
    """Ground truth at a coarser scale: a cell is smoke if any pixel inside it is."""
    gt = gt.to(torch.get_default_dtype() if not gt.is_floating_point() else gt.dtype)
    h, w = gt.shape[-2:]
    if (h, w) == tuple(size):
        return gt
    kh, kw = h // size[0], w // size[1]
    if kh * size[0] != h or kw * size[1] != w:
        raise ValueError(f"cannot pool {h}x{w} ground truth to {tuple(size)}")
    return F.max_pool2d(gt, (kh, kw))


def focus_terms(fm, logits, gt, w: LossWeights) -> dict[str, torch.Tensor]:
    terms = {"focus_map": w.focus_map * bce(fm, resample_target(gt, fm.shape[-2:]))}
    for i, (g, lam) in enumerate(zip(logits, w.logits), start=1):
        terms[f"logits_{i}"] = lam * bce(torch.sigmoid(g), resample_target(gt, g.shape[-2:]))
    return terms


def focus_loss(fm, logits, gt, w: LossWeights | None = None) -> torch.Tensor:
    w = w or LossWeights()
    return sum(focus_terms(fm, logits, gt, w).values())


def total_loss(pred, fm, logits, gt, w: LossWeights | None = None) -> torch.Tensor:
    """Focus loss plus ``base * BCE(pred, gt)``; pass ``fm=None`` to drop the focus terms."""
    w = w or LossWeights()
    base = w.base * bce(pred, gt.to(pred.dtype))
    if fm is None:
        return base
    return focus_loss(fm, logits, gt.to(pred.dtype), w) + base
