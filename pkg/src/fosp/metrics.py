"""Segmentation metrics and the smoke-ratio split into Small / Medium / Large buckets.

Rates follow the saliency conventions: F-beta with beta^2 = 0.3 by default, mIoU averaged
over the smoke and background classes, and a per-pixel mean error M that is either squared
(MSE, the default) or absolute (MAE). Every image contributes equally to a bucket average.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

SMALL, MEDIUM, LARGE = "Small", "Medium", "Large"
BUCKETS = (SMALL, MEDIUM, LARGE)
SMALL_MAX = 0.005
MEDIUM_MAX = 0.025
METRIC_NAMES = ("fbeta", "miou", "m", "recall", "precision")


def split_bucket(delta: float) -> str:
    """Lower-closed buckets: [0, 0.5%) Small, [0.5%, 2.5%) Medium, [2.5%, 100%] Large."""
    if not 0.0 <= delta <= 1.0:
        raise ValueError(f"smoke ratio must lie in [0, 1], got {delta}")
    if delta < SMALL_MAX:
        return SMALL
    if delta < MEDIUM_MAX:
        return MEDIUM
    return LARGE


def smoke_ratio(mask: np.ndarray) -> float:
    mask = np.asarray(mask)
    return float(np.count_nonzero(mask)) / mask.size


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int
    fp: int
    fn: int
    tn: int

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.fn + self.tn


def _check_binary(name: str, x: np.ndarray) -> np.ndarray:
    x = np.asarray(x)
    if x.dtype != bool and not np.isin(x, (0, 1)).all():
        raise ValueError(f"{name} must be binary")
    return x.astype(bool)


def confusion(pred_mask: np.ndarray, gt: np.ndarray) -> ConfusionCounts:
    pred_mask = np.asarray(pred_mask)
    gt = np.asarray(gt)
    if pred_mask.shape != gt.shape:
        raise ValueError(f"shape mismatch: prediction {pred_mask.shape} vs ground truth {gt.shape}")
    p = _check_binary("prediction", pred_mask)
    g = _check_binary("ground truth", gt)
    tp = int(np.count_nonzero(p & g))
    fp = int(np.count_nonzero(p & ~g))
    fn = int(np.count_nonzero(~p & g))
    tn = int(p.size - tp - fp - fn)
    return ConfusionCounts(tp, fp, fn, tn)


def precision(c: ConfusionCounts) -> float:
    return c.tp / (c.tp + c.fp) if c.tp + c.fp else 0.0


def recall(c: ConfusionCounts) -> float:
    return c.tp / (c.tp + c.fn) if c.tp + c.fn else 0.0


def f_beta(c: ConfusionCounts, beta_sq: float = 0.3) -> float:
    if beta_sq <= 0:
        raise ValueError("beta_sq must be positive")
    if c.tp == 0:
        return 0.0
    p, r = precision(c), recall(c)
    return (1 + beta_sq) * p * r / (beta_sq * p + r)


def miou(c: ConfusionCounts) -> float:
    if c.total == 0:
        raise ValueError("cannot score an empty image")
    # a class absent from both maps is matched perfectly
    smoke_den = c.tp + c.fp + c.fn
    bg_den = c.tn + c.fp + c.fn
    iou_smoke = c.tp / smoke_den if smoke_den else 1.0
    iou_bg = c.tn / bg_den if bg_den else 1.0
    return 0.5 * (iou_smoke + iou_bg)


def m_error(pred: np.ndarray, gt: np.ndarray, definition: str = "MSE") -> float:
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch: prediction {pred.shape} vs ground truth {gt.shape}")
    diff = pred - gt
    if definition == "MSE":
        return float(np.mean(diff * diff))
    if definition == "MAE":
        return float(np.mean(np.abs(diff)))
    raise ValueError(f"unknown M definition {definition!r}; use MSE or MAE")


def score_image(
    prob: np.ndarray,
    gt: np.ndarray,
    beta_sq: float = 0.3,
    m_definition: str = "MSE",
    threshold: float = 0.5,
) -> dict[str, float]:
    prob = np.asarray(prob, dtype=np.float64)
    c = confusion(prob > threshold, gt)
    return {
        "fbeta": f_beta(c, beta_sq),
        "miou": miou(c),
        "m": m_error(prob, gt, m_definition),
        "recall": recall(c),
        "precision": precision(c),
    }


@dataclass
class MetricsReport:
    rows: dict[str, dict[str, float] | None]
    counts: dict[str, int]
    beta_sq: float
    m_definition: str
    threshold: float
    per_image: list[dict[str, float]] = field(default_factory=list, repr=False)

    def to_dict(self) -> dict:
        return {
            "rows": self.rows,
            "counts": self.counts,
            "beta_sq": self.beta_sq,
            "m_definition": self.m_definition,
            "threshold": self.threshold,
        }

    def table(self) -> str:
        """Per-bucket F-beta / mIoU / M in percent, laid out Total, Small, Medium, Large."""
        order = ("Total",) + BUCKETS
        top = "".join(f"| {name:^26} " for name in order)
        sub = "".join(f"| {'Fb':>7} {'mIoU':>7} {'M':>8} " for _ in order)
        cells = []
        for name in order:
            row = self.rows[name]
            if row is None:
                cells.append(f"| {'(empty)':^26} ")
            else:
                cells.append(f"| {100 * row['fbeta']:7.2f} {100 * row['miou']:7.2f} {row['m']:8.4f} ")
        counts = ", ".join(f"{k}={self.counts[k]}" for k in order)
        return "\n".join(
            [
                top + "|",
                sub + "|",
                "".join(cells) + "|",
                f"samples: {counts}; beta^2={self.beta_sq}; M={self.m_definition}; threshold={self.threshold}",
            ]
        )


def _mean_rows(scores: Sequence[dict[str, float]]) -> dict[str, float] | None:
    if not scores:
        return None
    # fixed summation order keeps reports bit-stable
    return {k: float(sum(s[k] for s in scores) / len(scores)) for k in METRIC_NAMES}


def evaluate(
    samples: Iterable[tuple[np.ndarray, np.ndarray, float]],
    beta_sq: float = 0.3,
    m_definition: str = "MSE",
    threshold: float = 0.5,
) -> MetricsReport:
    """Score ``(probability map, ground-truth mask, delta)`` triples into a bucketed report."""
    per_image = []
    for i, (prob, gt, delta) in enumerate(samples):
        if delta is None:
            raise ValueError(f"sample {i} has no smoke ratio")
        s = score_image(prob, gt, beta_sq, m_definition, threshold)
        s["bucket"] = split_bucket(float(delta))
        per_image.append(s)
    rows: dict[str, dict[str, float] | None] = {"Total": _mean_rows(per_image)}
    counts = {"Total": len(per_image)}
    for b in BUCKETS:
        group = [s for s in per_image if s["bucket"] == b]
        rows[b] = _mean_rows(group)
        counts[b] = len(group)
    return MetricsReport(rows, counts, beta_sq, m_definition, threshold, per_image)
