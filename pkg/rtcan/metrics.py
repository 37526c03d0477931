"""Pixel-confusion accumulation and the Acc / IoU / F-beta metrics (gas is the positive class)."""

from __future__ import annotations

from typing import Iterable

import numpy as np
import torch

from .errors import ShapeError
from .models import ConfusionCounts, MetricsReport

METRICS_VERSION = "1.0.0"
COUNTER_MAX = 2**63 - 1

CONVENTIONS = {
    "aggregation": "micro: confusion counts pooled over the whole split before computing metrics",
    "empty_union": "tp+fp+fn == 0 gives iou = f2 = precision = recall = 1",
    "zero_denominator": "any other zero denominator gives 0",
    "positive_class": "gas",
    "metrics_version": METRICS_VERSION,
}


def _as_bool(mask: np.ndarray | torch.Tensor) -> np.ndarray:
    if isinstance(mask, torch.Tensor):
        mask = mask.detach().cpu().numpy()
    arr = np.asarray(mask)
    if arr.size and not np.isin(arr, (0, 1)).all():
        raise ValueError("masks must be binary {0, 1}")
    return arr.astype(bool)


def confusion(pred_mask: np.ndarray | torch.Tensor, gt_mask: np.ndarray | torch.Tensor) -> ConfusionCounts:
    """Counts for one prediction/ground-truth pair of any (matching) shape."""
    pred, gt = _as_bool(pred_mask), _as_bool(gt_mask)
    if pred.shape != gt.shape:
        raise ShapeError(f"pred mask {pred.shape} and gt mask {gt.shape} differ")
    tp = int(np.count_nonzero(pred & gt))
    fp = int(np.count_nonzero(pred & ~gt))
    fn = int(np.count_nonzero(~pred & gt))
    tn = int(pred.size) - tp - fp - fn
    return ConfusionCounts(tp=tp, tn=tn, fp=fp, fn=fn)


def merge(a: ConfusionCounts, b: ConfusionCounts) -> ConfusionCounts:
    summed = {k: getattr(a, k) + getattr(b, k) for k in ("tp", "tn", "fp", "fn")}
    for k, v in summed.items():
        if v > COUNTER_MAX:
            raise OverflowError(f"confusion counter {k} exceeds 64-bit range")
    return ConfusionCounts(**summed)


def update(
    counts: ConfusionCounts, pred_mask: np.ndarray | torch.Tensor, gt_mask: np.ndarray | torch.Tensor
) -> ConfusionCounts:
    return merge(counts, confusion(pred_mask, gt_mask))


def merge_all(parts: Iterable[ConfusionCounts]) -> ConfusionCounts:
    total = ConfusionCounts()
    for part in parts:
        total = merge(total, part)
    return total


def _ratio(num: float, den: float) -> float:
    return num / den if den else 0.0


def compute(counts: ConfusionCounts, beta: float = 2.0) -> MetricsReport:
    if counts.total == 0:
        raise ValueError("cannot compute metrics from zero pixels")
    if beta <= 0:
        raise ValueError(f"beta must be positive, got {beta}")
    tp, tn, fp, fn = counts.tp, counts.tn, counts.fp, counts.fn
    accuracy = (tp + tn) / counts.total
    if tp + fp + fn == 0:
        iou = f_beta = precision = recall = 1.0
    else:
        iou = tp / (tp + fp + fn)
        precision = _ratio(tp, tp + fp)
        recall = _ratio(tp, tp + fn)
        b2 = beta * beta
        f_beta = _ratio((1 + b2) * precision * recall, b2 * precision + recall)
    return MetricsReport(
        accuracy=accuracy,
        iou=iou,
        f2=f_beta,
        precision=precision,
        recall=recall,
        beta=beta,
        conventions=dict(CONVENTIONS),
    )


def class_accuracies(counts: ConfusionCounts) -> tuple[float, float]:
    """(gas accuracy, background accuracy); a class with no pixels scores 1."""
    gas = counts.tp / (counts.tp + counts.fn) if counts.tp + counts.fn else 1.0
    background = counts.tn / (counts.tn + counts.fp) if counts.tn + counts.fp else 1.0
    return gas, background


def mean_class_accuracy(counts: ConfusionCounts) -> float:
    gas, background = class_accuracies(counts)
    return (gas + background) / 2


def macro_average(per_image: list[ConfusionCounts], beta: float = 2.0) -> dict[str, float]:
    """Per-image metrics averaged over images. Diagnostics only; headline numbers are micro."""
    if not per_image:
        return {}
    reports = [compute(c, beta) for c in per_image]
    keys = ("accuracy", "iou", "f2", "precision", "recall")
    return {k: float(np.mean([r.metric(k) for r in reports])) for k in keys}
