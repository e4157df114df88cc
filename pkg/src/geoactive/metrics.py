"""Scores and aggregate tables."""

from __future__ import annotations

import math

import numpy as np

OCCUPANCY_THRESHOLD = 0.5


def voxel_iou(pred: np.ndarray, gt: np.ndarray, threshold: float = OCCUPANCY_THRESHOLD) -> float:
    """|pred >= t and gt| / |pred >= t or gt|; two empty sets score 1."""
    pred = np.asarray(pred)
    gt = np.asarray(gt, dtype=bool)
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch {pred.shape} vs {gt.shape}")
    p = pred if pred.dtype == bool else pred >= threshold
    union = int(np.count_nonzero(p | gt))
    if union == 0:
        return 1.0
    return int(np.count_nonzero(p & gt)) / union


def percent_increase(per_view: list[float]) -> list[float | None]:
    """100 (IoU_v - IoU_1) / IoU_1 per view; None when IoU_1 is zero."""
    first = per_view[0]
    if first <= 0:
        return [None] * len(per_view)
    return [0.0] + [100.0 * (v - first) / first for v in per_view[1:]]


def format_percent(values: list[float | None]) -> list[str | float]:
    return ["n/a" if v is None else round(v, 6) for v in values]


def mean_std(values) -> tuple[float, float]:
    a = np.asarray(values, dtype=np.float64)
    if a.size == 0:
        return math.nan, math.nan
    return float(a.mean()), float(a.std(ddof=1)) if a.size > 1 else 0.0


def split_indices(count: int, train_fraction: float = 0.7) -> tuple[list[int], list[int]]:
    """First round(fraction * count) scenes train, the rest test."""
    n_train = int(round(train_fraction * count))
    return list(range(n_train)), list(range(n_train, count))


def majority_accuracy(train_labels, test_labels) -> float:
    """Accuracy of always predicting the most frequent training label (lowest index on ties)."""
    counts = np.bincount(np.asarray(train_labels), minlength=1)
    guess = int(np.argmax(counts))
    test = np.asarray(test_labels)
    return float((test == guess).mean()) if test.size else math.nan
