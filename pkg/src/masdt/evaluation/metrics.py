"""Accuracy, ROC and AUC for binary real(0)/fake(1) scores."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np


@dataclass(frozen=True)
class RocCurve:
    fpr: np.ndarray
    tpr: np.ndarray
    thresholds: np.ndarray  # +inf, distinct scores descending, -inf

    def __len__(self) -> int:
        return len(self.fpr)


def _validate(scores, labels):
    s = np.asarray(scores, dtype=np.float64).reshape(-1)
    y = np.asarray(labels).reshape(-1)
    if s.size == 0:
        raise ValueError("no scores given")
    if s.shape != y.shape:
        raise ValueError(f"{s.size} scores but {y.size} labels")
    if not np.isin(y, (0, 1)).all():
        raise ValueError("labels must be 0 (real) or 1 (fake)")
    return s, y.astype(int)


def accuracy(scores, labels, threshold: float = 0.5) -> float:
    """Fraction correct, predicting fake when ``score >= threshold``."""
    s, y = _validate(scores, labels)
    return float(np.mean((s >= threshold).astype(int) == y))


def roc_curve(scores, labels) -> RocCurve:
    """Threshold sweep over every distinct score; tied scores move together."""
    s, y = _validate(scores, labels)
    n_pos = int(y.sum())
    n_neg = y.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise ValueError("ROC needs both real and fake samples")
    distinct = np.unique(s)[::-1]
    order = np.argsort(-s, kind="stable")
    s_sorted, y_sorted = s[order], y[order]
    tp = np.cumsum(y_sorted)
    fp = np.cumsum(1 - y_sorted)
    # last index of each tie group in descending order
    ends = np.searchsorted(-s_sorted, -distinct, side="right") - 1
    tpr = np.concatenate([[0.0], tp[ends] / n_pos, [1.0]])
    fpr = np.concatenate([[0.0], fp[ends] / n_neg, [1.0]])
    thresholds = np.concatenate([[np.inf], distinct, [-np.inf]])
    return RocCurve(fpr, tpr, thresholds)


def auc(curve: RocCurve) -> float:
    """Trapezoidal area under the curve."""
    x, y = curve.fpr, curve.tpr
    return float(np.sum((x[1:] - x[:-1]) * (y[1:] + y[:-1]) * 0.5))


def roc_auc(scores, labels) -> float:
    return auc(roc_curve(scores, labels))
