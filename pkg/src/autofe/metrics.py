"""Scoring metrics: 1-RAE for regression, F1 for classification."""

from __future__ import annotations

import numpy as np


class ConstantTarget(ValueError):
    """The regression target has zero spread, so RAE is undefined."""


def one_minus_rae(y: np.ndarray, predictions: np.ndarray) -> float:
    """1 - (sum |y - yhat| / sum |y - mean(y)|).

    1.0 for a perfect predictor, 0.0 for the constant-mean predictor, and
    negative for anything worse than that.
    """
    y = np.asarray(y, dtype=np.float64)
    predictions = np.asarray(predictions, dtype=np.float64)
    if y.shape != predictions.shape:
        raise ValueError("length mismatch")
    denom = np.abs(y - y.mean()).sum()
    if denom == 0:
        raise ConstantTarget("target vector is constant")
    return float(1.0 - np.abs(y - predictions).sum() / denom)


def f1_score(y: np.ndarray, predictions: np.ndarray) -> float:
    """Binary: F1 of the label-1 class (0 when precision+recall is 0).
    More than two classes: micro-averaged F1."""
    y = np.asarray(y).astype(np.int64)
    predictions = np.asarray(predictions).astype(np.int64)
    if y.shape != predictions.shape:
        raise ValueError("length mismatch")
    labels = np.unique(np.concatenate([y, predictions]))
    if labels.size <= 2 and labels.max(initial=0) <= 1:
        tp = int(np.sum((predictions == 1) & (y == 1)))
        fp = int(np.sum((predictions == 1) & (y == 0)))
        fn = int(np.sum((predictions == 0) & (y == 1)))
        if 2 * tp + fp + fn == 0:
            return 0.0
        return float(2 * tp / (2 * tp + fp + fn))
    # single-label multiclass: micro F1 reduces to accuracy
    return float(np.mean(y == predictions))
