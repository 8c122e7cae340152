"""Prediction metrics."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy.stats import rankdata


@dataclass(frozen=True)
class EvalResult:
    auc: float
    acc: float
    n: int
    threshold: float = 0.5

    def __post_init__(self):
        if self.n < 1:
            raise ValueError("evaluation needs at least one prediction")


def _arrays(labels: Sequence[int], scores: Sequence[float]) -> tuple[np.ndarray, np.ndarray]:
    y = np.asarray(labels, dtype=np.int64)
    s = np.asarray(scores, dtype=np.float64)
    if y.shape != s.shape or y.ndim != 1:
        raise ValueError("labels and scores must be equal-length 1-D sequences")
    return y, s


def auc(labels: Sequence[int], scores: Sequence[float]) -> float:
    """Mann-Whitney AUC with half credit for ties, from average ranks."""
    y, s = _arrays(labels, scores)
    n_pos = int((y == 1).sum())
    n_neg = int((y == 0).sum())
    if n_pos == 0 or n_neg == 0:
        raise ValueError("AUC needs both classes")
    ranks = rankdata(s, method="average")
    u = ranks[y == 1].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def acc(labels: Sequence[int], scores: Sequence[float], threshold: float = 0.5) -> float:
    """Share of predictions on the right side of ``threshold`` (score >= threshold means 1)."""
    y, s = _arrays(labels, scores)
    if y.size == 0:
        raise ValueError("accuracy of an empty prediction set")
    return float(((s >= threshold).astype(np.int64) == y).mean())


def evaluate(labels: Sequence[int], scores: Sequence[float], threshold: float = 0.5) -> EvalResult:
    return EvalResult(auc(labels, scores), acc(labels, scores, threshold), len(labels), threshold)
