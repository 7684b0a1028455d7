"""Image-level evaluation: rank-based AUROC, threshold selection, P/R/F1."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

__all__ = [
    "EvalResult",
    "auroc",
    "select_threshold",
    "precision_recall_f1",
    "evaluate_scores",
]


def _validate(scores: np.ndarray, labels: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    if scores.shape != labels.shape or scores.ndim != 1:
        raise ValueError("scores and labels must be 1-D arrays of equal length")
    if not np.all(np.isfinite(scores)):
        raise ValueError("scores must be finite")
    if not np.all(np.isin(labels, (0, 1))):
        raise ValueError("labels must be 0 (nominal) or 1 (anomalous)")
    if labels.min() == labels.max():
        raise ValueError("AUROC undefined: need both classes present")
    return scores, labels.astype(np.int64)


def _midranks(values: np.ndarray) -> np.ndarray:
    """1-based ranks with ties assigned the mean rank of their group."""
    order = np.argsort(values, kind="mergesort")
    ranks = np.empty(values.size, dtype=np.float64)
    i = 0
    while i < values.size:
        j = i
        while j + 1 < values.size and values[order[j + 1]] == values[order[i]]:
            j += 1
        ranks[order[i : j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    return ranks


def auroc(scores: np.ndarray, labels: np.ndarray) -> float:
    """Rank-statistic AUROC with midrank tie handling (ties credit 1/2)."""
    scores, labels = _validate(scores, labels)
    n_pos = int(labels.sum())
    n_neg = labels.size - n_pos
    ranks = _midranks(scores)
    pos_rank_sum = float(ranks[labels == 1].sum())
    return (pos_rank_sum - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg)


def select_threshold(scores: np.ndarray, labels: np.ndarray) -> float:
    """Threshold maximizing F1 over midpoints of adjacent unique scores.

    Predictions use the strict rule score > tau. Equal-F1 candidates resolve
    toward the larger tau. A batch with a single unique score is degenerate:
    no midpoint exists and that score value is returned as-is.
    """
    scores, labels = _validate(scores, labels)
    unique = np.unique(scores)
    if unique.size == 1:
        return float(unique[0])
    candidates = 0.5 * (unique[:-1] + unique[1:])
    best_tau = candidates[0]
    best_f1 = -1.0
    for tau in candidates:
        _, _, f1 = precision_recall_f1(scores, labels, tau)
        if f1 >= best_f1:
            best_f1 = f1
            best_tau = tau
    return float(best_tau)


def precision_recall_f1(
    scores: np.ndarray, labels: np.ndarray, tau: float
) -> tuple[float, float, float]:
    """P/R/F1 for the prediction rule score > tau; zero division yields 0."""
    scores, labels = _validate(scores, labels)
    pred = scores > tau
    tp = int(np.sum(pred & (labels == 1)))
    fp = int(np.sum(pred & (labels == 0)))
    fn = int(np.sum(~pred & (labels == 1)))
    precision = tp / (tp + fp) if tp + fp > 0 else 0.0
    recall = tp / (tp + fn) if tp + fn > 0 else 0.0
    f1 = 2.0 * precision * recall / (precision + recall) if precision + recall > 0 else 0.0
    return precision, recall, f1


@dataclass(frozen=True)
class EvalResult:
    i_auroc: float
    precision: float
    recall: float
    f1: float
    threshold: float
    n_pos: int
    n_neg: int
    threshold_policy: str = "max-f1-midpoint"

    def to_dict(self) -> dict:
        return {
            "i_auroc": self.i_auroc,
            "precision": self.precision,
            "recall": self.recall,
            "f1": self.f1,
            "threshold": self.threshold,
            "n_pos": self.n_pos,
            "n_neg": self.n_neg,
            "threshold_policy": self.threshold_policy,
        }


def evaluate_scores(scores: np.ndarray, labels: np.ndarray) -> EvalResult:
    """Full image-level evaluation at the max-F1 threshold."""
    scores, labels = _validate(scores, labels)
    tau = select_threshold(scores, labels)
    precision, recall, f1 = precision_recall_f1(scores, labels, tau)
    return EvalResult(
        i_auroc=auroc(scores, labels),
        precision=precision,
        recall=recall,
        f1=f1,
        threshold=tau,
        n_pos=int(labels.sum()),
        n_neg=int(labels.size - labels.sum()),
    )
