"""Soft confidence weighting of training samples and adaptive regularization.

Anomaly scores are turned into per-sample weights w_i = min(1, t / s_i) with
the fence t = Q3 + kappa * (Q3 - Q1) computed over the score batch. Model
uncertainty is measured as det of the 2x2 covariance of aligned train and
validation loss series and feeds lambda = lambda0 * (1 + gamma * det).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .diffcore import ParamSet

__all__ = [
    "SCORE_SHIFT_EPS",
    "ConfidenceState",
    "RegularizerState",
    "LossPairSeries",
    "quartiles",
    "iqr_threshold",
    "saturated_weights",
    "confidence_weights",
    "data_weighted_loss",
    "loss_covariance",
    "series_det",
    "adaptive_lambda",
    "regularizer_state",
    "scl_loss",
]

# Floor applied to shifted scores so the saturated inverse stays defined
# when a score batch contains zeros or negative values (flow NLL can be <= 0).
SCORE_SHIFT_EPS = 1e-8

# Sample covariances are PSD up to rounding; dets below this are a bug upstream.
_DET_TOL = 1e-12


def _readonly(arr: np.ndarray) -> np.ndarray:
    arr = np.array(arr, dtype=np.float64)
    arr.flags.writeable = False
    return arr


@dataclass(frozen=True)
class ConfidenceState:
    """Per-sample weights plus the statistics they were derived from."""

    weights: np.ndarray
    threshold: float
    q1: float
    q3: float
    kappa: float
    epoch: int
    score_shift: float

    def __post_init__(self):
        object.__setattr__(self, "weights", _readonly(self.weights))
        w = self.weights
        if w.size and (w.min() < 0.0 or w.max() > 1.0):
            raise ValueError("confidence weights must lie in [0, 1]")

    def summary(self) -> dict[str, float]:
        w = self.weights
        return {
            "weight_min": float(w.min()),
            "weight_median": float(np.median(w)),
            "weight_frac_below_1": float(np.mean(w < 1.0)),
        }


@dataclass(frozen=True)
class RegularizerState:
    """Adaptive L2 coefficient derived from a train/val loss covariance."""

    lambda0: float
    gamma: float
    sigma: np.ndarray
    det_sigma: float
    lam: float

    def __post_init__(self):
        object.__setattr__(self, "sigma", _readonly(self.sigma))


@dataclass(frozen=True)
class LossPairSeries:
    """Aligned (train, val) loss values collected over inner steps."""

    train: np.ndarray
    val: np.ndarray

    def __post_init__(self):
        train = _readonly(self.train)
        val = _readonly(self.val)
        if train.ndim != 1 or val.ndim != 1 or train.shape != val.shape:
            raise ValueError("train and val series must be 1-D and equally long")
        if not (np.all(np.isfinite(train)) and np.all(np.isfinite(val))):
            raise ValueError("loss series must be finite")
        object.__setattr__(self, "train", train)
        object.__setattr__(self, "val", val)

    @classmethod
    def from_pairs(cls, pairs) -> "LossPairSeries":
        train, val = zip(*pairs)
        return cls(np.asarray(train, dtype=np.float64), np.asarray(val, dtype=np.float64))

    def __len__(self) -> int:
        return self.train.size


def quartiles(values: np.ndarray) -> tuple[float, float]:
    """First and third quartiles with linear interpolation at p*(n-1)."""
    values = np.asarray(values, dtype=np.float64)
    if values.size == 0:
        raise ValueError("quartiles of an empty array are undefined")
    if not np.all(np.isfinite(values)):
        raise ValueError("quartiles require finite values")
    q1, q3 = np.quantile(values, (0.25, 0.75))
    return float(q1), float(q3)


def iqr_threshold(scores: np.ndarray, kappa: float) -> float:
    """Upper fence t = Q3 + kappa * (Q3 - Q1) over the score batch."""
    scores = np.asarray(scores, dtype=np.float64)
    if scores.size < 2:
        raise ValueError("need at least two scores for an IQR fence")
    if kappa < 0.0:
        raise ValueError("kappa must be nonnegative")
    q1, q3 = quartiles(scores)
    return q3 + kappa * (q3 - q1)


def saturated_weights(shifted_scores: np.ndarray, threshold: float) -> np.ndarray:
    """Saturated inverse of the score: w_i = min(1, threshold / s_i)."""
    shifted_scores = np.asarray(shifted_scores, dtype=np.float64)
    with np.errstate(over="ignore", divide="ignore"):
        return np.minimum(1.0, threshold / shifted_scores)


def confidence_weights(scores: np.ndarray, kappa: float, epoch: int = 0) -> ConfidenceState:
    """Weights w_i = min(1, t / s_i) with t the IQR fence over (shifted) scores.

    If any score is <= 0 the whole batch is shifted so the minimum becomes
    SCORE_SHIFT_EPS; this preserves ordering and w <= 1 saturation. The shift
    used is recorded in the returned state.
    """
    scores = np.asarray(scores, dtype=np.float64)
    if scores.size < 2:
        raise ValueError("need at least two scores to compute weights")
    if kappa < 0.0:
        raise ValueError("kappa must be nonnegative")
    if not np.all(np.isfinite(scores)):
        raise ValueError("scores must be finite")
    lo = scores.min()
    shift = SCORE_SHIFT_EPS - lo if lo <= 0.0 else 0.0
    shifted = scores + shift
    q1, q3 = quartiles(shifted)
    t = q3 + kappa * (q3 - q1)
    weights = saturated_weights(shifted, t)
    return ConfidenceState(
        weights=weights,
        threshold=float(t),
        q1=q1,
        q3=q3,
        kappa=float(kappa),
        epoch=int(epoch),
        score_shift=float(shift),
    )


def data_weighted_loss(per_sample_losses: np.ndarray, state: ConfidenceState) -> float:
    """Weighted sum over samples: sum_i w_i * loss_i."""
    losses = np.asarray(per_sample_losses, dtype=np.float64)
    if losses.shape != state.weights.shape:
        raise ValueError(
            f"losses shape {losses.shape} does not match weights {state.weights.shape}"
        )
    return float(np.dot(state.weights, losses))


def loss_covariance(series: LossPairSeries) -> np.ndarray:
    """Unbiased 2x2 sample covariance of the paired loss series."""
    if len(series) < 2:
        raise ValueError("covariance needs at least two (train, val) pairs")
    return np.cov(np.stack([series.train, series.val]), ddof=1)


def series_det(series: LossPairSeries) -> float:
    """det of loss_covariance(series), computed cancellation-free.

    Var*Var - Cov^2 loses all significance when the two series are nearly
    collinear; the Lagrange identity rewrites the determinant as a sum of
    squared 2x2 cross products, which is exactly nonnegative.
    """
    if len(series) < 2:
        raise ValueError("covariance needs at least two (train, val) pairs")
    a = series.train - series.train.mean()
    b = series.val - series.val.mean()
    cross = a[:, None] * b[None, :] - a[None, :] * b[:, None]
    total = float(np.sum(np.triu(cross, k=1) ** 2))
    return total / (len(series) - 1) ** 2


def adaptive_lambda(lambda0: float, gamma: float, sigma: np.ndarray) -> float:
    """lambda = lambda0 * (1 + gamma * det(sigma)), det clamped at 0 from below."""
    if lambda0 < 0.0 or gamma < 0.0:
        raise ValueError("lambda0 and gamma must be nonnegative")
    sigma = np.asarray(sigma, dtype=np.float64)
    if sigma.shape != (2, 2):
        raise ValueError("sigma must be 2x2")
    det = float(np.linalg.det(sigma))
    if det < -_DET_TOL:
        raise ValueError(f"covariance determinant {det} is negative beyond tolerance")
    det = max(det, 0.0)
    return lambda0 * (1.0 + gamma * det)


def regularizer_state(lambda0: float, gamma: float, sigma: np.ndarray) -> RegularizerState:
    sigma = np.asarray(sigma, dtype=np.float64)
    lam = adaptive_lambda(lambda0, gamma, sigma)
    det = max(float(np.linalg.det(sigma)), 0.0)
    return RegularizerState(lambda0=lambda0, gamma=gamma, sigma=sigma, det_sigma=det, lam=lam)


def scl_loss(
    per_sample_losses: np.ndarray,
    state: ConfidenceState,
    params: ParamSet,
    lam: float,
) -> float:
    """Weighted data loss plus lam * ||params||^2 over all trainable entries."""
    return data_weighted_loss(per_sample_losses, state) + lam * params.sq_norm()
