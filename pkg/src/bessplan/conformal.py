"""Split conformal calibration of forecast boxes."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from sklearn.base import BaseEstimator

from .exceptions import DimensionMismatch, EmptyCalibration, EmptyTestSet, ValidationError

PRICE = slice(0, 3)
LOAD = slice(3, 6)
CEIL, FLOOR = "ceil", "floor"


def score(lower, upper, truth):
    """Largest signed excursion of ``truth`` outside ``[lower, upper]`` over
    every entry; negative iff the truth is strictly inside everywhere."""
    lower, upper, truth = (np.asarray(a, dtype=float) for a in (lower, upper, truth))
    if not lower.shape == upper.shape == truth.shape:
        raise DimensionMismatch("forecast and truth shapes differ")
    return float(np.max(np.maximum(lower - truth, truth - upper)))


def batch_scores(lower, upper, truth):
    """``score`` for each sample along the leading axis."""
    lower, upper, truth = (np.asarray(a, dtype=float) for a in (lower, upper, truth))
    if not lower.shape == upper.shape == truth.shape:
        raise DimensionMismatch("forecast and truth shapes differ")
    excess = np.maximum(lower - truth, truth - upper)
    return excess.reshape(excess.shape[0], -1).max(axis=1)


def quantile_index(n, alpha, rule=CEIL):
    """1-based rank of the threshold among ``n`` sorted scores."""
    x = (n + 1) * (1.0 - alpha)
    if rule == CEIL:
        return math.ceil(x - 1e-9)
    if rule == FLOOR:
        return max(1, math.floor(x + 1e-9))
    raise ValidationError(f"unknown quantile rule {rule!r}")


@dataclass(frozen=True)
class ConformalThreshold:
    """Calibrated inflation.  ``q_star`` is shared by all targets unless
    ``q_price``/``q_load`` are set (per-target calibration)."""

    q_star: float
    alpha: float
    n_cal: int
    rule: str = CEIL
    q_price: float = None
    q_load: float = None

    @property
    def per_target(self):
        return self.q_price is not None

    def offsets(self):
        """Inflation per target column (3 prices then 3 loads)."""
        if self.per_target:
            return np.array([self.q_price] * 3 + [self.q_load] * 3)
        return np.full(6, self.q_star)

    def to_dict(self):
        return dict(q_star=self.q_star, alpha=self.alpha, n_cal=self.n_cal, rule=self.rule,
                    q_price=self.q_price, q_load=self.q_load)

    @classmethod
    def from_dict(cls, d):
        return cls(**{k: d.get(k) for k in ("q_star", "alpha", "n_cal", "rule", "q_price", "q_load")})


def _quantile(scores, alpha, rule):
    s = np.sort(np.asarray(scores, dtype=float).ravel(), kind="stable")
    k = quantile_index(s.size, alpha, rule)
    return float(s[k - 1]) if k <= s.size else math.inf


def calibrate(scores, alpha, rule=CEIL):
    """Threshold = the ``ceil((n + 1)(1 - alpha))``-th smallest score
    (``+inf`` when that rank exceeds ``n``)."""
    scores = np.asarray(scores, dtype=float).ravel()
    if scores.size == 0:
        raise EmptyCalibration("no calibration scores")
    if not 0 < alpha < 1:
        raise ValidationError("alpha must lie in (0, 1)")
    if np.any(np.isnan(scores)):
        raise ValidationError("calibration scores contain NaN")
    return ConformalThreshold(_quantile(scores, alpha, rule), float(alpha), int(scores.size), rule)


def calibrate_per_target(lower, upper, truth, alpha, rule=CEIL):
    """Separate thresholds for the price and load columns of ``(n, T, 6)`` boxes."""
    lower, upper, truth = (np.asarray(a, dtype=float) for a in (lower, upper, truth))
    if lower.shape[0] == 0:
        raise EmptyCalibration("no calibration samples")
    qp = _quantile(batch_scores(lower[..., PRICE], upper[..., PRICE], truth[..., PRICE]), alpha, rule)
    ql = _quantile(batch_scores(lower[..., LOAD], upper[..., LOAD], truth[..., LOAD]), alpha, rule)
    return ConformalThreshold(max(qp, ql), float(alpha), int(lower.shape[0]), rule, qp, ql)


def inflate(lower, upper, threshold, limits=None):
    """Widen ``[lower, upper]`` by the threshold on every side.

    ``limits = (floor, cap)`` (broadcast against the last axis) clips the
    result; it is required when the threshold is infinite.
    """
    q = threshold.offsets() if isinstance(threshold, ConformalThreshold) else float(threshold)
    lo = np.asarray(lower, dtype=float) - q
    hi = np.asarray(upper, dtype=float) + q
    if limits is not None:
        floor, cap = (np.asarray(v, dtype=float) for v in limits)
        lo = np.clip(lo, floor, cap)
        hi = np.clip(hi, floor, cap)
    elif not (np.all(np.isfinite(lo)) and np.all(np.isfinite(hi))):
        raise ValidationError("infinite threshold needs physical limits to clip against")
    return lo, hi


def covered(lower, upper, truth, threshold):
    """Per-sample indicator that the truth lies inside the inflated box."""
    if isinstance(threshold, ConformalThreshold) and threshold.per_target:
        lower, upper, truth = (np.asarray(a, dtype=float) for a in (lower, upper, truth))
        return ((batch_scores(lower[..., PRICE], upper[..., PRICE], truth[..., PRICE]) <= threshold.q_price)
                & (batch_scores(lower[..., LOAD], upper[..., LOAD], truth[..., LOAD]) <= threshold.q_load))
    q = threshold.q_star if isinstance(threshold, ConformalThreshold) else float(threshold)
    return batch_scores(lower, upper, truth) <= q


def coverage(lower, upper, truth, threshold):
    """Fraction of samples whose score does not exceed the threshold."""
    if np.asarray(truth).shape[0] == 0:
        raise EmptyTestSet("no test samples")
    return float(np.mean(covered(lower, upper, truth, threshold)))


class SplitConformalBox(BaseEstimator):
    """Conformal wrapper around a fitted interval forecaster.

    ``fit(X_cal, Y_cal)`` calibrates the threshold on held-out data;
    ``predict_box`` returns inflated, clipped boxes.
    """

    def __init__(self, forecaster=None, alpha=0.1, rule=CEIL, per_target=False, limits=None):
        self.forecaster = forecaster
        self.alpha = alpha
        self.rule = rule
        self.per_target = per_target
        self.limits = limits

    def fit(self, X, Y):
        lower, upper = self.forecaster.predict_interval(X)
        Y = np.asarray(Y, dtype=float).reshape(lower.shape)
        if self.per_target:
            self.threshold_ = calibrate_per_target(lower, upper, Y, self.alpha, self.rule)
        else:
            self.threshold_ = calibrate(batch_scores(lower, upper, Y), self.alpha, self.rule)
        return self

    def predict_box(self, X):
        lower, upper = self.forecaster.predict_interval(X)
        return inflate(lower, upper, self.threshold_, self.limits)

    def coverage(self, X, Y):
        lower, upper = self.forecaster.predict_interval(X)
        return coverage(lower, upper, np.asarray(Y, dtype=float).reshape(lower.shape), self.threshold_)
