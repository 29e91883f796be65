import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from bessplan.conformal import (FLOOR, ConformalThreshold, SplitConformalBox, batch_scores, calibrate,
                                calibrate_per_target, coverage, inflate, quantile_index, score)
from bessplan.exceptions import DimensionMismatch, EmptyCalibration, EmptyTestSet, ValidationError


def test_score_examples():
    lo, up = np.zeros((2, 3)), np.full((2, 3), 2.0)
    assert score(lo, up, np.ones((2, 3))) == -1.0
    truth = np.ones((2, 3))
    truth[1, 2] = 2.3
    assert score(lo, up, truth) == pytest.approx(0.3)
    truth[1, 2] = 2.0
    assert score(lo, up, truth) == 0.0
    with pytest.raises(DimensionMismatch):
        score(lo, up, np.ones(3))


def test_calibrate_examples():
    t = calibrate(np.arange(1, 101), 0.1)
    assert t.q_star == 91 and t.n_cal == 100
    assert calibrate([4.2], 0.5).q_star == 4.2
    assert math.isinf(calibrate(np.arange(10.0), 0.01).q_star)


def test_calibrate_order_free():
    rng = np.random.default_rng(0)
    s = rng.normal(size=57)
    assert calibrate(s, 0.2).q_star == calibrate(rng.permutation(s), 0.2).q_star
    assert calibrate(s, 0.2).q_star in s


def test_calibrate_errors():
    with pytest.raises(EmptyCalibration):
        calibrate([], 0.1)
    with pytest.raises(ValidationError):
        calibrate([1.0], 1.0)
    with pytest.raises(ValidationError):
        calibrate([1.0, np.nan], 0.1)


def test_floor_rule():
    assert quantile_index(100, 0.1) == 91
    assert quantile_index(100, 0.1, FLOOR) == 90
    assert calibrate(np.arange(1, 101), 0.1, rule=FLOOR).q_star == 90
    with pytest.raises(ValidationError):
        quantile_index(10, 0.1, "round")


def test_inflate_examples():
    lo, up = np.array([1.0]), np.array([2.0])
    assert inflate(lo, up, 0.0) == (lo, up)
    a, b = inflate(lo, up, 0.5)
    assert a[0] == 0.5 and b[0] == 2.5


def test_inflate_infinite_needs_limits():
    lo, up = np.zeros((2, 6)), np.ones((2, 6))
    with pytest.raises(ValidationError):
        inflate(lo, up, math.inf)
    cap = np.array([10.0] * 3 + [4.0] * 3)
    a, b = inflate(lo, up, math.inf, (np.zeros(6), cap))
    assert np.all(a == 0) and np.all(b == cap)


def test_per_target_offsets():
    t = ConformalThreshold(0.5, 0.1, 10, q_price=0.5, q_load=0.2)
    a, b = inflate(np.zeros(6), np.ones(6), t)
    assert np.allclose(a, [-0.5] * 3 + [-0.2] * 3) and np.allclose(b, [1.5] * 3 + [1.2] * 3)
    assert ConformalThreshold.from_dict(t.to_dict()) == t


@settings(max_examples=100, deadline=None)
@given(st.floats(0, 10), st.floats(0, 10), st.integers(0, 1000))
def test_inflate_monotone(q1, q2, seed):
    q1, q2 = sorted((q1, q2))
    rng = np.random.default_rng(seed)
    lo = rng.normal(size=5)
    up = lo + rng.uniform(0, 1, size=5)
    a1, b1 = inflate(lo, up, q1)
    a2, b2 = inflate(lo, up, q2)
    assert np.all(a2 <= a1) and np.all(b1 <= b2)


@settings(max_examples=100, deadline=None)
@given(st.floats(-3, 3), st.floats(-3, 3), st.integers(0, 1000))
def test_coverage_monotone(q1, q2, seed):
    q1, q2 = sorted((q1, q2))
    rng = np.random.default_rng(seed)
    truth = rng.normal(size=(30, 4))
    lo, up = -np.ones((30, 4)), np.ones((30, 4))
    assert coverage(lo, up, truth, q1) <= coverage(lo, up, truth, q2)


def test_coverage_extremes():
    rng = np.random.default_rng(1)
    truth = rng.normal(size=(50, 2, 6))
    lo, up = np.zeros_like(truth), np.zeros_like(truth)
    assert coverage(lo, up, truth, math.inf) == 1.0
    assert coverage(lo, up, truth, batch_scores(lo, up, truth).min() - 1) == 0.0
    with pytest.raises(EmptyTestSet):
        coverage(lo[:0], up[:0], truth[:0], 1.0)


def _gaussian_coverage(alpha, rng, n_cal=500, n_test=10_000, dim=3):
    lo, up = -np.ones(dim), np.ones(dim)
    cal = rng.normal(size=(n_cal, dim))
    test = rng.normal(size=(n_test, dim))
    thr = calibrate(batch_scores(np.broadcast_to(lo, cal.shape), np.broadcast_to(up, cal.shape), cal), alpha)
    return coverage(np.broadcast_to(lo, test.shape), np.broadcast_to(up, test.shape), test, thr)


def test_monte_carlo_coverage_single():
    # one calibration draw: conditional coverage has sd ~0.013 at n_cal=500
    cov = _gaussian_coverage(0.1, np.random.default_rng(0))
    assert 0.88 <= cov <= 0.921


def test_per_target_calibration_covers_both():
    rng = np.random.default_rng(3)
    truth = rng.normal(size=(400, 2, 6))
    truth[..., 3:] *= 10
    lo, up = -np.ones_like(truth), np.ones_like(truth)
    t = calibrate_per_target(lo, up, truth, 0.1)
    assert t.per_target and t.q_load > t.q_price
    price = batch_scores(lo[..., :3], up[..., :3], truth[..., :3]) <= t.q_price
    load = batch_scores(lo[..., 3:], up[..., 3:], truth[..., 3:]) <= t.q_load
    assert price.mean() >= 0.9 and load.mean() >= 0.9
    # joint coverage is only guaranteed at 1 - 2 alpha
    assert coverage(lo, up, truth, t) == np.mean(price & load) >= 0.8
    with pytest.raises(EmptyCalibration):
        calibrate_per_target(lo[:0], up[:0], truth[:0], 0.1)


class _Fixed:
    def predict_interval(self, X):
        n = np.asarray(X).shape[0]
        return -np.ones((n, 1, 6)), np.ones((n, 1, 6))


def test_split_conformal_estimator():
    rng = np.random.default_rng(4)
    Yc, Yt = rng.normal(size=(300, 1, 6)), rng.normal(size=(3000, 1, 6))
    box = SplitConformalBox(_Fixed(), alpha=0.2).fit(np.zeros((300, 1)), Yc)
    assert box.threshold_.n_cal == 300
    lo, up = box.predict_box(np.zeros((2, 1)))
    assert np.allclose(up - lo, 2 + 2 * box.threshold_.q_star)
    assert abs(box.coverage(np.zeros((3000, 1)), Yt) - 0.8) < 0.05
