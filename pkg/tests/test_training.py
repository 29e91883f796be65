import csv
import math
import warnings

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from bessplan.assembly import ModelConfig
from bessplan.conformal import ConformalThreshold
from bessplan.exceptions import (ConfigInvalid, DegenerateWarning, EmptyTestSet, MissingThreshold,
                                 SolveFailed, SolverError)
from bessplan.predictor import QuantileLSTM, build_windows
from bessplan.synth import ScenarioSpec, generate
from bessplan.training import (ETO, DecisionFocusedForecaster, TaskTemplate, TrainConfig,
                               combined_loss_and_grads, combined_step, evaluate, split_indices, train,
                               window_gap, write_history)

H = 4


@pytest.fixture(scope="module")
def small():
    net, frame = generate(ScenarioSpec(n_buses=4, days=6, history=H, horizon=H, seed=1))
    X, Y, starts = build_windows(frame, net.n_buses, H, H, H)
    tpl = TaskTemplate.from_history(net, ModelConfig(horizon=H), Y)
    tpl.fit_scale(Y, starts)
    return net, X, Y, starts, tpl


def _est(tpl, weight, **kw):
    kw = {**dict(history=H, horizon=H, hidden_size=4, batch_size=4, epochs=2, seed=0), **kw}
    return DecisionFocusedForecaster(loss_weight=weight, template=tpl, **kw)


def test_weight_one_matches_plain_training(small):
    _, X, Y, starts, tpl = small
    kw = dict(history=H, horizon=H, hidden_size=4, batch_size=4, epochs=3, seed=3, learning_rate=1e-2)
    a = DecisionFocusedForecaster(loss_weight=1.0, **kw).fit(X, Y, starts)
    b = QuantileLSTM(**kw).fit(X, Y)
    assert all(np.array_equal(a.params_[k], b.params_[k]) for k in b.params_)


def test_weight_one_step_ignores_template(small):
    _, X, Y, starts, tpl = small
    est = _est(tpl, 1.0)
    est.initialize(X, Y)
    seq, Ys = est.sequences(X[:4]), est.scale_targets(Y[:4])
    _, g_pred, _ = est.prediction_grads(seq, Ys)
    g, m = combined_loss_and_grads(est, seq, Ys, starts[:4], None, 1.0)
    assert math.isnan(m["task_loss"])
    assert all(np.array_equal(g[k], g_pred[k]) for k in g)


def test_task_gradcheck(small):
    _, X, Y, starts, tpl = small
    est = _est(tpl, 0.0)
    est.initialize(X, Y)
    seq, Ys, st_ = est.sequences(X[:3]), est.scale_targets(Y[:3]), starts[:3]
    with warnings.catch_warnings():
        warnings.simplefilter("error", DegenerateWarning)
        grads, _ = combined_loss_and_grads(est, seq, Ys, st_, tpl, 0.0)
    base = {k: v.copy() for k, v in est.params_.items()}

    def loss(name, idx, delta):
        est.params_ = {k: v.copy() for k, v in base.items()}
        est.params_[name][idx] += delta
        return combined_loss_and_grads(est, seq, Ys, st_, tpl, 0.0)[1]["task_loss"]

    rng = np.random.default_rng(1)
    names = sorted(base)
    g, fd = [], []
    h = 1e-4
    for _ in range(16):
        name = names[rng.integers(len(names))]
        idx = tuple(int(rng.integers(n)) for n in base[name].shape)
        g.append(grads[name][idx])
        fd.append((loss(name, idx, h) - loss(name, idx, -h)) / (2 * h))
    est.params_ = base
    g, fd = np.array(g), np.array(fd)
    assert np.linalg.norm(g - fd) <= 1e-3 * np.linalg.norm(fd)


def test_identical_batch_same_update(small):
    _, X, Y, starts, tpl = small
    est = _est(tpl, 0.5)
    est.initialize(X, Y)
    seq, Ys = est.sequences(X[:1]), est.scale_targets(Y[:1])
    g1, _ = combined_loss_and_grads(est, seq, Ys, starts[:1], tpl, 0.5)
    g3, _ = combined_loss_and_grads(est, np.repeat(seq, 3, 0), np.repeat(Ys, 3, 0),
                                    np.repeat(starts[:1], 3), tpl, 0.5)
    for k in g1:
        assert np.allclose(g3[k], g1[k], rtol=1e-9, atol=1e-12)


def test_empty_batch(small):
    _, X, Y, starts, tpl = small
    est = _est(tpl, 0.5)
    est.initialize(X, Y)
    with pytest.raises(ConfigInvalid):
        combined_step(est, est.sequences(X)[:0], est.scale_targets(Y)[:0], starts[:0], tpl, 0.5)


def test_failed_solves_skipped_then_abort(small, monkeypatch):
    _, X, Y, starts, tpl = small
    est = _est(tpl, 0.5)
    est.initialize(X, Y)
    seq, Ys = est.sequences(X[:4]), est.scale_targets(Y[:4])
    real = tpl.value_and_grad
    calls = {"n": 0}

    def flaky(upper, start=0):
        calls["n"] += 1
        if calls["n"] % 4 == 1:
            raise SolverError("injected")
        return real(upper, start)

    monkeypatch.setattr(tpl, "value_and_grad", flaky)
    _, m = combined_loss_and_grads(est, seq, Ys, starts[:4], tpl, 0.5)
    assert m["failures"] == 1 and np.isfinite(m["task_loss"])
    def broken(upper, start=0):
        raise SolverError("injected")

    monkeypatch.setattr(tpl, "value_and_grad", broken)
    with pytest.raises(SolveFailed):
        combined_loss_and_grads(est, seq, Ys, starts[:4], tpl, 0.5)


def test_zero_epochs_keeps_initial_weights(small):
    net, X, Y, starts, _ = small
    cfg = TrainConfig(epochs=0, hidden_size=4, mode=ETO, seed=2)
    res = train(X, Y, starts, net, cfg, ModelConfig(horizon=H), history=H, stride=H)
    ref = QuantileLSTM(history=H, horizon=H, hidden_size=4, seed=2)
    ref.initialize(X[res.splits[0]], Y[res.splits[0]])
    assert all(np.array_equal(res.estimator.params_[k], ref.params_[k]) for k in ref.params_)
    assert res.history == [] and np.isfinite(res.report.task_loss)


def test_train_deterministic(small):
    net, X, Y, starts, _ = small
    cfg = TrainConfig(epochs=1, hidden_size=4, batch_size=8, loss_weight=0.5, seed=4)
    a = train(X, Y, starts, net, cfg, ModelConfig(horizon=H), history=H, stride=H)
    b = train(X, Y, starts, net, cfg, ModelConfig(horizon=H), history=H, stride=H)
    assert a.report.row() == b.report.row()
    assert a.history[0]["L_task"] == b.history[0]["L_task"]


def test_config_validation():
    with pytest.raises(ConfigInvalid):
        TrainConfig(loss_weight=1.5)
    with pytest.raises(ConfigInvalid):
        TrainConfig(mode="joint")
    with pytest.raises(ConfigInvalid):
        TrainConfig(splits=(0.5, 0.2, 0.2))
    assert TrainConfig(mode=ETO, loss_weight=0.3).effective_weight == 1.0
    with pytest.raises(ConfigInvalid):
        DecisionFocusedForecaster(loss_weight=0.5).fit(np.zeros((4, 9 * 24 + 1)), np.zeros((4, 24, 6)))


@settings(max_examples=60, deadline=None)
@given(st.integers(5, 400), st.integers(0, 3))
def test_splits_disjoint_in_order(n, gap):
    if n < 3 + 2 * gap:
        with pytest.raises(ConfigInvalid):
            split_indices(n, gap=gap)
        return
    tr, cal, te = split_indices(n, gap=gap)
    assert len(tr) and len(cal) and len(te)
    assert cal[0] - tr[-1] == gap + 1 and te[0] - cal[-1] == gap + 1
    assert te[-1] == n - 1


def test_split_gap_separates_steps(small):
    _, X, Y, starts, _ = small
    gap = window_gap(H, H, H)
    tr, cal, te = split_indices(len(X), gap=gap)
    # a window reads steps [start - history, start + horizon)
    assert starts[cal[0]] - H >= starts[tr[-1]] + H
    assert starts[te[0]] - H >= starts[cal[-1]] + H
    assert window_gap(24, 24, 1) == 47 and window_gap(24, 24, 24) == 1


class _Oracle:
    """Forecaster whose boxes are given per sample."""

    def __init__(self, lower, upper):
        self.lower, self.upper = lower, upper

    def predict_interval(self, X):
        idx = np.asarray(X, dtype=int)[:, 0]
        return self.lower[idx], self.upper[idx]


def test_perfect_forecaster(small):
    _, X, Y, starts, tpl = small
    idx = np.arange(6)[:, None]
    thr = ConformalThreshold(0.0, 0.1, 10)
    rep = evaluate(_Oracle(Y, Y), thr, idx, Y[:6], starts[:6], tpl)
    assert rep.prediction_loss == 0.0 and rep.coverage == 1.0
    assert rep.total_loss == rep.task_loss
    assert rep.weighted_total == pytest.approx(0.2 * rep.task_loss)


def test_task_loss_permutation_invariant(small):
    _, X, Y, starts, tpl = small
    rng = np.random.default_rng(5)
    lo, up = Y - 0.01, Y + rng.uniform(0, 0.02, Y.shape)
    thr = ConformalThreshold(0.005, 0.1, 10)
    idx = np.arange(8)[:, None]
    a = evaluate(_Oracle(lo, up), thr, idx, Y[:8], starts[:8], tpl)
    perm = rng.permutation(8)
    b = evaluate(_Oracle(lo, up), thr, idx[perm], Y[perm], starts[perm], tpl)
    assert b.task_loss == pytest.approx(a.task_loss, rel=1e-12)
    assert b.prediction_loss == pytest.approx(a.prediction_loss, rel=1e-12)


def test_evaluate_errors(small):
    _, X, Y, starts, tpl = small
    with pytest.raises(MissingThreshold):
        evaluate(_Oracle(Y, Y), None, np.zeros((1, 1)), Y[:1], starts[:1], tpl)
    with pytest.raises(EmptyTestSet):
        evaluate(_Oracle(Y, Y), ConformalThreshold(0.0, 0.1, 1), np.zeros((0, 1)), Y[:0], starts[:0], tpl)


def test_task_scale_and_clip(small):
    _, X, Y, starts, tpl = small
    assert tpl.task_scale > 0
    lo, cap = tpl.limits
    box, mask = tpl.clip(np.vstack([cap + 1, -np.ones(6), cap / 2]))
    assert np.array_equal(box[0], cap) and np.all(box[1] == 0)
    assert not mask[0].any() and not mask[1].any() and mask[2].all()


def test_write_history(tmp_path):
    path = tmp_path / "h.csv"
    write_history(path, [dict(epoch=0, L_pred=1.0, L_task=2.0, total=1.2, coverage=0.9, solve_failures=0)])
    rows = list(csv.DictReader(open(path)))
    assert list(rows[0]) == ["epoch", "L_pred", "L_task", "total", "coverage", "solve_failures"]
    assert rows[0]["L_task"] == "2.0"
