import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.special import expit
from scipy.stats import norm

from bessplan.exceptions import CacheMismatch, DimensionMismatch, ParseError
from bessplan.predictor import (PARAM_NAMES, SIGMA_EPS, AdamState, QuantileLSTM, adam_step,
                                backward, forward, init_params, interval_sigma, nll_grad, nll_loss,
                                softplus, to_sequence, window_dim)


def _zero_params(D, H, K):
    return dict(W_x=np.zeros((4 * H, D)), W_h=np.zeros((4 * H, H)), b=np.zeros(4 * H),
                W_lo=np.zeros((K, H)), b_lo=np.zeros(K), W_gap=np.zeros((K, H)), b_gap=np.zeros(K))


def _random_params(D, H, K, seed=0, std=0.5):
    return init_params(D, H, K, np.random.default_rng(seed), std=std)


def test_zero_weights_constant_output():
    p = _zero_params(3, 4, 5)
    rng = np.random.default_rng(1)
    lo, up, _ = forward(p, rng.normal(size=(2, 6, 3)))
    assert np.all(lo == 0)
    assert np.allclose(up, math.log(2.0), atol=1e-15)


def test_different_windows_differ():
    p = _random_params(3, 4, 5)
    rng = np.random.default_rng(2)
    lo, up, cache = forward(p, rng.normal(size=(2, 6, 3)))
    assert not np.allclose(cache["h"][0], cache["h"][1])
    assert not np.allclose(lo[0], lo[1])


def test_single_cell_by_hand():
    x = 0.7
    w = dict(i=0.3, f=-0.2, g=1.1, o=0.5)
    bias = dict(i=0.1, f=1.0, g=-0.3, o=0.2)
    p = dict(W_x=np.array([[w[k]] for k in "ifgo"]), W_h=np.full((4, 1), 9.0),
             b=np.array([bias[k] for k in "ifgo"]), W_lo=np.array([[2.0]]), b_lo=np.array([0.5]),
             W_gap=np.array([[-1.0]]), b_gap=np.array([0.25]))
    i = 1 / (1 + math.exp(-(w["i"] * x + bias["i"])))
    g = math.tanh(w["g"] * x + bias["g"])
    o = 1 / (1 + math.exp(-(w["o"] * x + bias["o"])))
    h = o * math.tanh(i * g)  # c0 = 0 so the forget gate plays no part
    lo, up, _ = forward(p, np.array([[[x]]]))
    assert lo[0, 0] == pytest.approx(2 * h + 0.5, abs=1e-15)
    assert up[0, 0] - lo[0, 0] == pytest.approx(math.log1p(math.exp(0.25 - h)), abs=1e-15)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 10_000), st.floats(-50, 50))
def test_lower_never_above_upper(seed, scale):
    p = _random_params(2, 3, 4, seed=seed, std=abs(scale) + 0.1)
    rng = np.random.default_rng(seed)
    lo, up, _ = forward(p, scale * rng.normal(size=(3, 4, 2)))
    assert np.all(np.isfinite(lo)) and np.all(up >= lo)


def test_width_mismatch():
    with pytest.raises(DimensionMismatch):
        forward(_random_params(3, 2, 2), np.zeros((1, 4, 5)))


def test_window_dimension():
    assert window_dim(8, 24) == 8 * 24 + 4 * 24 + 1
    X = np.arange(2 * window_dim(3, 2), dtype=float).reshape(2, -1)
    seq = to_sequence(X, 2)
    assert seq.shape == (2, 2, 3 + 4 + 1)
    assert np.all(seq[:, :, -1] == X[:, -1:])
    assert np.array_equal(seq[0, 1, :3], X[0, 3:6])


# -- loss ------------------------------------------------------------------

Z90 = norm.ppf(0.95)


def test_nll_at_midpoint():
    lo, up = np.array([[0.0, 1.0]]), np.array([[2.0, 4.0]])
    sigma = (up - lo) / (2 * Z90) + SIGMA_EPS
    got = nll_loss(lo, up, (lo + up) / 2, alpha=0.1)
    assert got == pytest.approx(np.sum(0.5 * np.log(2 * np.pi * sigma**2)), rel=1e-14)


def test_nll_one_sigma_shift():
    lo, up = np.zeros((1, 3)), np.array([[2.0, 2.0, 2.0]])
    sigma = interval_sigma(lo, up, 0.1)
    base = nll_loss(lo, up, np.ones((1, 3)))
    shifted = np.ones((1, 3))
    shifted[0, 1] += sigma[0, 1]
    assert nll_loss(lo, up, shifted) - base == pytest.approx(0.5, abs=1e-12)


def test_nll_narrow_far_beats_wide():
    truth = np.array([[5.0]])
    narrow = nll_loss(np.array([[-0.1]]), np.array([[0.1]]), truth)
    wide = nll_loss(np.array([[-6.0]]), np.array([[6.0]]), truth)
    assert narrow > wide


def test_nll_shape_check():
    with pytest.raises(DimensionMismatch):
        nll_loss(np.zeros(2), np.ones(2), np.zeros(3))


def test_nll_grad_matches_differences():
    rng = np.random.default_rng(3)
    lo = rng.normal(size=(2, 3))
    up = lo + rng.uniform(0.5, 2, size=(2, 3))
    y = rng.normal(size=(2, 3))
    dl, du = nll_grad(lo, up, y)
    h = 1e-6
    for arr, grad in ((lo, dl), (up, du)):
        for idx in np.ndindex(arr.shape):
            old = arr[idx]
            arr[idx] = old + h
            fp = nll_loss(lo, up, y)
            arr[idx] = old - h
            fm = nll_loss(lo, up, y)
            arr[idx] = old
            assert grad[idx] == pytest.approx((fp - fm) / (2 * h), rel=1e-6, abs=1e-8)


# -- backward --------------------------------------------------------------

def _gradcheck(H, seed=0, B=3, M=4, D=3, K=5, h=1e-6):
    rng = np.random.default_rng(seed)
    p = _random_params(D, H, K, seed=seed)
    seq = rng.normal(size=(B, M, D))
    rl, ru = rng.normal(size=(B, K)), rng.normal(size=(B, K))

    def f(params):
        lo, up, _ = forward(params, seq)
        return float(np.sum(rl * lo + ru * up))

    _, _, cache = forward(p, seq)
    grads = backward(p, cache, rl, ru)
    worst = 0.0
    for name in PARAM_NAMES:
        for idx in np.ndindex(p[name].shape):
            q = {k: v.copy() for k, v in p.items()}
            q[name][idx] += h
            fp = f(q)
            q[name][idx] -= 2 * h
            fm = f(q)
            fd = (fp - fm) / (2 * h)
            worst = max(worst, abs(grads[name][idx] - fd) / max(1.0, abs(fd)))
    return worst


def test_gradcheck_hidden8():
    assert _gradcheck(8) <= 1e-5


def test_zero_upstream():
    p = _random_params(3, 4, 5)
    _, _, cache = forward(p, np.ones((2, 3, 3)))
    grads = backward(p, cache, np.zeros((2, 5)), np.zeros((2, 5)))
    assert all(not np.any(g) for g in grads.values())


def test_duplicated_window_doubles_gradient():
    p = _random_params(3, 4, 5)
    rng = np.random.default_rng(4)
    w = rng.normal(size=(1, 6, 3))
    r = rng.normal(size=(1, 5))
    _, _, c1 = forward(p, w)
    g1 = backward(p, c1, r, r)
    _, _, c2 = forward(p, np.concatenate([w, w]))
    g2 = backward(p, c2, np.concatenate([r, r]), np.concatenate([r, r]))
    for k in PARAM_NAMES:
        assert np.allclose(g2[k], 2 * g1[k], rtol=1e-12, atol=1e-14)


def test_cache_mismatch():
    p = _random_params(3, 4, 5)
    _, _, cache = forward(p, np.ones((2, 3, 3)))
    other = dict(p, b_lo=p["b_lo"] + 1)
    with pytest.raises(CacheMismatch):
        backward(other, cache, np.zeros((2, 5)), np.zeros((2, 5)))
    with pytest.raises(CacheMismatch):
        backward(p, cache, np.zeros((3, 5)), np.zeros((3, 5)))


# -- adam ------------------------------------------------------------------

def test_adam_zero_grad():
    p = _random_params(2, 2, 2)
    zero = {k: np.zeros_like(v) for k, v in p.items()}
    new, state = adam_step(p, zero, 0.1, AdamState.zeros_like(p))
    assert all(np.array_equal(new[k], p[k]) for k in p)
    assert state.t == 1


def test_adam_first_step():
    p = {"w": np.array([1.0, -2.0, 0.5])}
    g = {"w": np.array([0.3, -4.0, 1e-3])}
    new, _ = adam_step(p, g, 0.01, AdamState.zeros_like(p))
    expected = p["w"] - 0.01 * g["w"] / (np.abs(g["w"]) + 1e-8)
    assert np.allclose(new["w"], expected, rtol=1e-12)


def test_adam_constant_gradient_steps_bounded():
    p = {"w": np.zeros(2)}
    g = {"w": np.array([5.0, -0.01])}
    state = AdamState.zeros_like(p)
    for _ in range(200):
        prev = p["w"]
        p, state = adam_step(p, g, 0.01, state)
        step = p["w"] - prev
        assert np.all(np.abs(step) <= 0.01 + 1e-12)
        assert np.all(np.sign(step) == -np.sign(g["w"]))


def test_adam_shape_check():
    p = {"w": np.zeros(2)}
    with pytest.raises(DimensionMismatch):
        adam_step(p, {"w": np.zeros(3)}, 0.1, AdamState.zeros_like(p))


# -- estimator -------------------------------------------------------------

def _toy(n=40, n_buses=2, history=3, horizon=2, seed=0):
    rng = np.random.default_rng(seed)
    X = rng.normal(size=(n, window_dim(n_buses, history)))
    Y = np.repeat(X[:, -1:, None], horizon * 6, axis=1).reshape(n, horizon, 6) + 0.1 * rng.normal(
        size=(n, horizon, 6))
    return X, Y


def test_estimator_fit_predict():
    X, Y = _toy()
    est = QuantileLSTM(history=3, horizon=2, hidden_size=8, epochs=30, learning_rate=1e-2, batch_size=8)
    est.fit(X, Y)
    lo, up = est.predict_interval(X)
    assert lo.shape == Y.shape and np.all(up >= lo)
    assert est.history_[-1]["pred_loss"] < est.history_[0]["pred_loss"]
    assert np.allclose(est.predict(X), (lo + up) / 2)
    with pytest.raises(DimensionMismatch):
        est.predict_interval(X[:, :-1])


def test_estimator_deterministic():
    X, Y = _toy()
    kw = dict(history=3, horizon=2, hidden_size=4, epochs=3, batch_size=8, seed=5)
    a = QuantileLSTM(**kw).fit(X, Y).predict_interval(X)
    b = QuantileLSTM(**kw).fit(X, Y).predict_interval(X)
    assert np.array_equal(a[0], b[0]) and np.array_equal(a[1], b[1])


def test_checkpoint_roundtrip(tmp_path):
    X, Y = _toy()
    est = QuantileLSTM(history=3, horizon=2, hidden_size=4, epochs=2, batch_size=8).fit(X, Y)
    path = tmp_path / "ck.npz"
    est.save(path, metadata={"note": "x"})
    back = QuantileLSTM.load(path)
    for k in PARAM_NAMES:
        assert np.array_equal(back.params_[k], est.params_[k])
    assert np.array_equal(back.x_std_, est.x_std_) and np.array_equal(back.y_mean_, est.y_mean_)
    assert back.checkpoint_metadata_ == {"note": "x"}
    assert back.get_params() == est.get_params()
    assert np.array_equal(back.predict_interval(X)[1], est.predict_interval(X)[1])


def test_checkpoint_garbage(tmp_path):
    path = tmp_path / "bad.npz"
    path.write_bytes(b"not a checkpoint")
    with pytest.raises(ParseError):
        QuantileLSTM.load(path)


def test_softplus_stable():
    assert softplus(np.array([1000.0]))[0] == 1000.0
    assert softplus(np.array([-1000.0]))[0] == 0.0
    assert np.allclose(expit(0.3), np.exp(0.3) / (1 + np.exp(0.3)))
