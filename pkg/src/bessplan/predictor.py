"""LSTM interval forecaster written directly in numpy.

A single-layer LSTM reads the history window step by step; its last hidden
state feeds two linear heads.  The lower head gives the lower quantile and
the second head gives a gap passed through softplus, so ``upper >= lower``
for every input.  Outputs cover ``horizon`` steps of 6 targets each:
three phase prices followed by three phase loads.

Functional core (``init_params``, ``forward``, ``backward``, ``nll_loss``,
``adam_step``) plus a scikit-learn style estimator, ``QuantileLSTM``.
"""
from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np
from scipy.special import expit, ndtri
from scipy.stats import truncnorm
from sklearn.base import BaseEstimator, RegressorMixin
from sklearn.utils.validation import check_array, check_is_fitted

from .exceptions import CacheMismatch, DimensionMismatch, ValidationError

N_WEATHER = 4
N_TARGETS = 6
PARAM_NAMES = ("W_x", "W_h", "b", "W_lo", "b_lo", "W_gap", "b_gap")
CHECKPOINT_VERSION = 1
SIGMA_EPS = 1e-6


# ---------------------------------------------------------------------------
# window layout
# ---------------------------------------------------------------------------

def window_dim(n_buses, history):
    """Flat feature count: bus loads and weather per step, plus one price."""
    return n_buses * history + N_WEATHER * history + 1


def infer_buses(dim, history):
    n, rem = divmod(dim - 1 - N_WEATHER * history, history)
    if rem or n < 1:
        raise DimensionMismatch(f"window dimension {dim} does not fit history {history}")
    return n


def to_sequence(X, history):
    """Flat windows ``(B, N*M + 4*M + 1)`` to LSTM input ``(B, M, N + 5)``.

    Layout of the flat vector: loads ``(M, N)`` step-major, weather
    ``(M, 4)`` step-major, then the current price, which is repeated on every
    step of the sequence.
    """
    X = np.asarray(X, dtype=float)
    B, dim = X.shape
    n = infer_buses(dim, history)
    loads = X[:, :n * history].reshape(B, history, n)
    weather = X[:, n * history:dim - 1].reshape(B, history, N_WEATHER)
    price = np.repeat(X[:, -1:, None], history, axis=1)
    return np.concatenate([loads, weather, price], axis=2)


def build_windows(frame, n_buses, history, horizon, stride=None):
    """Cut a time-series frame into ``(X, Y, starts)``.

    ``Y[i]`` has shape ``(horizon, 6)``: phase prices then phase aggregate
    loads over the ``horizon`` steps starting at ``starts[i]``.  Consecutive
    windows are ``stride`` steps apart (default: ``horizon``).
    """
    stride = horizon if stride is None else stride
    price = frame[[f"price_{p}" for p in "abc"]].to_numpy(float)
    weather = frame[["windspeed", "temperature", "humidity", "solar"]].to_numpy(float)
    loads = np.stack([frame[[f"load_bus{k}_{p}" for p in "abc"]].to_numpy(float)
                      for k in range(n_buses)], axis=1)  # (steps, buses, phases)
    bus_load = loads.sum(axis=2)
    agg = loads.sum(axis=1)
    n_steps = len(frame)
    starts = np.arange(history, n_steps - horizon + 1, stride)
    X = np.empty((starts.size, window_dim(n_buses, history)))
    Y = np.empty((starts.size, horizon, N_TARGETS))
    for i, s in enumerate(starts):
        X[i] = np.concatenate([bus_load[s - history:s].ravel(), weather[s - history:s].ravel(),
                               [price[s - 1].mean()]])
        Y[i, :, :3] = price[s:s + horizon]
        Y[i, :, 3:] = agg[s:s + horizon]
    return X, Y, starts


# ---------------------------------------------------------------------------
# functional core
# ---------------------------------------------------------------------------

def init_params(n_inputs, hidden, n_outputs, rng, std=0.1, gap_init=1.0):
    """Truncated-normal weights (two std), zero biases except forget gate = 1
    and a gap bias so the initial interval width is ``gap_init``."""
    def tn(*shape):
        return truncnorm.rvs(-2.0, 2.0, scale=std, size=shape, random_state=rng)

    b = np.zeros(4 * hidden)
    b[hidden:2 * hidden] = 1.0
    return dict(
        W_x=tn(4 * hidden, n_inputs), W_h=tn(4 * hidden, hidden), b=b,
        W_lo=tn(n_outputs, hidden), b_lo=np.zeros(n_outputs),
        W_gap=tn(n_outputs, hidden),
        b_gap=np.full(n_outputs, np.log(np.expm1(gap_init)) if gap_init > 0 else 0.0),
    )


def _fingerprint(params):
    return tuple((k, params[k].shape, float(np.sum(params[k]))) for k in PARAM_NAMES)


def softplus(x):
    return np.logaddexp(0.0, x)


def forward(params, seq):
    """Run the LSTM on ``seq`` of shape ``(B, M, D)``.

    Returns ``(lower, upper, cache)`` with outputs of shape ``(B, K)``.
    """
    seq = np.asarray(seq, dtype=float)
    if seq.ndim == 2:
        seq = seq[None]
    B, M, D = seq.shape
    H = params["W_h"].shape[1]
    if params["W_x"].shape[1] != D:
        raise DimensionMismatch(f"input width {D}, parameters expect {params['W_x'].shape[1]}")
    h = np.zeros((B, H))
    c = np.zeros((B, H))
    steps = []
    for t in range(M):
        a = seq[:, t] @ params["W_x"].T + h @ params["W_h"].T + params["b"]
        i = expit(a[:, :H])
        f = expit(a[:, H:2 * H])
        g = np.tanh(a[:, 2 * H:3 * H])
        o = expit(a[:, 3 * H:])
        c_new = f * c + i * g
        tc = np.tanh(c_new)
        steps.append((h, c, i, f, g, o, tc))
        h, c = o * tc, c_new
    lower = h @ params["W_lo"].T + params["b_lo"]
    gap_pre = h @ params["W_gap"].T + params["b_gap"]
    upper = lower + softplus(gap_pre)
    cache = dict(seq=seq, steps=steps, h=h, gap_pre=gap_pre, fingerprint=_fingerprint(params))
    return lower, upper, cache


def backward(params, cache, d_lower, d_upper):
    """Gradients of ``sum(d_lower * lower + d_upper * upper)`` w.r.t. params."""
    if cache.get("fingerprint") != _fingerprint(params):
        raise CacheMismatch("cache was produced with different parameters")
    seq, h_last = cache["seq"], cache["h"]
    d_lower = np.asarray(d_lower, dtype=float)
    d_upper = np.asarray(d_upper, dtype=float)
    if d_lower.shape != h_last.shape[:1] + params["b_lo"].shape or d_upper.shape != d_lower.shape:
        raise CacheMismatch("upstream gradient shape does not match cached batch")
    H = h_last.shape[1]
    d_low_total = d_lower + d_upper
    d_gap = d_upper * expit(cache["gap_pre"])
    grads = dict(
        W_lo=d_low_total.T @ h_last, b_lo=d_low_total.sum(axis=0),
        W_gap=d_gap.T @ h_last, b_gap=d_gap.sum(axis=0),
        W_x=np.zeros_like(params["W_x"]), W_h=np.zeros_like(params["W_h"]),
        b=np.zeros_like(params["b"]),
    )
    dh = d_low_total @ params["W_lo"] + d_gap @ params["W_gap"]
    dc = np.zeros_like(dh)
    da = np.empty((dh.shape[0], 4 * H))
    for t in range(seq.shape[1] - 1, -1, -1):
        h_prev, c_prev, i, f, g, o, tc = cache["steps"][t]
        dc = dc + dh * o * (1.0 - tc**2)
        da[:, :H] = dc * g * i * (1.0 - i)
        da[:, H:2 * H] = dc * c_prev * f * (1.0 - f)
        da[:, 2 * H:3 * H] = dc * i * (1.0 - g**2)
        da[:, 3 * H:] = dh * tc * o * (1.0 - o)
        grads["W_x"] += da.T @ seq[:, t]
        grads["W_h"] += da.T @ h_prev
        grads["b"] += da.sum(axis=0)
        dh = da @ params["W_h"]
        dc = dc * f
    return grads


def interval_sigma(lower, upper, alpha):
    z = ndtri(1.0 - alpha / 2.0)
    return (upper - lower) / (2.0 * z) + SIGMA_EPS


def nll_loss(lower, upper, truth, alpha=0.1):
    """Gaussian negative log-likelihood, midpoint mean, width-derived sigma,
    summed over every entry."""
    lower, upper, truth = (np.asarray(a, dtype=float) for a in (lower, upper, truth))
    if not lower.shape == upper.shape == truth.shape:
        raise DimensionMismatch("forecast and truth shapes differ")
    mu = 0.5 * (lower + upper)
    sigma = interval_sigma(lower, upper, alpha)
    return float(np.sum(0.5 * np.log(2 * np.pi * sigma**2) + (truth - mu) ** 2 / (2 * sigma**2)))


def nll_grad(lower, upper, truth, alpha=0.1):
    """``(d/d lower, d/d upper)`` of ``nll_loss``."""
    mu = 0.5 * (lower + upper)
    sigma = interval_sigma(lower, upper, alpha)
    r = truth - mu
    d_mu = -r / sigma**2
    d_sigma = 1.0 / sigma - r**2 / sigma**3
    k = 1.0 / (2.0 * ndtri(1.0 - alpha / 2.0))
    return 0.5 * d_mu - k * d_sigma, 0.5 * d_mu + k * d_sigma


@dataclass
class AdamState:
    m: dict
    v: dict
    t: int = 0

    @classmethod
    def zeros_like(cls, params):
        return cls({k: np.zeros_like(v) for k, v in params.items()},
                   {k: np.zeros_like(v) for k, v in params.items()})


def adam_step(params, grads, lr, state, beta1=0.9, beta2=0.999, eps=1e-8):
    """One Adam update; returns new params and state (inputs are not modified)."""
    t = state.t + 1
    new_p, new_m, new_v = {}, {}, {}
    for k, p in params.items():
        g = grads[k]
        if g.shape != p.shape:
            raise DimensionMismatch(f"gradient for {k} has shape {g.shape}, expected {p.shape}")
        m = beta1 * state.m[k] + (1 - beta1) * g
        v = beta2 * state.v[k] + (1 - beta2) * g * g
        m_hat = m / (1 - beta1**t)
        v_hat = v / (1 - beta2**t)
        new_p[k] = p - lr * m_hat / (np.sqrt(v_hat) + eps)
        new_m[k], new_v[k] = m, v
    return new_p, AdamState(new_m, new_v, t)


# ---------------------------------------------------------------------------
# estimator
# ---------------------------------------------------------------------------

class QuantileLSTM(RegressorMixin, BaseEstimator):
    """Interval forecaster over flat feature windows.

    ``fit(X, Y)`` takes windows ``(n, N*M + 4*M + 1)`` and targets
    ``(n, horizon, 6)``; ``predict_interval`` returns ``(lower, upper)`` of
    the same shape as the targets.  Inputs and targets are standardized per
    channel with training statistics.
    """

    def __init__(self, history=24, horizon=24, hidden_size=64, alpha=0.1, learning_rate=1e-3,
                 epochs=50, batch_size=16, init_std=0.1, seed=0):
        self.history = history
        self.horizon = horizon
        self.hidden_size = hidden_size
        self.alpha = alpha
        self.learning_rate = learning_rate
        self.epochs = epochs
        self.batch_size = batch_size
        self.init_std = init_std
        self.seed = seed

    # -- validation / scaling ------------------------------------------------
    def _check_X(self, X, reset=False):
        X = check_array(X, dtype=np.float64)
        if reset:
            self.n_buses_ = infer_buses(X.shape[1], self.history)
            self.n_features_in_ = X.shape[1]
        elif X.shape[1] != self.n_features_in_:
            raise DimensionMismatch(f"expected {self.n_features_in_} features, got {X.shape[1]}")
        return X

    def _check_Y(self, Y, n):
        Y = np.asarray(Y, dtype=float)
        if Y.ndim == 2:
            Y = Y.reshape(Y.shape[0], self.horizon, N_TARGETS)
        if Y.shape != (n, self.horizon, N_TARGETS) or not np.all(np.isfinite(Y)):
            raise DimensionMismatch(f"targets must be finite with shape {(n, self.horizon, N_TARGETS)}")
        return Y

    def _validate_hyper(self):
        if not 0 < self.alpha < 1:
            raise ValidationError("alpha must lie in (0, 1)")
        for name in ("history", "horizon", "hidden_size", "batch_size"):
            if int(getattr(self, name)) < 1:
                raise ValidationError(f"{name} must be >= 1")
        if self.epochs < 0 or self.learning_rate <= 0:
            raise ValidationError("epochs >= 0 and learning_rate > 0 required")

    def _init_scaling(self, X, Y):
        seq = to_sequence(X, self.history)
        flat = seq.reshape(-1, seq.shape[2])
        self.x_mean_ = flat.mean(axis=0)
        self.x_std_ = np.where(flat.std(axis=0) > 1e-12, flat.std(axis=0), 1.0)
        tgt = Y.reshape(-1, N_TARGETS)
        self.y_mean_ = tgt.mean(axis=0)
        self.y_std_ = np.where(tgt.std(axis=0) > 1e-12, tgt.std(axis=0), 1.0)

    def sequences(self, X):
        return (to_sequence(X, self.history) - self.x_mean_) / self.x_std_

    def scale_targets(self, Y):
        return ((Y - self.y_mean_) / self.y_std_).reshape(Y.shape[0], -1)

    def unscale(self, out):
        return out.reshape(out.shape[0], self.horizon, N_TARGETS) * self.y_std_ + self.y_mean_

    def initialize(self, X, Y):
        """Fit scaling statistics and draw initial weights; no training."""
        self._validate_hyper()
        X = self._check_X(X, reset=True)
        Y = self._check_Y(Y, X.shape[0])
        self._init_scaling(X, Y)
        self.rng_ = np.random.default_rng(self.seed)
        d_in = self.n_buses_ + N_WEATHER + 1
        gap = 2.0 * ndtri(1.0 - self.alpha / 2.0)
        self.params_ = init_params(d_in, self.hidden_size, self.horizon * N_TARGETS,
                                   self.rng_, std=self.init_std, gap_init=gap)
        self.opt_state_ = AdamState.zeros_like(self.params_)
        self.history_ = []
        return X, Y

    # -- training --------------------------------------------------------------
    def prediction_grads(self, seq, Ys):
        """Batch-mean NLL (standardized space) and its parameter gradients."""
        lower, upper, cache = forward(self.params_, seq)
        B = seq.shape[0]
        loss = nll_loss(lower, upper, Ys, self.alpha) / B
        dl, du = nll_grad(lower, upper, Ys, self.alpha)
        grads = backward(self.params_, cache, dl / B, du / B)
        return loss, grads, (lower, upper, cache)

    def apply_grads(self, grads):
        self.params_, self.opt_state_ = adam_step(self.params_, grads, self.learning_rate,
                                                  self.opt_state_)

    def batches(self, n):
        order = self.rng_.permutation(n)
        bs = int(self.batch_size)
        return [order[i:i + bs] for i in range(0, n, bs)]

    def fit(self, X, Y):
        X, Y = self.initialize(X, Y)
        seq, Ys = self.sequences(X), self.scale_targets(Y)
        for epoch in range(int(self.epochs)):
            total = 0.0
            for idx in self.batches(X.shape[0]):
                loss, grads, _ = self.prediction_grads(seq[idx], Ys[idx])
                self.apply_grads(grads)
                total += loss * idx.size
            self.history_.append(dict(epoch=epoch, pred_loss=total / X.shape[0]))
        return self

    # -- inference ----------------------------------------------------------------
    def predict_interval(self, X):
        check_is_fitted(self, "params_")
        X = self._check_X(X)
        lower, upper, _ = forward(self.params_, self.sequences(X))
        return self.unscale(lower), self.unscale(upper)

    def predict(self, X):
        lower, upper = self.predict_interval(X)
        return 0.5 * (lower + upper)

    def score(self, X, Y, sample_weight=None):
        """Negative mean squared error of interval midpoints."""
        Y = self._check_Y(Y, np.asarray(X).shape[0])
        return -float(np.mean((self.predict(X) - Y) ** 2))

    # -- persistence ------------------------------------------------------------
    def save(self, path, metadata=None):
        """Write weights, scaling statistics and metadata to one ``.npz`` file."""
        check_is_fitted(self, "params_")
        meta = dict(version=CHECKPOINT_VERSION, estimator=type(self).__name__,
                    hyper={k: v for k, v in self.get_params().items() if k != "template"}, n_buses=int(self.n_buses_),
                    n_features_in=int(self.n_features_in_),
                    shapes={k: list(v.shape) for k, v in self.params_.items()},
                    metadata=metadata or {})
        arrays = {f"param_{k}": v for k, v in self.params_.items()}
        arrays.update(x_mean=self.x_mean_, x_std=self.x_std_, y_mean=self.y_mean_, y_std=self.y_std_)
        with open(path, "wb") as fh:
            np.savez(fh, meta=np.array(json.dumps(meta, sort_keys=True)), **arrays)

    @classmethod
    def load(cls, path):
        from .exceptions import ParseError
        try:
            with np.load(path, allow_pickle=False) as data:
                meta = json.loads(str(data["meta"]))
                arrays = {k: data[k].copy() for k in data.files if k != "meta"}
        except (OSError, ValueError, KeyError) as exc:
            raise ParseError(f"cannot read checkpoint {path}: {exc}") from exc
        if meta.get("version") != CHECKPOINT_VERSION:
            raise ParseError(f"unsupported checkpoint version {meta.get('version')}")
        from . import training  # subclasses live there
        klass = {"QuantileLSTM": QuantileLSTM,
                 "DecisionFocusedForecaster": training.DecisionFocusedForecaster}[meta["estimator"]]
        hyper = {k: v for k, v in meta["hyper"].items() if k in klass().get_params()}
        est = klass(**hyper)
        est.params_ = {k: arrays[f"param_{k}"] for k in PARAM_NAMES}
        for k, v in meta["shapes"].items():
            if list(est.params_[k].shape) != v:
                raise ParseError(f"checkpoint tensor {k} has wrong shape")
        est.x_mean_, est.x_std_ = arrays["x_mean"], arrays["x_std"]
        est.y_mean_, est.y_std_ = arrays["y_mean"], arrays["y_std"]
        est.n_buses_ = meta["n_buses"]
        est.n_features_in_ = meta["n_features_in"]
        est.checkpoint_metadata_ = meta["metadata"]
        return est
