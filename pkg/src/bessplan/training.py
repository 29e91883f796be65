"""End-to-end training through the planning LP, the decoupled baseline and
the evaluation harness."""
from __future__ import annotations

import csv
import logging
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .assembly import ModelConfig
from .conformal import CEIL, calibrate, batch_scores, calibrate_per_target, coverage, inflate
from .exceptions import ConfigInvalid, EmptyTestSet, MissingThreshold, SolveFailed, SolverError
from .predictor import N_TARGETS, QuantileLSTM, forward, backward
from .robust import SingleStageModel, normalize_weights
from .solver import solve

log = logging.getLogger(__name__)

END_TO_END, ETO = "end_to_end", "eto"


@dataclass
class TrainConfig:
    loss_weight: float = 0.8
    alpha: float = 0.1
    learning_rate: float = 1e-3
    epochs: int = 30
    batch_size: int = 8
    seed: int = 0
    mode: str = END_TO_END
    hidden_size: int = 32
    splits: tuple = (0.6, 0.2, 0.2)
    per_target: bool = False
    rule: str = CEIL
    max_fail_fraction: float = 0.5

    def __post_init__(self):
        if not 0.0 <= self.loss_weight <= 1.0:
            raise ConfigInvalid("loss_weight must lie in [0, 1]")
        if not 0.0 < self.alpha < 1.0:
            raise ConfigInvalid("alpha must lie in (0, 1)")
        if self.mode not in (END_TO_END, ETO):
            raise ConfigInvalid(f"mode must be {END_TO_END!r} or {ETO!r}")
        if self.epochs < 0 or self.batch_size < 1 or self.learning_rate <= 0 or self.hidden_size < 1:
            raise ConfigInvalid("epochs >= 0, batch_size >= 1, hidden_size >= 1, learning_rate > 0")
        if len(self.splits) != 3 or any(f <= 0 for f in self.splits) or abs(sum(self.splits) - 1) > 1e-9:
            raise ConfigInvalid("splits must be three positive fractions summing to 1")
        self.splits = tuple(float(f) for f in self.splits)

    @property
    def effective_weight(self):
        return 1.0 if self.mode == ETO else self.loss_weight


class TaskTemplate:
    """Planning problem shared by every sample: network, model settings,
    load split and the physical clipping limits for forecast boxes.

    PV is periodic, so one LP per phase of the PV cycle is cached.
    """

    def __init__(self, network, config, weights=None, price_cap=None, load_cap=None):
        self.network = network
        self.config = config
        w = network.load_weights() if weights is None else weights
        self.weights = normalize_weights(network, w)
        self.price_cap = None if price_cap is None else np.asarray(price_cap, dtype=float)
        self.load_cap = None if load_cap is None else np.asarray(load_cap, dtype=float)
        self.period = int(np.lcm.reduce([len(b.pv_profile) for b in network.buses]))
        self._models = {}
        self.task_scale = 1.0

    @classmethod
    def from_history(cls, network, config, Y_train, cap_factor=3.0, **kw):
        """Caps at ``cap_factor`` times the largest training price/load per phase."""
        Y = np.asarray(Y_train).reshape(-1, N_TARGETS)
        return cls(network, config, price_cap=cap_factor * Y[:, :3].max(axis=0),
                   load_cap=cap_factor * Y[:, 3:].max(axis=0), **kw)

    @property
    def limits(self):
        cap = np.concatenate([self.price_cap, self.load_cap])
        return np.zeros(N_TARGETS), cap

    def model(self, start=0):
        key = int(start) % self.period
        if key not in self._models:
            cfg = ModelConfig(**{**asdict(self.config), "start_step": key})
            self._models[key] = SingleStageModel(self.network, cfg, self.weights)
        return self._models[key]

    def clip(self, upper):
        """Clip a ``(T, 6)`` upper box to physical limits; returns the box and
        the mask of entries left untouched (where gradients pass)."""
        lo, hi = self.limits
        clipped = np.clip(upper, lo, hi)
        return clipped, (upper >= lo) & (upper <= hi)

    def value(self, upper, start=0, x_fixed=None):
        box, _ = self.clip(upper)
        res = solve(self.model(start).lp_for(box[:, :3], box[:, 3:], x_fixed=x_fixed))
        return res.objective if res.optimal else math.nan

    def value_and_grad(self, upper, start=0):
        """Optimal value for a raw upper box and its gradient w.r.t. that box."""
        box, mask = self.clip(upper)
        val, gp, gl, _ = self.model(start).value_and_grad(box[:, :3], box[:, 3:])
        return val, np.concatenate([gp, gl], axis=1) * mask

    def fit_scale(self, Y, starts):
        """Median procurement cost without storage over ``Y`` (truth boxes)."""
        zero = np.zeros(self.network.n_buses)
        vals = [self.value(y, s, x_fixed=zero) for y, s in zip(Y, starts)]
        vals = np.array([v for v in vals if np.isfinite(v)])
        self.task_scale = float(np.median(np.abs(vals))) if vals.size else 1.0
        if self.task_scale <= 0:
            self.task_scale = 1.0
        return self.task_scale


def combined_loss_and_grads(est, seq, Ys, starts, template, loss_weight, max_fail_fraction=0.5):
    """Batch loss ``w * L_pred + (1 - w) * L_task / scale`` and its gradients.

    ``seq``/``Ys`` are standardized inputs/targets.  The task term only
    reaches the parameters through the upper box.  Returns
    ``(grads, metrics)``.
    """
    pred_loss, pred_grads, (lower, upper, cache) = est.prediction_grads(seq, Ys)
    metrics = dict(pred_loss=pred_loss, task_loss=math.nan, failures=0)
    if loss_weight == 1.0:
        return pred_grads, metrics
    B = seq.shape[0]
    upper_raw = est.unscale(upper)
    d_upper = np.zeros_like(upper)
    values, failures = [], 0
    for b in range(B):
        try:
            val, g = template.value_and_grad(upper_raw[b], starts[b])
        except SolverError as exc:
            failures += 1
            log.warning("sample %d skipped: %s", b, exc)
            continue
        values.append(val)
        d_upper[b] = (g * est.y_std_).ravel()
    metrics["failures"] = failures
    if failures > max_fail_fraction * B:
        raise SolveFailed(f"{failures} of {B} planning solves failed")
    n_ok = B - failures
    scale = template.task_scale
    metrics["task_loss"] = float(np.mean(values)) / scale
    task_grads = backward(est.params_, cache, np.zeros_like(d_upper), d_upper / (n_ok * scale))
    grads = {k: loss_weight * pred_grads[k] + (1.0 - loss_weight) * task_grads[k] for k in pred_grads}
    return grads, metrics


def combined_step(est, seq, Ys, starts, template, loss_weight, max_fail_fraction=0.5):
    """One optimizer step on a batch; returns metrics."""
    if seq.shape[0] == 0:
        raise ConfigInvalid("empty batch")
    grads, metrics = combined_loss_and_grads(est, seq, Ys, starts, template, loss_weight,
                                             max_fail_fraction)
    est.apply_grads(grads)
    return metrics


class DecisionFocusedForecaster(QuantileLSTM):
    """``QuantileLSTM`` trained on a convex mix of interval NLL and the
    planning cost of its upper box.  ``loss_weight = 1`` is plain NLL
    training.  ``fit`` needs the window start steps (``starts``) whenever the
    planning problem depends on the time of day.
    """

    def __init__(self, history=24, horizon=24, hidden_size=32, alpha=0.1, learning_rate=1e-3,
                 epochs=30, batch_size=8, init_std=0.1, seed=0, loss_weight=0.8, template=None,
                 max_fail_fraction=0.5):
        super().__init__(history=history, horizon=horizon, hidden_size=hidden_size, alpha=alpha,
                         learning_rate=learning_rate, epochs=epochs, batch_size=batch_size,
                         init_std=init_std, seed=seed)
        self.loss_weight = loss_weight
        self.template = template
        self.max_fail_fraction = max_fail_fraction

    def fit(self, X, Y, starts=None):
        if not 0.0 <= self.loss_weight <= 1.0:
            raise ConfigInvalid("loss_weight must lie in [0, 1]")
        if self.loss_weight < 1.0 and self.template is None:
            raise ConfigInvalid("a task template is needed when loss_weight < 1")
        X, Y = self.initialize(X, Y)
        starts = np.zeros(X.shape[0], int) if starts is None else np.asarray(starts)
        seq, Ys = self.sequences(X), self.scale_targets(Y)
        for epoch in range(int(self.epochs)):
            pred, task, fails, n_task = 0.0, 0.0, 0, 0
            for idx in self.batches(X.shape[0]):
                m = combined_step(self, seq[idx], Ys[idx], starts[idx], self.template,
                                  self.loss_weight, self.max_fail_fraction)
                pred += m["pred_loss"] * idx.size
                fails += m["failures"]
                if not math.isnan(m["task_loss"]):
                    task += m["task_loss"] * (idx.size - m["failures"])
                    n_task += idx.size - m["failures"]
            self.history_.append(dict(epoch=epoch, pred_loss=pred / X.shape[0],
                                      task_loss=task / n_task if n_task else math.nan,
                                      failures=fails))
        return self


# ---------------------------------------------------------------------------
# data splits and evaluation
# ---------------------------------------------------------------------------

def split_indices(n, fractions=(0.6, 0.2, 0.2), gap=1):
    """Contiguous train/calibration/test index blocks in time order, with
    ``gap`` windows dropped at each boundary so no two splits share a step."""
    if n < 3 + 2 * gap:
        raise ConfigInvalid(f"{n} windows are too few to split")
    usable = n - 2 * gap
    n_train = int(round(fractions[0] * usable))
    n_cal = int(round(fractions[1] * usable))
    n_train = min(max(1, n_train), usable - 2)
    n_cal = max(1, min(n_cal, usable - n_train - 1))
    train = np.arange(0, n_train)
    cal = np.arange(n_train + gap, n_train + gap + n_cal)
    test = np.arange(cal[-1] + 1 + gap, n)
    return train, cal, test


def window_gap(history, horizon, stride):
    return max(0, math.ceil((history + horizon) / stride) - 1)


@dataclass
class EvalReport:
    task_loss: float
    prediction_loss: float
    total_loss: float
    weighted_total: float
    coverage: float
    alpha: float
    q_star: float
    n_samples: int
    solve_failures: int = 0
    per_sample_task: list = field(default_factory=list, repr=False)

    def row(self):
        d = asdict(self)
        d.pop("per_sample_task")
        return d


def evaluate(est, threshold, X, Y, starts, template, loss_weight=0.8):
    """Planning cost on conformally inflated boxes, midpoint MSE and coverage.

    ``total_loss`` is the plain sum of task and prediction loss;
    ``weighted_total`` applies ``loss_weight`` as in training.
    """
    if threshold is None:
        raise MissingThreshold("evaluation needs a calibrated threshold")
    X = np.asarray(X, dtype=float)
    if X.shape[0] == 0:
        raise EmptyTestSet("no test windows")
    Y = np.asarray(Y, dtype=float)
    lower, upper = est.predict_interval(X)
    Y = Y.reshape(lower.shape)
    _, hi = inflate(lower, upper, threshold, template.limits)
    values, failures = [], 0
    for b in range(X.shape[0]):
        v = template.value(hi[b], starts[b])
        if math.isnan(v):
            failures += 1
        values.append(v)
    ok = [v for v in values if not math.isnan(v)]
    task = float(np.mean(ok)) if ok else math.nan
    pred = float(np.mean((0.5 * (lower + upper) - Y) ** 2))
    return EvalReport(task_loss=task, prediction_loss=pred, total_loss=task + pred,
                      weighted_total=loss_weight * pred + (1 - loss_weight) * task,
                      coverage=coverage(lower, upper, Y, threshold), alpha=threshold.alpha,
                      q_star=threshold.q_star, n_samples=X.shape[0], solve_failures=failures,
                      per_sample_task=values)


def calibrate_forecaster(est, X_cal, Y_cal, alpha, rule=CEIL, per_target=False):
    lower, upper = est.predict_interval(X_cal)
    Y_cal = np.asarray(Y_cal, dtype=float).reshape(lower.shape)
    if per_target:
        return calibrate_per_target(lower, upper, Y_cal, alpha, rule)
    return calibrate(batch_scores(lower, upper, Y_cal), alpha, rule)


@dataclass
class TrainResult:
    estimator: object
    threshold: object
    report: EvalReport
    history: list
    splits: tuple


def make_estimator(config, template, history, horizon):
    return DecisionFocusedForecaster(
        history=history, horizon=horizon, hidden_size=config.hidden_size, alpha=config.alpha,
        learning_rate=config.learning_rate, epochs=config.epochs, batch_size=config.batch_size,
        seed=config.seed, loss_weight=config.effective_weight, template=template,
        max_fail_fraction=config.max_fail_fraction)


def train(X, Y, starts, network, config, model_config=None, history=24, stride=24):
    """Split, fit, calibrate and evaluate.

    ``mode="eto"`` trains on the interval loss alone and meets the planning
    problem only at evaluation; ``mode="end_to_end"`` mixes in the planning
    cost during training.
    """
    X, Y, starts = np.asarray(X, float), np.asarray(Y, float), np.asarray(starts)
    horizon = Y.shape[1]
    model_config = model_config or ModelConfig(horizon=horizon)
    if model_config.horizon != horizon:
        raise ConfigInvalid("model horizon does not match target horizon")
    tr, cal, te = split_indices(len(X), config.splits, window_gap(history, horizon, stride))
    template = TemplateCache.get(network, model_config, Y[tr], starts[tr])
    est = make_estimator(config, template, history, horizon)
    est.fit(X[tr], Y[tr], starts[tr])
    threshold = calibrate_forecaster(est, X[cal], Y[cal], config.alpha, config.rule, config.per_target)
    report = evaluate(est, threshold, X[te], Y[te], starts[te], template, config.loss_weight)
    hist = []
    lower, upper = est.predict_interval(X[cal])
    raw_cov = coverage(lower, upper, Y[cal].reshape(lower.shape), 0.0)
    for row in est.history_:
        total = (config.effective_weight * row["pred_loss"]
                 + (1 - config.effective_weight) * np.nan_to_num(row.get("task_loss", 0.0)))
        hist.append(dict(epoch=row["epoch"], L_pred=row["pred_loss"],
                         L_task=row.get("task_loss", math.nan), total=total,
                         coverage=raw_cov, solve_failures=row.get("failures", 0)))
    return TrainResult(est, threshold, report, hist, (tr, cal, te))


class TemplateCache:
    """Reuse templates (and their cached LPs and task scale) across runs on
    the same data, e.g. within a loss-weight sweep."""

    _cache = {}

    @classmethod
    def get(cls, network, model_config, Y_train, starts_train):
        key = (id(network), repr(model_config), np.asarray(Y_train).tobytes(),
               np.asarray(starts_train).tobytes())
        if key not in cls._cache:
            tpl = TaskTemplate.from_history(network, model_config, Y_train)
            tpl.fit_scale(Y_train, starts_train)
            cls._cache = {key: tpl}  # keep only the latest
        return cls._cache[key]


def write_history(path, history):
    cols = ["epoch", "L_pred", "L_task", "total", "coverage", "solve_failures"]
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=cols)
        w.writeheader()
        for row in history:
            w.writerow({k: row.get(k) for k in cols})


def loss_weight_sweep(X, Y, starts, network, config, weights=(0.9, 0.8, 0.7, 0.6), **kw):
    """Train once per loss weight with everything else fixed."""
    out = {}
    for w in weights:
        cfg = TrainConfig(**{**asdict(config), "loss_weight": w, "mode": END_TO_END})
        out[w] = train(X, Y, starts, network, cfg, **kw).report
    return out
