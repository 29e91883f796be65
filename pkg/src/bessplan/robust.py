"""Box uncertainty, dominant-set reduction and the single-stage planning LP."""
from __future__ import annotations

import itertools
from dataclasses import dataclass, field

import numpy as np

from .assembly import ModelConfig, assemble, eta_lower_bound
from .exceptions import InvalidBudget, OracleTooLarge, ValidationError
from .network import PHASES, SLACK
from .solver import A_UB, B_EQ, ITERATION_LIMIT, ParameterMap, solve, value_gradient

INSTALL_THRESHOLD = 1e-4


@dataclass
class BoxSet:
    """Elementwise interval ``[lower, upper]``, typically shape ``(steps, 3)``."""

    lower: np.ndarray
    upper: np.ndarray

    def __post_init__(self):
        self.lower = np.array(self.lower, dtype=float)
        self.upper = np.array(self.upper, dtype=float)
        if self.lower.shape != self.upper.shape:
            raise ValidationError("box bounds have different shapes")
        if np.any(np.isnan(self.lower)) or np.any(np.isnan(self.upper)):
            raise ValidationError("box bounds contain NaN")
        if np.any(self.lower > self.upper):
            raise ValidationError("box lower bound exceeds upper bound")

    @property
    def shape(self):
        return self.lower.shape

    @property
    def midpoint(self):
        return 0.5 * (self.lower + self.upper)

    def contains(self, y, tol=0.0):
        y = np.asarray(y)
        return bool(np.all(y >= self.lower - tol) and np.all(y <= self.upper + tol))

    @classmethod
    def point(cls, y):
        return cls(y, y)


def worst_case_price(price_box):
    """Prices enter the cost with nonnegative weight, so the worst case is the upper bound."""
    return price_box.upper.copy()


def dominant_load(load_box):
    """Per-dimension dominant point of a box (one-dimensional, unit budget)."""
    return load_box.upper.copy()


@dataclass(frozen=True)
class BoxMap:
    """Affine bijection between the unit box and ``[lower, upper]``."""

    lower: np.ndarray
    width: np.ndarray

    def __call__(self, h):
        return self.lower + self.width * np.asarray(h, dtype=float)

    def inverse(self, y):
        y = np.asarray(y, dtype=float)
        with np.errstate(divide="ignore", invalid="ignore"):
            h = np.where(self.width > 0, (y - self.lower) / self.width, 0.0)
        return h


def normalize_box(box):
    """Return ``(map, unit_box)`` with ``map(h) = lower + (upper - lower) h``."""
    unit = BoxSet(np.zeros(box.shape), np.ones(box.shape))
    return BoxMap(box.lower.copy(), box.upper - box.lower), unit


@dataclass(frozen=True)
class DominantSet:
    m: int
    k: float
    beta: float
    vertices: np.ndarray  # (m + 1, m): scaled unit vectors then scaled all-ones

    def dominates(self, h, tol=1e-9):
        """Weights of a convex combination of vertices that dominates ``h``,
        or ``None``.  Uses the explicit weights from the construction."""
        h = np.asarray(h, dtype=float)
        if np.any(h < -tol) or h.sum() > self.k + tol:
            return None
        if self.beta == self.k:
            w = np.append(np.clip(h, 0, None) / self.k, 0.0)
            w[-1] = 1.0 - w[:-1].sum()
        else:
            w = np.zeros(self.m + 1)
            w[-1] = 1.0
        point = w @ self.vertices
        return w if np.all(point >= h - tol) and np.all(w >= -tol) else None


def dominant_set(m, k):
    """Dominant set of ``{h in [0,1]^m : sum h <= k}``.

    ``beta = min(k, m/k)``; vertices ``beta e_i`` and ``beta (k/m) e``.
    """
    if int(m) != m or m < 1:
        raise InvalidBudget(f"dimension must be a positive integer, got {m}")
    if not 0 < k <= m:
        raise InvalidBudget(f"budget must satisfy 0 < k <= m, got k={k}, m={m}")
    beta = min(k, m / k)
    verts = np.vstack([beta * np.eye(m), beta * (k / m) * np.ones((1, m))])
    return DominantSet(m=int(m), k=float(k), beta=float(beta), vertices=verts)


@dataclass
class RobustInstance:
    """Network + model settings + uncertainty boxes for prices and aggregate loads.

    ``weights[j, p]`` splits the aggregate phase-``p`` load onto bus ``j``;
    columns sum to one.  Defaults to the buses' ``load_weight`` fields.
    """

    network: object
    config: ModelConfig
    price_box: BoxSet
    load_box: BoxSet
    weights: np.ndarray = None

    def __post_init__(self):
        T = self.config.horizon
        for name, box in (("price", self.price_box), ("load", self.load_box)):
            if box.shape != (T, PHASES):
                raise ValidationError(f"{name} box shape {box.shape}, expected {(T, PHASES)}")
        if np.any(self.price_box.lower < 0):
            raise ValidationError("price box must be nonnegative")
        w = self.network.load_weights() if self.weights is None else np.asarray(self.weights, float)
        self.weights = normalize_weights(self.network, w)


def normalize_weights(network, w):
    w = np.array(w, dtype=float)
    if w.shape != (network.n_buses, PHASES) or np.any(w < 0):
        raise ValidationError("load weights must be a nonnegative (n_buses, 3) array")
    slack = [b.id for b in network.buses if b.kind == SLACK]
    if np.any(w[slack] > 0):
        raise ValidationError("the slack bus cannot carry load weight")
    total = w.sum(axis=0)
    if np.any(total <= 0):
        raise ValidationError("every phase needs positive total load weight")
    return w / total


@dataclass
class PlanSolution:
    objective: float
    x: np.ndarray
    dispatch: np.ndarray
    voltage: np.ndarray
    slack_power: np.ndarray
    soc: np.ndarray
    injection: np.ndarray
    eta: float
    result: object = field(repr=False, default=None)

    @property
    def installed(self):
        return np.flatnonzero(self.x > INSTALL_THRESHOLD)


class SingleStageModel:
    """Planning LP with worst-case prices and dominant loads as parameters.

    Parameters are ordered ``price[t, p]`` then ``load[t, p]`` (aggregate
    load magnitude, demand positive), each flattened row-major.
    """

    def __init__(self, network, config, weights):
        self.network, self.config = network, config
        self.weights = weights
        T = config.horizon
        zeros = np.zeros((T, PHASES))
        model = assemble(network, config, np.zeros((T, network.n_buses, PHASES)), zeros)
        self.base = model.lp
        self.varmap = vm = model.varmap
        self.n_params = 2 * T * PHASES
        names = [f"price[{t},{p}]" for t in range(T) for p in range(PHASES)]
        names += [f"load[{t},{p}]" for t in range(T) for p in range(PHASES)]

        kind, param, row, col, coef = [], [], [], [], []
        epi_kind, epi_row = model.row_map[model.epigraph_row]
        assert epi_kind == "ub"
        for t in range(T):
            for p in range(PHASES):
                kind.append(A_UB)
                param.append(t * PHASES + p)
                row.append(epi_row)
                col.append(vm.s_re[t, 0, p])
                coef.append(1.0)
        for (t, j, p), r in model.load_rows.items():
            if weights[j, p] == 0:
                continue
            kind.append(B_EQ)
            param.append(T * PHASES + t * PHASES + p)
            row.append(model.row_map[r][1])
            col.append(-1)
            coef.append(-weights[j, p])
        self.pmap = ParameterMap(names=names, kind=kind, param=param, row=row, col=col, coef=coef)

        A = self.base.A_ub
        A.sort_indices()
        start, stop = A.indptr[epi_row], A.indptr[epi_row + 1]
        price_cols = vm.s_re[:, 0, :].ravel()
        self._price_pos = start + np.searchsorted(A.indices[start:stop], price_cols)
        assert np.all(A.indices[self._price_pos] == price_cols)
        load_sel = self.pmap.kind == B_EQ
        self._load_rows = self.pmap.row[load_sel]
        self._load_param = self.pmap.param[load_sel] - T * PHASES
        self._load_coef = self.pmap.coef[load_sel]

    def lp_for(self, price, load, x_fixed=None):
        T = self.config.horizon
        price = np.asarray(price, dtype=float).reshape(T, PHASES)
        load = np.asarray(load, dtype=float).reshape(T, PHASES)
        if np.any(price < 0):
            raise ValidationError("prices must be nonnegative")
        lp = self.base.copy()
        lp.A_ub.data[self._price_pos] = price.ravel()
        np.add.at(lp.b_eq, self._load_rows, self._load_coef * load.ravel()[self._load_param])
        lp.lo[self.varmap.eta] = eta_lower_bound(self.network, price)
        if x_fixed is not None:
            lp.lo[self.varmap.x] = x_fixed
            lp.hi[self.varmap.x] = x_fixed
        return lp

    def solve(self, price, load, x_fixed=None, **kw):
        lp = self.lp_for(price, load, x_fixed)
        return self.solution(solve(lp, **kw))

    def value_and_grad(self, price, load, **kw):
        """Optimal value and its gradients w.r.t. price and load, plus the solution."""
        lp = self.lp_for(price, load)
        result = solve(lp, **kw)
        result.check()
        grad = value_gradient(result, self.pmap, lp)
        T = self.config.horizon
        half = T * PHASES
        return (result.objective, grad[:half].reshape(T, PHASES),
                grad[half:].reshape(T, PHASES), self.solution(result))

    def solution(self, result):
        vm = self.varmap
        xv = result.x
        s = xv[vm.s_re] + 1j * xv[vm.s_im]
        return PlanSolution(objective=result.objective, x=xv[vm.x].copy(), dispatch=xv[vm.sd],
                            voltage=xv[vm.vc], slack_power=s[:, 0, :], soc=xv[vm.soc],
                            injection=s, eta=float(xv[vm.eta]), result=result)


def build_single_stage(instance):
    """Single-stage planning LP: worst-case price in the epigraph row and the
    dominant load on the right-hand side of the injection rows.

    Returns ``(model, lp)``.
    """
    model = SingleStageModel(instance.network, instance.config, instance.weights)
    lp = model.lp_for(worst_case_price(instance.price_box), dominant_load(instance.load_box))
    return model, lp


def solve_single_stage(instance, **kw):
    model, lp = build_single_stage(instance)
    return model.solution(solve(lp, **kw))


def _x_grid(x_star, candidates, rel=(-0.2, -0.1, 0.0, 0.1, 0.2), absolute=(0.0, 0.01, 0.05, 0.1, 0.2)):
    axes = []
    for j in candidates:
        xs = x_star[j]
        pts = [xs * (1 + r) for r in rel] if xs > 1e-6 else list(absolute)
        axes.append(sorted(set(max(0.0, p) for p in pts)))
    for combo in itertools.product(*axes):
        x = np.zeros_like(x_star)
        x[list(candidates)] = combo
        yield x


def _recourse_value(lp, tol):
    """Optimal value, or ``inf`` when infeasible.  A stall at the accuracy
    floor is retried once at a looser tolerance instead of counting as
    infeasible."""
    res = solve(lp, tol=tol)
    if res.status == ITERATION_LIMIT:
        res = solve(lp, tol=max(100 * tol, 1e-7))
    return res.objective if res.optimal else np.inf


def brute_force_two_stage(instance, grid_points_per_dim=11, x_grid=None, max_solves=20000, tol=1e-9):
    """min over an x grid of max over a load grid of the recourse cost.

    Prices sit at their worst case.  The x grid defaults to the single-stage
    optimum perturbed by +-10/20% per candidate bus.  Raises
    ``OracleTooLarge`` when the number of LP solves would exceed
    ``max_solves``.
    """
    box = instance.load_box
    axes = []
    for lo, hi in zip(box.lower.ravel(), box.upper.ravel()):
        axes.append([lo] if hi <= lo else list(np.linspace(lo, hi, grid_points_per_dim)))
    n_real = int(np.prod([len(a) for a in axes], dtype=float))
    model, lp = build_single_stage(instance)
    cost = np.array([b.bess_cost for b in instance.network.buses])
    if x_grid is None:
        star = model.solution(solve(lp, tol=tol))
        if not star.result.optimal:
            return np.inf
        x_grid = list(_x_grid(star.x, model.varmap.candidates))
    else:
        x_grid = [np.asarray(x, dtype=float) for x in x_grid]
    if n_real * len(x_grid) > max_solves:
        raise OracleTooLarge(f"{n_real} realizations x {len(x_grid)} sizing points > {max_solves}")
    price = worst_case_price(instance.price_box)
    T = instance.config.horizon
    # visit the upper corner first: it is the likely maximizer and tightens pruning
    realizations = sorted(itertools.product(*axes), key=lambda r: -sum(r))
    best = np.inf
    for x in x_grid:
        worst = -np.inf
        for real in realizations:
            val = _recourse_value(model.lp_for(price, np.reshape(real, (T, PHASES)), x_fixed=x), tol)
            worst = max(worst, val)
            if worst >= best:
                break
        best = min(best, worst)
    return float(best)


def physics_report(model, solution, load):
    """Post-solve residuals of the physical invariants of a planning solution."""
    net, cfg, vm = model.network, model.config, model.varmap
    s = solution.injection
    balance = np.abs(s.sum(axis=1)).max()
    soc = solution.soc
    disp = solution.dispatch
    tele = 0.0
    soc_viol = 0.0
    for c, j in enumerate(vm.candidates):
        cum = cfg.soc_initial + np.concatenate([np.zeros((1, PHASES)), np.cumsum(disp[:, c, :], axis=0)])
        tele = max(tele, np.abs(soc[:, c, :] - cum).max())
        xj = solution.x[j]
        soc_viol = max(soc_viol, np.max(soc[:, c, :] - cfg.soc_max * xj), np.max(cfg.soc_min * xj - soc[:, c, :]))
    v_viol = 0.0
    for bus in net.buses:
        if bus.kind == SLACK:
            continue
        v = solution.voltage[:, bus.id]
        v_viol = max(v_viol, np.max(v - bus.v_max), np.max(bus.v_min - v))
    return dict(power_balance=float(balance), soc_telescoping=float(tele),
                soc_bounds=float(max(soc_viol, 0.0)), voltage_bounds=float(max(v_viol, 0.0)))
