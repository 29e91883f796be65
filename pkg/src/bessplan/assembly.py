"""Linear constraint assembly for the lossless three-phase DistFlow model.

Every equation is written over real LP columns.  Complex quantities that are
linear in those columns (subtree flows, branch power matrices) are held as
``AffineExpr`` objects: a dict ``column -> complex coefficient array`` plus a
constant, so matrix products and conjugate transposes act coefficientwise.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp

from .exceptions import HorizonMismatch, InvalidBounds, SingularImpedance, ValidationError
from .network import ALPHA_PLUS, PHASES, SLACK, gamma_matrix, is_invertible, subtree
from .solver import LinearProgram

A_BALANCED = np.outer(ALPHA_PLUS, ALPHA_PLUS.conj())
LABELS = ("4a", "4b", "4c", "4d", "6a", "6b", "7a", "7b", "7c", "7d", "7e", "13", "15",
          "18-epigraph", "flow_cap")

IMPEDANCE, ADMITTANCE, AUTO = "impedance", "admittance", "auto"


@dataclass
class ModelConfig:
    """Planning-model settings.

    ``horizon`` counts time steps (tau + 1).  SOC limits are multiples of the
    installed size ``x_j``; with the injection-positive convention used for
    dispatch, SOC falls while charging, so the default window ``[-1, 0]``
    means "stored energy between 0 and x_j, starting empty".
    """

    horizon: int = 24
    soc_min: float = -1.0
    soc_max: float = 0.0
    dispatch_min: float = -0.2
    dispatch_max: float = 0.2
    soc_initial: float = 0.0
    x_max: float = 10.0
    loss_weight: float = 0.8
    mode: str = AUTO
    slack_voltage: float = 1.0
    invert_tol: float = 1e-9
    start_step: int = 0

    def __post_init__(self):
        if int(self.horizon) != self.horizon or self.horizon < 1:
            raise ValidationError("horizon must be a positive integer")
        self.horizon = int(self.horizon)
        if not self.soc_min <= 0 <= self.soc_max:
            raise InvalidBounds("need soc_min <= 0 <= soc_max")
        if self.dispatch_min > self.dispatch_max:
            raise InvalidBounds("dispatch_min exceeds dispatch_max")
        if self.x_max < 0:
            raise InvalidBounds("x_max must be nonnegative")
        if not 0.0 <= self.loss_weight <= 1.0:
            raise ValidationError("loss_weight must lie in [0, 1]")
        if self.mode not in (IMPEDANCE, ADMITTANCE, AUTO):
            raise ValidationError(f"unknown voltage mode {self.mode!r}")
        if self.slack_voltage <= 0:
            raise InvalidBounds("slack_voltage must be positive")


@dataclass
class VariableMap:
    """Column index arrays for each symbol of the planning model."""

    n_buses: int
    n_steps: int
    candidates: tuple
    x: np.ndarray
    s_re: np.ndarray
    s_im: np.ndarray
    sd: np.ndarray
    vc: np.ndarray
    soc: np.ndarray
    eta: int
    n: int

    @classmethod
    def build(cls, network, n_steps):
        nb, T = network.n_buses, n_steps
        cand = tuple(network.candidates)
        nc = len(cand)
        offset = [0]

        def block(*shape):
            size = int(np.prod(shape))
            cols = np.arange(offset[0], offset[0] + size).reshape(shape)
            offset[0] += size
            return cols

        x = block(nb)
        s_re = block(T, nb, PHASES)
        s_im = block(T, nb, PHASES)
        sd = block(T, nc, PHASES) if nc else np.zeros((T, 0, PHASES), int)
        vc = block(T, nb)
        soc = block(T + 1, nc, PHASES) if nc else np.zeros((T + 1, 0, PHASES), int)
        eta = offset[0]
        return cls(n_buses=nb, n_steps=T, candidates=cand, x=x, s_re=s_re, s_im=s_im,
                   sd=sd, vc=vc, soc=soc, eta=eta, n=eta + 1)

    def cand_index(self, bus):
        return self.candidates.index(bus)

    def owners(self):
        """Symbol name for every column, in column order."""
        names = [None] * self.n
        for j, col in enumerate(self.x):
            names[col] = f"x[{j}]"
        for (t, j, p), col in np.ndenumerate(self.s_re):
            names[col] = f"re_s[{t},{j},{p}]"
        for (t, j, p), col in np.ndenumerate(self.s_im):
            names[col] = f"im_s[{t},{j},{p}]"
        for (t, c, p), col in np.ndenumerate(self.sd):
            names[col] = f"re_sd[{t},{self.candidates[c]},{p}]"
        for (t, j), col in np.ndenumerate(self.vc):
            names[col] = f"vc[{t},{j}]"
        for (t, c, p), col in np.ndenumerate(self.soc):
            names[col] = f"soc[{t},{self.candidates[c]},{p}]"
        names[self.eta] = "eta"
        return names


class AffineExpr:
    """Complex-valued affine function of real LP columns.

    ``terms`` maps a column to its coefficient array (all of one shape, e.g.
    ``(3,)`` for a phase vector or ``(3, 3)`` for a matrix).
    """

    def __init__(self, terms=None, const=None, shape=(PHASES,)):
        self.terms = {} if terms is None else dict(terms)
        self.const = np.zeros(shape, complex) if const is None else np.asarray(const, complex)

    @property
    def shape(self):
        return self.const.shape

    def _map(self, fn):
        return AffineExpr({c: fn(v) for c, v in self.terms.items()}, fn(self.const))

    def __add__(self, other):
        terms = dict(self.terms)
        for c, v in other.terms.items():
            terms[c] = terms[c] + v if c in terms else v
        return AffineExpr(terms, self.const + other.const)

    def __neg__(self):
        return self._map(lambda v: -v)

    def __sub__(self, other):
        return self + (-other)

    def scale(self, k):
        return self._map(lambda v: k * v)

    def lmul(self, M):
        """``M @ self``."""
        return self._map(lambda v: M @ v)

    def rmul(self, M):
        """``self @ M``."""
        return self._map(lambda v: v @ M)

    @property
    def H(self):
        return self._map(lambda v: v.conj().T)

    def diag(self):
        """Vector expression to diagonal-matrix expression."""
        return self._map(np.diag)

    def evaluate(self, xvec):
        out = self.const.copy()
        for c, v in self.terms.items():
            out = out + v * xvec[c]
        return out


def subtree_flow_expr(network, varmap, line, t):
    """Per-phase subtree flow into ``line.to_bus``: minus the sum of the
    injections of every bus at or below it."""
    tree = network.tree
    terms = {}
    for k in sorted(subtree(tree, line.to_bus)):
        for p in range(PHASES):
            e = np.zeros(PHASES, complex)
            e[p] = -1.0
            terms[int(varmap.s_re[t, k, p])] = e
            terms[int(varmap.s_im[t, k, p])] = 1j * e
    return AffineExpr(terms)


def flow_matrix_expr(lam):
    """Branch power matrix ``gamma @ diag(lam)``."""
    return lam.diag().lmul(gamma_matrix())


def voltage_drop_impedance(z, S):
    """``z S^H + S z^H``: voltage-square drop along a lossless branch."""
    return z @ S.conj().T + S @ z.conj().T


def admittance_residual(y, v_from, v_to, S):
    """Residual of ``y (v_from - v_to) y^H = S^H y^H + y S``."""
    return y @ (v_from - v_to) @ y.conj().T - (S.conj().T @ y.conj().T + y @ S)


class LinearConstraintSystem:
    """Labelled sparse rows ``sum coef * x (rel) rhs`` with ``rel`` in {"=", "<="}.

    Rows flagged ``as_bound`` hold a single column and are turned into
    variable bounds when converted to an LP.
    """

    def __init__(self, n_cols):
        self.n_cols = n_cols
        self.row_cols, self.row_vals = [], []
        self.rel, self.rhs, self.labels, self.as_bound = [], [], [], []

    def __len__(self):
        return len(self.rhs)

    def add(self, label, cols, coefs, rel, rhs, as_bound=False, drop_tol=1e-14):
        if label not in LABELS:
            raise ValueError(f"unknown row label {label!r}")
        cols = np.asarray(cols, dtype=int).ravel()
        coefs = np.asarray(coefs, dtype=float).ravel()
        keep = np.abs(coefs) > drop_tol
        cols, coefs = cols[keep], coefs[keep]
        if cols.size == 0:
            ok = abs(rhs) <= 1e-12 if rel == "=" else rhs >= -1e-12
            if not ok:
                raise InvalidBounds(f"row {label} has no coefficients but rhs {rhs}")
            return None
        if as_bound and cols.size != 1:
            raise ValueError("bound rows must have exactly one column")
        order = np.argsort(cols, kind="stable")
        self.row_cols.append(cols[order])
        self.row_vals.append(coefs[order])
        self.rel.append(rel)
        self.rhs.append(float(rhs))
        self.labels.append(label)
        self.as_bound.append(bool(as_bound))
        return len(self.rhs) - 1

    def add_hermitian(self, label, expr, drop_tol=1e-12):
        """Emit ``expr == 0`` for a Hermitian 3x3 expression as 9 real rows."""
        idx = [(i, i, "re") for i in range(PHASES)]
        idx += [(i, j, part) for part in ("re", "im") for i in range(PHASES) for j in range(i + 1, PHASES)]
        cols = np.fromiter(expr.terms.keys(), dtype=int, count=len(expr.terms))
        mats = np.array(list(expr.terms.values())) if expr.terms else np.zeros((0, 3, 3), complex)
        rows = []
        for i, j, part in idx:
            take = np.real if part == "re" else np.imag
            rows.append(self.add(label, cols, take(mats[:, i, j]), "=",
                                 -float(take(expr.const[i, j])), drop_tol=drop_tol))
        return rows

    def to_lp(self, c, lo, hi, c0=0.0):
        """Build a ``LinearProgram``; returns it with a row map.

        ``row_map[i]`` is ``("eq", k)``, ``("ub", k)`` or ``("bound", col)``.
        """
        lo = np.array(lo, dtype=float)
        hi = np.array(hi, dtype=float)
        eq = dict(r=[], c=[], v=[], b=[], lab=[])
        ub = dict(r=[], c=[], v=[], b=[], lab=[])
        row_map = []
        for cols, vals, rel, rhs, lab, bnd in zip(self.row_cols, self.row_vals, self.rel,
                                                  self.rhs, self.labels, self.as_bound):
            if bnd:
                j, a = int(cols[0]), float(vals[0])
                val = rhs / a
                if rel == "=":
                    lo[j] = max(lo[j], val)
                    hi[j] = min(hi[j], val)
                elif a > 0:
                    hi[j] = min(hi[j], val)
                else:
                    lo[j] = max(lo[j], val)
                row_map.append(("bound", j))
                continue
            blk = eq if rel == "=" else ub
            k = len(blk["b"])
            blk["r"].extend([k] * cols.size)
            blk["c"].extend(cols.tolist())
            blk["v"].extend(vals.tolist())
            blk["b"].append(rhs)
            blk["lab"].append(lab)
            row_map.append(("eq" if rel == "=" else "ub", k))
        if np.any(lo > hi + 1e-12):
            bad = int(np.flatnonzero(lo > hi + 1e-12)[0])
            raise InvalidBounds(f"column {bad}: lower bound {lo[bad]} exceeds upper {hi[bad]}")
        hi = np.maximum(hi, lo)

        def mat(blk):
            return sp.csr_matrix((blk["v"], (blk["r"], blk["c"])), shape=(len(blk["b"]), self.n_cols))

        lp = LinearProgram(c=c, A_eq=mat(eq), b_eq=np.array(eq["b"]), A_ub=mat(ub),
                           b_ub=np.array(ub["b"]), lo=lo, hi=hi, eq_labels=eq["lab"],
                           ub_labels=ub["lab"], c0=c0)
        return lp, row_map


# ---------------------------------------------------------------------------
# equation blocks
# ---------------------------------------------------------------------------

def assemble_power_balance(network, varmap, t, system):
    """Sum of all injections is zero, per phase, real and imaginary."""
    rows = []
    for p in range(PHASES):
        for block in (varmap.s_re, varmap.s_im):
            cols = block[t, :, p]
            rows.append(system.add("4a", cols, np.ones(cols.size), "=", 0.0))
    return rows


def _line_mode(line, mode, tol):
    if mode == AUTO:
        ok = is_invertible(line.y_fwd, tol) and is_invertible(line.y_rev, tol)
        return IMPEDANCE if ok else ADMITTANCE
    return mode


def assemble_voltage_impedance(network, varmap, t, system, lines=None, tol=1e-9):
    """Per-line voltage drop ``v_j - v_k = z S^H + S z^H`` on the balanced
    parameterization.

    With ``v = v_c A`` the matrix relation is projected onto ``A`` (Frobenius
    inner product, ``<A, A> = 9``), giving one real row per line.  Summing
    the rows along a path gives the slack-to-bus form.
    """
    rows = []
    for line in network.lines if lines is None else lines:
        if not is_invertible(line.y_fwd, tol):
            raise SingularImpedance(f"line {line.key} admittance is not invertible")
        z = np.linalg.inv(line.y_fwd)
        S = flow_matrix_expr(subtree_flow_expr(network, varmap, line, t))
        M = S.H.lmul(z) + S.rmul(z.conj().T)
        cols = [int(varmap.vc[t, line.from_bus]), int(varmap.vc[t, line.to_bus])]
        coefs = [1.0, -1.0]
        for col, mat in M.terms.items():
            cols.append(col)
            coefs.append(-np.real(np.sum(A_BALANCED.conj() * mat)) / 9.0)
        rows.append(system.add("4d", cols, coefs, "=", 0.0))
    return rows


def assemble_voltage_admittance(network, varmap, t, system, lines=None, independent=True):
    """Both directions of ``y (v_j - v_k) y^H = S^H y^H + y S`` with
    ``v = v_c A``; the reverse direction carries the negated flow.

    Each direction gives 9 real rows.  On the balanced parameterization many
    of the 18 rows per line are linear combinations of the others; with
    ``independent=True`` only a maximal independent subset is kept (pivoted
    QR on the line's block), which keeps the LP's equality block full rank.
    """
    rows = []
    for line in network.lines if lines is None else lines:
        S = flow_matrix_expr(subtree_flow_expr(network, varmap, line, t))
        vj, vk = int(varmap.vc[t, line.from_bus]), int(varmap.vc[t, line.to_bus])
        block = LinearConstraintSystem(system.n_cols)
        for y, sign, (a, b) in ((line.y_fwd, 1.0, (vj, vk)), (line.y_rev, -1.0, (vk, vj))):
            yAy = y @ A_BALANCED @ y.conj().T
            lhs = AffineExpr({a: yAy, b: -yAy}, np.zeros((3, 3), complex))
            Sd = S.scale(sign)
            rhs = Sd.H.rmul(y.conj().T) + Sd.lmul(y)
            block.add_hermitian("13", lhs - rhs)
        keep = range(len(block))
        if independent and len(block):
            keep = _independent_rows(block)
        for i in keep:
            rows.append(system.add("13", block.row_cols[i], block.row_vals[i], "=", block.rhs[i]))
    return rows


def _independent_rows(block, tol=1e-10):
    cols = np.unique(np.concatenate(block.row_cols))
    M = np.zeros((len(block), cols.size + 1))
    for i, (c, v) in enumerate(zip(block.row_cols, block.row_vals)):
        M[i, np.searchsorted(cols, c)] = v
    M[:, -1] = block.rhs
    # row norms equalised so the pivot order is scale-free
    M /= np.linalg.norm(M[:, :-1], axis=1, keepdims=True)
    _, R, piv = sla.qr(M[:, :-1].T, mode="economic", pivoting=True)
    d = np.abs(np.diag(R))
    rank = int(np.sum(d > tol * d[0]))
    kept = np.sort(piv[:rank])
    dropped = np.setdiff1d(np.arange(len(block)), kept)
    if dropped.size:
        coef, *_ = np.linalg.lstsq(M[kept, :-1].T, M[dropped, :-1].T, rcond=None)
        if np.abs(coef.T @ M[kept, -1] - M[dropped, -1]).max() > 1e-9:
            raise InvalidBounds("inconsistent admittance relations")
    return kept.tolist()


def assemble_voltage(network, varmap, t, system, config):
    imp, adm = [], []
    for line in network.lines:
        (imp if _line_mode(line, config.mode, config.invert_tol) == IMPEDANCE else adm).append(line)
    rows = assemble_voltage_impedance(network, varmap, t, system, imp, config.invert_tol) if imp else []
    if adm:
        rows += assemble_voltage_admittance(network, varmap, t, system, adm)
    return rows


def assemble_operational_bounds(network, varmap, t, system, config=None):
    """Injection boxes, voltage-square boxes and optional flow caps."""
    rows = []
    for bus in network.buses:
        if np.any(bus.s_min.real > bus.s_max.real) or np.any(bus.s_min.imag > bus.s_max.imag):
            raise InvalidBounds(f"bus {bus.id}: s_min exceeds s_max")
        for p in range(PHASES):
            for col, lo, hi in ((varmap.s_re[t, bus.id, p], bus.s_min[p].real, bus.s_max[p].real),
                                (varmap.s_im[t, bus.id, p], bus.s_min[p].imag, bus.s_max[p].imag)):
                rows.append(system.add("6a", [col], [1.0], "<=", hi, as_bound=True))
                rows.append(system.add("6a", [col], [-1.0], "<=", -lo, as_bound=True))
        col = varmap.vc[t, bus.id]
        if bus.kind == SLACK:
            ref = 1.0 if config is None else config.slack_voltage
            rows.append(system.add("6b", [col], [1.0], "=", ref, as_bound=True))
        else:
            rows.append(system.add("6b", [col], [1.0], "<=", bus.v_max, as_bound=True))
            rows.append(system.add("6b", [col], [-1.0], "<=", -bus.v_min, as_bound=True))
    for line in network.lines:
        if line.flow_cap is None:
            continue
        lam = subtree_flow_expr(network, varmap, line, t)
        cols = np.array(list(lam.terms.keys()))
        coefs = np.array(list(lam.terms.values()))
        for p in range(PHASES):
            re = np.real(coefs[:, p])
            rows.append(system.add("flow_cap", cols, re, "<=", line.flow_cap))
            rows.append(system.add("flow_cap", cols, -re, "<=", line.flow_cap))
    return rows


def assemble_der(network, varmap, config, load_rhs, system):
    """Injection composition, dispatch limits and SOC dynamics.

    ``load_rhs`` has shape ``(horizon, n_buses, 3)`` and holds signed real
    injections (demand negative).  Returns ``{(t, bus, phase): row}`` for the
    injection-composition rows, whose right-hand sides carry the load.
    """
    T = varmap.n_steps
    load_rhs = np.asarray(load_rhs)
    if load_rhs.shape != (T, varmap.n_buses, PHASES):
        raise HorizonMismatch(
            f"load_rhs shape {load_rhs.shape}, expected {(T, varmap.n_buses, PHASES)}")
    if not np.all(np.isfinite(load_rhs)):
        raise ValidationError("load_rhs has non-finite entries")
    load_rhs = np.real(load_rhs)
    load_rows = {}
    for t in range(T):
        for bus in network.buses:
            if bus.kind == SLACK:
                continue
            pv = bus.pv_at(config.start_step + t).real
            c = varmap.cand_index(bus.id) if bus.id in varmap.candidates else None
            for p in range(PHASES):
                cols, coefs = [varmap.s_re[t, bus.id, p]], [1.0]
                if c is not None:
                    cols.append(varmap.sd[t, c, p])
                    coefs.append(-1.0)
                load_rows[(t, bus.id, p)] = system.add("7a", cols, coefs, "=",
                                                       pv[p] + load_rhs[t, bus.id, p])
    for c, _ in enumerate(varmap.candidates):
        for p in range(PHASES):
            for t in range(T):
                col = varmap.sd[t, c, p]
                system.add("7b", [col], [1.0], "<=", config.dispatch_max, as_bound=True)
                system.add("7b", [col], [-1.0], "<=", -config.dispatch_min, as_bound=True)
                system.add("7c", [varmap.soc[t + 1, c, p], varmap.soc[t, c, p], col],
                           [1.0, -1.0, -1.0], "=", 0.0)
            system.add("7d", [varmap.soc[0, c, p]], [1.0], "=", config.soc_initial, as_bound=True)
            for t in range(T + 1):
                xcol = varmap.x[varmap.candidates[c]]
                s = varmap.soc[t, c, p]
                system.add("7e", [s, xcol], [1.0, -config.soc_max], "<=", 0.0)
                system.add("7e", [s, xcol], [-1.0, config.soc_min], "<=", 0.0)
    return load_rows


def assemble_objective(network, varmap, cost, price, system):
    """Objective ``cost @ x + eta`` and the epigraph row
    ``sum_t price_t . Re(s_0^t) - eta <= 0``.

    Returns the objective vector and the epigraph row index.
    """
    price = np.asarray(price, dtype=float)
    if price.shape != (varmap.n_steps, PHASES):
        raise HorizonMismatch(f"price shape {price.shape}, expected {(varmap.n_steps, PHASES)}")
    if np.any(price < 0):
        raise ValidationError("prices must be nonnegative")
    c = np.zeros(varmap.n)
    c[varmap.x] = np.asarray(cost, dtype=float)
    c[varmap.eta] = 1.0
    cols = np.concatenate([varmap.s_re[:, 0, :].ravel(), [varmap.eta]])
    # keep explicit zero-price coefficients so price can be changed in place
    row = system.add("18-epigraph", cols, np.concatenate([price.ravel(), [-1.0]]), "<=", 0.0,
                     drop_tol=-1.0)
    return c, row


def eta_lower_bound(network, price):
    """A strictly inactive lower bound for the epigraph variable."""
    smin = network.bus(0).s_min.real
    return float(np.sum(np.minimum(0.0, np.asarray(price) * smin))) - 1.0


@dataclass
class AssembledModel:
    lp: LinearProgram
    varmap: VariableMap
    system: LinearConstraintSystem
    row_map: list
    load_rows: dict = field(default_factory=dict)
    epigraph_row: int = None


def assemble(network, config, load_rhs, price):
    """Full planning LP for fixed loads and prices."""
    network.tree  # radiality check
    varmap = VariableMap.build(network, config.horizon)
    system = LinearConstraintSystem(varmap.n)
    for t in range(varmap.n_steps):
        assemble_power_balance(network, varmap, t, system)
        assemble_voltage(network, varmap, t, system, config)
        assemble_operational_bounds(network, varmap, t, system, config)
    load_rows = assemble_der(network, varmap, config, load_rhs, system)
    cost = np.array([b.bess_cost for b in network.buses])
    c, epi = assemble_objective(network, varmap, cost, price, system)
    lo = np.full(varmap.n, -np.inf)
    hi = np.full(varmap.n, np.inf)
    lo[varmap.x] = 0.0
    hi[varmap.x] = 0.0
    for j in varmap.candidates:
        hi[varmap.x[j]] = config.x_max
    lo[varmap.eta] = eta_lower_bound(network, price)
    lp, row_map = system.to_lp(c, lo, hi)
    return AssembledModel(lp=lp, varmap=varmap, system=system, row_map=row_map,
                          load_rows=load_rows, epigraph_row=epi)
