"""Primal-dual interior point LP solver and optimal-value sensitivities.

Problem form::

    min  c @ x + c0
    s.t. A_eq @ x == b_eq
         A_ub @ x <= b_ub
         lo <= x <= hi

Sign conventions for the multipliers returned in ``SolveResult``: the
Lagrangian is ``c x - y (A_eq x - b_eq) + mu (A_ub x - b_ub)
- z_lo (x - lo) + z_hi (x - hi)`` with ``mu, z_lo, z_hi >= 0``, so that at an
optimum ``dz*/db_eq = y`` and ``dz*/db_ub = -mu``.
"""
from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field, replace

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .exceptions import DegenerateWarning, IterationLimit, NotOptimal, NumericalBreakdown

log = logging.getLogger(__name__)

OPTIMAL = "optimal"
PRIMAL_INFEASIBLE = "primal-infeasible"
DUAL_INFEASIBLE = "dual-infeasible"
ITERATION_LIMIT = "iteration-limit"

_DENSE_ROWS = 300


def _csr(a, ncols):
    if a is None:
        return sp.csr_matrix((0, ncols))
    return sp.csr_matrix(a, dtype=float)


@dataclass
class LinearProgram:
    c: np.ndarray
    A_eq: sp.csr_matrix
    b_eq: np.ndarray
    A_ub: sp.csr_matrix
    b_ub: np.ndarray
    lo: np.ndarray
    hi: np.ndarray
    eq_labels: list = None
    ub_labels: list = None
    c0: float = 0.0

    def __post_init__(self):
        self.c = np.asarray(self.c, dtype=float).ravel()
        n = self.c.size
        self.A_eq = _csr(self.A_eq, n)
        self.A_ub = _csr(self.A_ub, n)
        self.b_eq = np.asarray(self.b_eq if self.b_eq is not None else [], dtype=float).ravel()
        self.b_ub = np.asarray(self.b_ub if self.b_ub is not None else [], dtype=float).ravel()
        self.lo = np.broadcast_to(np.asarray(self.lo, dtype=float), (n,)).copy()
        self.hi = np.broadcast_to(np.asarray(self.hi, dtype=float), (n,)).copy()
        if self.A_eq.shape != (self.b_eq.size, n) or self.A_ub.shape != (self.b_ub.size, n):
            raise ValueError("inconsistent LP dimensions")
        if np.any(self.lo > self.hi):
            raise ValueError("lower bound exceeds upper bound")
        for arr in (self.c, self.b_eq, self.b_ub, self.A_eq.data, self.A_ub.data):
            if not np.all(np.isfinite(arr)):
                raise ValueError("non-finite LP coefficient")
        if self.eq_labels is None:
            self.eq_labels = ["eq"] * self.b_eq.size
        if self.ub_labels is None:
            self.ub_labels = ["ub"] * self.b_ub.size

    @classmethod
    def from_dense(cls, c, A_eq=None, b_eq=None, A_ub=None, b_ub=None, lo=0.0, hi=np.inf):
        return cls(c=c, A_eq=A_eq, b_eq=b_eq, A_ub=A_ub, b_ub=b_ub, lo=lo, hi=hi)

    @property
    def n(self):
        return self.c.size

    def objective(self, x):
        return float(self.c @ x + self.c0)

    def copy(self, **changes):
        fields = dict(c=self.c.copy(), A_eq=self.A_eq.copy(), b_eq=self.b_eq.copy(),
                      A_ub=self.A_ub.copy(), b_ub=self.b_ub.copy(), lo=self.lo.copy(),
                      hi=self.hi.copy(), eq_labels=self.eq_labels, ub_labels=self.ub_labels,
                      c0=self.c0)
        fields.update(changes)
        return LinearProgram(**fields)

    def dump(self):
        """Text dump, one constraint per line: label, relation, rhs, col:coef pairs."""
        out = []
        for A, b, labels, rel in ((self.A_eq, self.b_eq, self.eq_labels, "="),
                                  (self.A_ub, self.b_ub, self.ub_labels, "<=")):
            for i in range(A.shape[0]):
                lo_, hi_ = A.indptr[i], A.indptr[i + 1]
                pairs = " ".join(f"{j}:{v:.17g}" for j, v in zip(A.indices[lo_:hi_], A.data[lo_:hi_]))
                out.append(f"{labels[i]}\t{rel}\t{b[i]:.17g}\t{pairs}")
        for j in range(self.n):
            out.append(f"bound[{j}]\tin\t[{self.lo[j]:.17g},{self.hi[j]:.17g}]\tobj:{self.c[j]:.17g}")
        return "\n".join(out) + "\n"


@dataclass
class SolveResult:
    status: str
    x: np.ndarray
    y_eq: np.ndarray
    mu_ub: np.ndarray
    z_lo: np.ndarray
    z_hi: np.ndarray
    objective: float
    iterations: int
    residuals: dict = field(default_factory=dict)
    history: list = field(default_factory=list)

    @property
    def optimal(self):
        return self.status == OPTIMAL

    def check(self):
        """Raise unless the solve reached optimality."""
        if self.status == ITERATION_LIMIT:
            raise IterationLimit(f"no convergence after {self.iterations} iterations")
        if self.status != OPTIMAL:
            raise NotOptimal(f"solver status {self.status}")
        return self


# ---------------------------------------------------------------------------
# core primal-dual iteration on  min c x, A x = b, lo <= x <= hi
# ---------------------------------------------------------------------------

class _Normal:
    """Factorization of ``A diag(d) A^T + reg I`` with iterative refinement."""

    def __init__(self, A, d, reg, At=None):
        At = A.T if At is None else At
        self.A, self.At, self.d = A, At, d
        m = A.shape[0]
        self.dense = sp.issparse(A) is False
        for attempt in range(4):
            try:
                if self.dense:
                    M = (A * d) @ A.T
                    M[np.diag_indices_from(M)] += reg
                    self._solve = self._dense_factor(M)
                else:
                    M = (A @ sp.diags(d) @ At).tocsc() + reg * sp.identity(m, format="csc")
                    # SPD: symmetric ordering, diagonal pivots
                    lu = spla.splu(M, permc_spec="MMD_AT_PLUS_A", diag_pivot_thresh=0.0,
                                   options=dict(SymmetricMode=True))
                    self._solve = lu.solve
                self.reg = reg
                return
            except (np.linalg.LinAlgError, RuntimeError, ValueError):
                reg = max(reg * 100, 1e-10)
        raise NumericalBreakdown("normal equations singular after regularization")

    @staticmethod
    def _dense_factor(M):
        try:
            cf = sla.cho_factor(M, check_finite=False)
            return lambda r: sla.cho_solve(cf, r, check_finite=False)
        except np.linalg.LinAlgError:
            with warnings.catch_warnings():
                warnings.simplefilter("error", sla.LinAlgWarning)
                try:
                    lu = sla.lu_factor(M, check_finite=False)
                except sla.LinAlgWarning as exc:
                    raise np.linalg.LinAlgError(str(exc)) from exc
            return lambda r: sla.lu_solve(lu, r, check_finite=False)

    def solve(self, rhs, refine=2):
        # refine toward the unregularized system; a step is kept only if it
        # lowers that residual (redundant rows make the system singular)
        sol = self._solve(rhs)
        with np.errstate(all="ignore"):
            res = rhs - self.A @ (self.d * (self.At @ sol))
            for _ in range(refine):
                cand = sol + self._solve(res)
                res_c = rhs - self.A @ (self.d * (self.At @ cand))
                if not (np.all(np.isfinite(res_c)) and np.linalg.norm(res_c) < np.linalg.norm(res)):
                    break
                sol, res = cand, res_c
        if not np.all(np.isfinite(sol)):
            raise NumericalBreakdown("non-finite search direction")
        return sol


def _step(v, dv, eta):
    neg = dv < 0
    if not np.any(neg):
        return 1.0
    return min(1.0, eta * np.min(-v[neg] / dv[neg]))


def _initial_point(A, b, c, lo, hi, hasL, hasU):
    m, n = A.shape
    try:
        if sp.issparse(A):
            AAt = (A @ A.T).tocsc() + 1e-8 * sp.identity(m, format="csc")
            x = A.T @ spla.spsolve(AAt, b) if m else np.zeros(n)
        else:
            AAt = A @ A.T + 1e-8 * np.eye(m)
            x = A.T @ np.linalg.solve(AAt, b) if m else np.zeros(n)
    except (RuntimeError, np.linalg.LinAlgError):
        x = np.zeros(n)
    x = np.where(np.isfinite(x), x, 0.0)
    both = hasL & hasU
    width = np.where(both, hi - lo, 0.0)
    x = np.where(both, np.clip(x, lo + 0.1 * width, hi - 0.1 * width), x)
    only_l = hasL & ~hasU
    only_u = hasU & ~hasL
    scale = max(1.0, np.abs(b).max(initial=0.0))
    x = np.where(only_l, np.maximum(x, lo + 0.1 * scale), x)
    x = np.where(only_u, np.minimum(x, hi - 0.1 * scale), x)
    cs = max(1.0, np.abs(c).max(initial=0.0))
    zl = np.where(hasL, cs, 0.0)
    zu = np.where(hasU, cs, 0.0)
    zl = zl + np.where(hasL & ~hasU, np.maximum(c, 0.0), 0.0)
    zu = zu + np.where(hasU & ~hasL, np.maximum(-c, 0.0), 0.0)
    return x, np.zeros(m), zl, zu


def _ipm(A, b, c, lo, hi, tol, max_iter, reg=1e-8, record=False):
    m, n = A.shape
    hasL, hasU = np.isfinite(lo), np.isfinite(hi)
    nc = max(1, int(hasL.sum() + hasU.sum()))
    lo_f = np.where(hasL, lo, 0.0)
    hi_f = np.where(hasU, hi, 0.0)
    x, y, zl, zu = _initial_point(A, b, c, lo, hi, hasL, hasU)
    At = A.T.tocsr() if sp.issparse(A) else A.T
    bnorm = 1.0 + np.linalg.norm(b)
    cnorm = 1.0 + np.linalg.norm(c)
    history = []
    best, best_it = np.inf, 0
    reg_dual = reg
    status = ITERATION_LIMIT
    it = 0
    # bound slacks are carried separately: recomputing x - lo loses every
    # digit once an active slack drops below the bound's ulp
    wl = np.where(hasL, x - lo_f, 1.0)
    wu = np.where(hasU, hi_f - x, 1.0)
    for it in range(max_iter + 1):
        rp = b - A @ x
        rd = c - At @ y - zl + zu
        comp = float(wl[hasL] @ zl[hasL] + wu[hasU] @ zu[hasU])
        mu = comp / nc
        pobj = float(c @ x)
        dobj = float(b @ y + lo_f[hasL] @ zl[hasL] - hi_f[hasU] @ zu[hasU])
        err_p = np.linalg.norm(rp) / bnorm
        err_d = np.linalg.norm(rd) / cnorm
        gap = abs(pobj - dobj) / (1.0 + abs(pobj))
        if record:
            history.append(dict(iteration=it, pobj=pobj, dobj=dobj, complementarity=comp,
                                residual_term=float(rd @ x - y @ rp), primal_res=err_p,
                                dual_res=err_d))
        if err_p <= tol and err_d <= tol and gap <= tol:
            status = OPTIMAL
            break
        merit = max(err_p, err_d, gap)
        if merit < 0.5 * best:
            best, best_it = merit, it
        # round-off can push a huge iterate onto its bound; treat as divergence
        diverged = (np.abs(x).max(initial=0) > 1e11 or np.abs(y).max(initial=0) > 1e13
                    or not np.isfinite(merit) or np.any(wl[hasL] <= 0) or np.any(wu[hasU] <= 0))
        if it == max_iter or diverged or (it - best_it > 15 and it > 25):
            break

        d = np.zeros(n)
        d[hasL] += zl[hasL] / wl[hasL]
        d[hasU] += zu[hasU] / wu[hasU]
        d += reg
        dinv = 1.0 / d

        def direction(rl, ru):
            r = -rd + np.where(hasL, rl / wl, 0.0) - np.where(hasU, ru / wu, 0.0)
            dy = K.solve(rp - A @ (dinv * r))
            dx = dinv * (At @ dy + r)
            dzl = np.where(hasL, (rl - zl * dx) / wl, 0.0)
            dzu = np.where(hasU, (ru + zu * dx) / wu, 0.0)
            return dx, dy, dzl, dzu

        def lengths(dx, dzl, dzu, eta):
            ap = min(_step(wl[hasL], dx[hasL], eta), _step(wu[hasU], -dx[hasU], eta))
            ad = min(_step(zl[hasL], dzl[hasL], eta), _step(zu[hasU], dzu[hasU], eta))
            return ap, ad

        try:
            K = _Normal(A, dinv, reg_dual, At)
            rl = np.where(hasL, -wl * zl, 0.0)
            ru = np.where(hasU, -wu * zu, 0.0)
            dx_a, _, dzl_a, dzu_a = direction(rl, ru)
            ap, ad = lengths(dx_a, dzl_a, dzu_a, 1.0)
            mu_aff = (((wl + ap * dx_a) * (zl + ad * dzl_a))[hasL].sum()
                      + ((wu - ap * dx_a) * (zu + ad * dzu_a))[hasU].sum()) / nc
            sigma = min(1.0, (mu_aff / mu) ** 3) if mu > 0 else 0.0
            rl = np.where(hasL, sigma * mu - wl * zl - dx_a * dzl_a, 0.0)
            ru = np.where(hasU, sigma * mu - wu * zu + dx_a * dzu_a, 0.0)
            dx, dy, dzl, dzu = direction(rl, ru)
        except NumericalBreakdown:
            # stronger dual regularization, then give up
            if reg_dual >= 1e-4:
                break
            reg_dual *= 100.0
            continue
        eta = max(0.9, 1.0 - 10 * mu / (1 + abs(pobj)))
        eta = min(eta, 0.99995)
        ap, ad = lengths(dx, dzl, dzu, eta)
        x = x + ap * dx
        wl = np.where(hasL, wl + ap * dx, 1.0)
        wu = np.where(hasU, wu - ap * dx, 1.0)
        y = y + ad * dy
        zl = zl + ad * dzl
        zu = zu + ad * dzu
    return status, x, y, zl, zu, it, history


# ---------------------------------------------------------------------------
# presolve / postsolve
# ---------------------------------------------------------------------------

@dataclass
class _Reduced:
    A: object
    b: np.ndarray
    c: np.ndarray
    lo: np.ndarray
    hi: np.ndarray
    keep: np.ndarray
    fixed_vals: np.ndarray
    eq_rows: np.ndarray
    ub_rows: np.ndarray
    eq_scale: np.ndarray
    ub_scale: np.ndarray
    split: np.ndarray
    n_keep: int
    infeasible: bool = False


def _reduce(lp):
    fixed = np.isfinite(lp.lo) & (lp.hi - lp.lo <= 1e-13 * np.maximum(1.0, np.abs(lp.lo)))
    keep = ~fixed
    xf = np.where(fixed, lp.lo, 0.0)
    Aeq = lp.A_eq[:, keep].tocsr()
    Aub = lp.A_ub[:, keep].tocsr()
    beq = lp.b_eq - lp.A_eq @ xf
    bub = lp.b_ub - lp.A_ub @ xf
    infeasible = False

    def nonempty(A, b, is_eq):
        nnz = np.diff(A.indptr)
        rowmax = np.zeros(A.shape[0])
        if A.nnz:
            rowmax = np.maximum.reduceat(np.abs(A.data), A.indptr[:-1].clip(max=A.nnz - 1))
            rowmax[nnz == 0] = 0.0
        empty = rowmax == 0
        bad = (np.abs(b) > 1e-9 * (1 + np.abs(b))) if is_eq else (b < -1e-9 * (1 + np.abs(b)))
        return ~empty, bool(np.any(empty & bad)), rowmax

    keq, bad_eq, eqmax = nonempty(Aeq, beq, True)
    kub, bad_ub, ubmax = nonempty(Aub, bub, False)
    infeasible = bad_eq or bad_ub
    eq_rows = np.flatnonzero(keq)
    ub_rows = np.flatnonzero(kub)
    eq_scale = 1.0 / eqmax[eq_rows]
    ub_scale = 1.0 / ubmax[ub_rows]
    Aeq = sp.diags(eq_scale) @ Aeq[eq_rows]
    Aub = sp.diags(ub_scale) @ Aub[ub_rows]
    beq = beq[eq_rows] * eq_scale
    bub = bub[ub_rows] * ub_scale

    lo, hi, c = lp.lo[keep], lp.hi[keep], lp.c[keep]
    free = ~np.isfinite(lo) & ~np.isfinite(hi)
    split = np.flatnonzero(free)
    if split.size:
        # free variables x = x+ - x-, both nonnegative
        lo = lo.copy()
        lo[split] = 0.0
        Aeq = sp.hstack([Aeq, -Aeq[:, split]]).tocsr()
        Aub = sp.hstack([Aub, -Aub[:, split]]).tocsr()
        c = np.concatenate([c, -c[split]])
        lo = np.concatenate([lo, np.zeros(split.size)])
        hi = np.concatenate([hi, np.full(split.size, np.inf)])
    n1 = c.size
    m_ub = ub_rows.size
    A = sp.vstack([sp.hstack([Aeq, sp.csr_matrix((eq_rows.size, m_ub))]),
                   sp.hstack([Aub, sp.identity(m_ub, format="csr")])]).tocsr()
    b = np.concatenate([beq, bub])
    c = np.concatenate([c, np.zeros(m_ub)])
    lo = np.concatenate([lo, np.zeros(m_ub)])
    hi = np.concatenate([hi, np.full(m_ub, np.inf)])
    if A.shape[0] <= _DENSE_ROWS:
        A = A.toarray()
    return _Reduced(A=A, b=b, c=c, lo=lo, hi=hi, keep=keep, fixed_vals=xf,
                    eq_rows=eq_rows, ub_rows=ub_rows, eq_scale=eq_scale, ub_scale=ub_scale,
                    split=split, n_keep=int(keep.sum()), infeasible=infeasible)


def _classify(red, tol):
    """Decide infeasible/unbounded after the main iteration failed."""
    A, b, c, lo, hi = red.A, red.b, red.c, red.lo, red.hi
    m, n = A.shape
    I = np.eye(m) if not sp.issparse(A) else sp.identity(m, format="csr")
    stack = np.hstack if not sp.issparse(A) else (lambda ms: sp.hstack(ms).tocsr())
    A1 = stack([A, I, -I])
    c1 = np.concatenate([np.zeros(n), np.ones(2 * m)])
    lo1 = np.concatenate([lo, np.zeros(2 * m)])
    hi1 = np.concatenate([hi, np.full(2 * m, np.inf)])
    st, x1, *_ = _ipm(A1, b, c1, lo1, hi1, tol, 200)
    if st == OPTIMAL and c1 @ x1 > 1e-6 * (1 + np.linalg.norm(b)):
        return PRIMAL_INFEASIBLE
    if st != OPTIMAL:
        return ITERATION_LIMIT
    # recession direction with negative cost => unbounded
    hasL, hasU = np.isfinite(lo), np.isfinite(hi)
    dlo = np.where(hasL, 0.0, -1.0)
    dhi = np.where(hasU, 0.0, 1.0)
    movable = dhi > dlo
    if not np.any(movable):
        return ITERATION_LIMIT
    A2 = A[:, movable]
    st, d, *_ = _ipm(A2, np.zeros(m), c[movable], dlo[movable], dhi[movable], tol, 200)
    if st == OPTIMAL and c[movable] @ d < -1e-6 * (1 + np.linalg.norm(c)):
        return DUAL_INFEASIBLE
    return ITERATION_LIMIT


def solve(lp, tol=1e-8, max_iter=200, record_history=False):
    """Solve ``lp`` with a Mehrotra predictor-corrector interior point method.

    Fixed variables are substituted out, rows are equilibrated, inequality
    rows get explicit slacks and free variables are split.  Upper and lower
    variable bounds are handled directly by the barrier so the normal
    equations keep one row per constraint.  Static regularization ``1e-8``
    plus two steps of iterative refinement keep redundant equality rows from
    breaking the factorization.

    Returns a ``SolveResult``; a non-optimal ``status`` is reported rather
    than raised (see ``SolveResult.check``).
    """
    red = _reduce(lp)
    n, m_eq, m_ub = lp.n, lp.b_eq.size, lp.b_ub.size
    empty = SolveResult(status=PRIMAL_INFEASIBLE, x=np.full(n, np.nan), y_eq=np.zeros(m_eq),
                        mu_ub=np.zeros(m_ub), z_lo=np.zeros(n), z_hi=np.zeros(n),
                        objective=np.nan, iterations=0)
    if red.infeasible:
        return empty
    status, xr, yr, zl, zu, iters, history = _ipm(red.A, red.b, red.c, red.lo, red.hi,
                                                  tol, max_iter, record=record_history)
    if status != OPTIMAL:
        status = _classify(red, tol)
        log.debug("IPM stopped without convergence; classified as %s", status)
        if status != ITERATION_LIMIT:
            return replace(empty, status=status, iterations=iters, history=history)

    nk = red.n_keep
    ns = red.split.size
    xk = xr[:nk].copy()
    zlk, zuk = zl[:nk].copy(), zu[:nk].copy()
    if ns:
        xk[red.split] -= xr[nk:nk + ns]
        zlk[red.split] = 0.0
        zuk[red.split] = 0.0
    x = red.fixed_vals.copy()
    x[red.keep] = xk
    y_eq = np.zeros(m_eq)
    mu_ub = np.zeros(m_ub)
    ne = red.eq_rows.size
    y_eq[red.eq_rows] = yr[:ne] * red.eq_scale
    mu_ub[red.ub_rows] = np.maximum(-yr[ne:] * red.ub_scale, 0.0)
    z_lo = np.zeros(n)
    z_hi = np.zeros(n)
    z_lo[red.keep] = zlk
    z_hi[red.keep] = zuk
    fixed = ~red.keep
    if np.any(fixed):
        reduced_cost = lp.c - lp.A_eq.T @ y_eq + lp.A_ub.T @ mu_ub
        z_lo[fixed] = np.maximum(reduced_cost[fixed], 0.0)
        z_hi[fixed] = np.maximum(-reduced_cost[fixed], 0.0)
    result = SolveResult(status=status, x=x, y_eq=y_eq, mu_ub=mu_ub, z_lo=z_lo, z_hi=z_hi,
                         objective=lp.objective(x), iterations=iters, history=history)
    result.residuals = verify_kkt(lp, result).as_dict()
    return result


# ---------------------------------------------------------------------------
# KKT verification and sensitivities
# ---------------------------------------------------------------------------

@dataclass
class KKTReport:
    stationarity: float
    primal_eq: float
    primal_ub: float
    bounds: float
    dual_feasibility: float
    complementarity: float

    def as_dict(self):
        return dict(self.__dict__)

    def ok(self, tol):
        return max(self.as_dict().values()) <= tol


def verify_kkt(lp, result, tol=None):
    """Absolute KKT residual norms (inf-norm) of ``result`` for ``lp``.

    ``tol`` is accepted for symmetry with ``KKTReport.ok``; the report itself
    is tolerance-free.
    """
    x, y, mu, zl, zu = result.x, result.y_eq, result.mu_ub, result.z_lo, result.z_hi
    if not np.all(np.isfinite(x)):
        inf = float("inf")
        return KKTReport(inf, inf, inf, inf, inf, inf)
    st = lp.c - lp.A_eq.T @ y + lp.A_ub.T @ mu - zl + zu
    r_eq = lp.A_eq @ x - lp.b_eq
    slack_ub = lp.b_ub - lp.A_ub @ x
    wl = np.where(np.isfinite(lp.lo), x - lp.lo, np.inf)
    wu = np.where(np.isfinite(lp.hi), lp.hi - x, np.inf)
    bound_viol = max(np.max(-wl, initial=0.0), np.max(-wu, initial=0.0), 0.0)
    dual_viol = max(np.max(-mu, initial=0.0), np.max(-zl, initial=0.0), np.max(-zu, initial=0.0), 0.0)
    comp = max(np.max(np.abs(mu * slack_ub), initial=0.0),
               np.max(np.abs(zl * np.where(np.isfinite(wl), wl, 1.0)), initial=0.0),
               np.max(np.abs(zu * np.where(np.isfinite(wu), wu, 1.0)), initial=0.0))
    return KKTReport(
        stationarity=float(np.max(np.abs(st), initial=0.0)),
        primal_eq=float(np.max(np.abs(r_eq), initial=0.0)),
        primal_ub=float(max(np.max(-slack_ub, initial=0.0), 0.0)),
        bounds=float(bound_viol),
        dual_feasibility=float(dual_viol),
        complementarity=float(comp),
    )


B_EQ, B_UB, A_EQ, A_UB, COST = range(5)


@dataclass
class ParameterMap:
    """Where each named parameter enters the LP.

    Entry ``e`` says: the LP data item (kind, row, col) equals a base value
    plus ``coef[e] * parameter[param[e]]``.
    """

    names: list
    kind: np.ndarray
    param: np.ndarray
    row: np.ndarray
    col: np.ndarray
    coef: np.ndarray

    def __post_init__(self):
        self.kind = np.asarray(self.kind, dtype=int)
        self.param = np.asarray(self.param, dtype=int)
        self.row = np.asarray(self.row, dtype=int)
        self.col = np.asarray(self.col, dtype=int)
        self.coef = np.asarray(self.coef, dtype=float)
        touched = np.bincount(self.param, minlength=len(self.names))
        if np.any(touched == 0):
            raise ValueError("every parameter must touch at least one LP entry")

    def shift(self, lp, delta):
        """Return a copy of ``lp`` with parameters moved by ``delta``."""
        delta = np.asarray(delta, dtype=float)
        out = lp.copy()
        step = self.coef * delta[self.param]
        for kind, vec in ((B_EQ, out.b_eq), (B_UB, out.b_ub)):
            sel = self.kind == kind
            np.add.at(vec, self.row[sel], step[sel])
        sel = self.kind == COST
        np.add.at(out.c, self.col[sel], step[sel])
        for kind, name in ((A_EQ, "A_eq"), (A_UB, "A_ub")):
            sel = self.kind == kind
            if np.any(sel):
                A = getattr(out, name).tolil()
                for r, c_, s in zip(self.row[sel], self.col[sel], step[sel]):
                    A[r, c_] += s
                setattr(out, name, A.tocsr())
        return out


def complementarity_margin(lp, result):
    """Smallest ``max(slack, multiplier)`` over all inequality/bound pairs.

    Rows that only touch fixed variables are constants and are skipped.
    """
    free = (lp.hi > lp.lo).astype(float)
    live = (abs(lp.A_ub) @ free) > 0
    pairs = [((lp.b_ub - lp.A_ub @ result.x)[live], result.mu_ub[live])]
    L, U = np.isfinite(lp.lo) & (lp.hi > lp.lo), np.isfinite(lp.hi) & (lp.hi > lp.lo)
    pairs.append(((result.x - lp.lo)[L], result.z_lo[L]))
    pairs.append(((lp.hi - result.x)[U], result.z_hi[U]))
    vals = [np.maximum(s, d) for s, d in pairs if s.size]
    return float(np.min(np.concatenate(vals))) if vals else np.inf


@dataclass
class DegeneracyReport:
    margin: float
    n_active: int
    n_vars: int
    rank: int

    @property
    def degenerate(self):
        return self.n_active != self.n_vars or self.rank != self.n_vars


def degeneracy_report(lp, result, active_tol=1e-7):
    """Active-set check: a nondegenerate optimum is a vertex whose active
    constraint gradients form a nonsingular square matrix."""
    x = result.x
    rows = [lp.A_eq.toarray()]
    slack = lp.b_ub - lp.A_ub @ x
    scale = 1.0 + np.abs(lp.b_ub)
    rows.append(lp.A_ub.toarray()[slack <= active_tol * scale])
    eye = np.eye(lp.n)
    at_lo = np.isfinite(lp.lo) & (x - lp.lo <= active_tol * (1 + np.abs(lp.lo)))
    at_hi = np.isfinite(lp.hi) & (lp.hi - x <= active_tol * (1 + np.abs(lp.hi))) & ~at_lo
    rows.append(eye[at_lo | at_hi])
    G = np.vstack(rows)
    rank = int(np.linalg.matrix_rank(G, tol=1e-9 * max(1.0, np.abs(G).max(initial=0.0)))) if G.size else 0
    return DegeneracyReport(margin=complementarity_margin(lp, result), n_active=G.shape[0],
                            n_vars=lp.n, rank=rank)


def value_gradient(result, pmap, lp, degeneracy_tol=1e-6):
    """Gradient of the optimal value with respect to the mapped parameters.

    Uses the envelope theorem on the Lagrangian, so only multipliers and the
    primal optimum are needed.  At a degenerate optimum the result is one
    subgradient and a ``DegenerateWarning`` is issued.
    """
    if not result.optimal:
        raise NotOptimal(f"cannot differentiate a {result.status} solve")
    x, y, mu = result.x, result.y_eq, result.mu_ub
    k, r, c, w = pmap.kind, pmap.row, pmap.col, pmap.coef
    contrib = np.zeros(w.size)
    sel = k == B_EQ
    contrib[sel] = w[sel] * y[r[sel]]
    sel = k == B_UB
    contrib[sel] = -w[sel] * mu[r[sel]]
    sel = k == A_EQ
    contrib[sel] = -w[sel] * y[r[sel]] * x[c[sel]]
    sel = k == A_UB
    contrib[sel] = w[sel] * mu[r[sel]] * x[c[sel]]
    sel = k == COST
    contrib[sel] = w[sel] * x[c[sel]]
    grad = np.zeros(len(pmap.names))
    np.add.at(grad, pmap.param, contrib)
    if degeneracy_tol and complementarity_margin(lp, result) < degeneracy_tol:
        warnings.warn("optimum is not strictly complementary; returning a subgradient",
                      DegenerateWarning, stacklevel=2)
    return grad
