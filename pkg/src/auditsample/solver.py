"""Choose how many units to add to and remove from an audit sample.

The decision variables are, per (X, Y) stratum, ``delta_plus`` (units moved
from Z = 0 to Z = 1) and ``delta_minus`` (units moved from Z = 1 to Z = 0).
The continuous relaxation is solved from many random starts with a
log-barrier interior-point method; each local solution is normalized,
rounded to whole units and polished by an integer neighbourhood search.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.linalg import cho_factor, cho_solve

from .chisq import chi_square_cutoff
from .table import AdjustedTable, ContingencyTable3, constant_term, deviance, xlogx

log = logging.getLogger(__name__)

DEVIANCE = "deviance"
F1 = "f1"
F2 = "f2"
_KINDS = (DEVIANCE, F1, F2)

_SEED_MASK = (1 << 64) - 1


class SolverError(RuntimeError):
    pass


class FeasibilityError(SolverError):
    """An iterate left the feasible region."""

    def __init__(self, message, attempt=None):
        super().__init__(message if attempt is None else f"attempt {attempt}: {message}")
        self.attempt = attempt


class BoundaryError(ValueError):
    """The gradient was requested at a point with an empty cell."""


@dataclass(frozen=True)
class Objective:
    """Which function the solver minimizes.

    ``weight`` is lambda for F1 and kappa for F2.  For F2 a weight of None
    means "one tenth of the chi-square cutoff", resolved by :func:`optimize`.
    """

    kind: str = DEVIANCE
    weight: float | None = None

    def __post_init__(self):
        if self.kind not in _KINDS:
            raise ValueError(f"unknown objective {self.kind!r}")
        if self.kind == F1 and self.weight is None:
            object.__setattr__(self, "weight", 0.01)
        if self.kind != DEVIANCE and self.weight is not None and not self.weight > 0:
            raise ValueError(f"{self.kind} weight must be positive, got {self.weight!r}")

    @classmethod
    def deviance(cls):
        return cls(DEVIANCE)

    @classmethod
    def f1(cls, lam=0.01):
        return cls(F1, lam)

    @classmethod
    def f2(cls, kappa=None):
        return cls(F2, kappa)

    def value(self, d, penalty):
        """Objective value from a deviance and the total ``sum(dp + dm)``."""
        if self.kind == DEVIANCE:
            return d
        if self.kind == F1:
            return d + self.weight * penalty
        return d + math.exp(-d / self._kappa()) * penalty

    def _kappa(self):
        if self.weight is None:
            raise ValueError("F2 kappa is unresolved; pass it explicitly or go through optimize()")
        return self.weight

    def __str__(self):
        return self.kind if self.kind == DEVIANCE else f"{self.kind}({self.weight:g})"


@dataclass(frozen=True)
class SolverConfig:
    m_plus: int
    m_minus: int
    n_attempts: int = 50
    start_bounds: tuple = (0.1, 0.9, 0.1, 0.9)
    objective: Objective = field(default_factory=Objective)
    alpha: float = 0.05
    inner_tol: float = 1e-8
    max_inner_iters: int = 500
    master_seed: int = 0
    barrier_init: float = 1.0
    barrier_factor: float = 0.2
    barrier_rounds: int = 8
    interior_eps: float = 1e-6
    polish: bool = True
    polish_candidates: int = 5
    integer_start_budget: int = 20_000

    def __post_init__(self):
        for name in ("m_plus", "m_minus"):
            v = getattr(self, name)
            if int(v) != v or v < 0:
                raise ValueError(f"{name} must be a nonnegative integer, got {v!r}")
        if int(self.n_attempts) != self.n_attempts or self.n_attempts < 0:
            raise ValueError(f"n_attempts must be a nonnegative integer, got {self.n_attempts!r}")
        lp, up, lm, um = self.start_bounds
        if not (0 < lp < up < 1 and 0 < lm < um < 1):
            raise ValueError(f"start_bounds must satisfy 0 < l < u < 1, got {self.start_bounds!r}")
        if not 0 < self.alpha < 1:
            raise ValueError(f"alpha must lie in (0, 1), got {self.alpha!r}")
        if not self.inner_tol > 0:
            raise ValueError("inner_tol must be positive")
        if self.max_inner_iters < 1:
            raise ValueError("max_inner_iters must be positive")
        if self.integer_start_budget < 0:
            raise ValueError("integer_start_budget must be nonnegative")
        if self.polish_candidates < 1:
            raise ValueError("polish_candidates must be positive")
        if not 0 < self.barrier_factor < 1:
            raise ValueError("barrier_factor must lie in (0, 1)")
        if not isinstance(self.objective, Objective):
            raise TypeError("objective must be an Objective")


@dataclass(frozen=True)
class AuditPlan:
    table: ContingencyTable3
    delta_plus: np.ndarray
    delta_minus: np.ndarray
    achieved_deviance: float
    deviance_before: float
    cutoff: float
    accepted: bool
    attempts_run: int
    best_attempt_index: int
    objective: Objective
    objective_value: float
    continuous_deviance: float
    m_plus: int
    m_minus: int

    @property
    def adjusted(self) -> AdjustedTable:
        return self.table.adjusted(self.delta_plus, self.delta_minus)

    @property
    def final_counts(self) -> np.ndarray:
        """Integer ``m_ijk`` after the plan is applied."""
        n = self.table.counts
        m = np.empty_like(n)
        m[:, :, 1] = n[:, :, 1] + self.delta_plus - self.delta_minus
        m[:, :, 0] = n[:, :, 0] - self.delta_plus + self.delta_minus
        return m

    @property
    def relative_deviance(self) -> float:
        if self.deviance_before <= 0:
            return float("nan")
        return self.achieved_deviance / self.deviance_before


# ---------------------------------------------------------------------------
# objective and gradient on an AdjustedTable


def _penalty(adjusted: AdjustedTable) -> float:
    return float(adjusted.delta_plus.sum() + adjusted.delta_minus.sum())


def objective(adjusted: AdjustedTable, kind: Objective = Objective()) -> float:
    if not isinstance(adjusted, AdjustedTable):
        raise TypeError("objective() takes an AdjustedTable")
    return kind.value(deviance(adjusted), _penalty(adjusted))


def gradient(adjusted: AdjustedTable, kind: Objective = Objective()) -> np.ndarray:
    """Partial derivatives with respect to ``delta_plus`` and ``delta_minus``.

    Returns an array of shape ``(2, I, J)``: index 0 holds the derivatives
    with respect to ``delta_plus``, index 1 those for ``delta_minus``.
    Strata with no units get 0.  Raises :class:`BoundaryError` if a
    populated stratum has an empty cell.
    """
    m = adjusted.m
    occupied = adjusted.base.n_xy > 0
    if np.any(m[occupied] <= 0):
        raise BoundaryError("gradient is undefined on the boundary (an occupied stratum has an empty cell)")
    gt = _net_gradient(m, occupied)
    out = np.stack([gt, -gt])
    if kind.kind == F1:
        out[:, occupied] += kind.weight
    elif kind.kind == F2:
        d = deviance(adjusted)
        e = math.exp(-d / kind._kappa())
        s = _penalty(adjusted)
        out = out + e * (1.0 - out * s / kind._kappa())
        out[:, ~occupied] = 0.0
    return out


def _net_gradient(m, occupied):
    """dD/dt for the net change t = delta_plus - delta_minus."""
    with np.errstate(divide="ignore", invalid="ignore"):
        lm = np.log(m)
        lM = np.log(m.sum(axis=0))
        g = 2.0 * (lm[:, :, 1] - lm[:, :, 0] - lM[None, :, 1] + lM[None, :, 0])
    return np.where(occupied, g, 0.0)


# ---------------------------------------------------------------------------
# normalization and rounding


def normalize_deltas(delta_plus, delta_minus):
    """Cancel simultaneous additions and removals within a stratum."""
    dp = np.asarray(delta_plus)
    dm = np.asarray(delta_minus)
    zero = np.zeros((), dtype=np.result_type(dp, dm))
    return np.maximum(zero, dp - dm), np.maximum(zero, dm - dp)


class _IntegerState:
    """Exact objective bookkeeping for integer plans in net form.

    ``t`` is the net change per cell; the normalized plan is
    ``dp = max(t, 0)``, ``dm = max(-t, 0)``.
    """

    def __init__(self, table: ContingencyTable3, m_plus, m_minus, kind: Objective, t):
        n = table.counts
        self.n0 = n[:, :, 0].astype(np.int64).ravel()
        self.n1 = n[:, :, 1].astype(np.int64).ravel()
        self.I, self.J = n.shape[:2]
        self.j_of = np.tile(np.arange(self.J), self.I)
        self.occupied = (self.n0 + self.n1) > 0
        self.m_plus = int(m_plus)
        self.m_minus = int(m_minus)
        self.kind = kind
        self.const = constant_term(n)
        self.set_t(np.asarray(t, dtype=np.int64).ravel())

    def set_t(self, t):
        self.t = t.copy()
        self.m1 = self.n1 + self.t
        self.m0 = self.n0 - self.t
        self.M1 = np.bincount(self.j_of, weights=self.m1, minlength=self.J)
        self.M0 = np.bincount(self.j_of, weights=self.m0, minlength=self.J)
        self.P = int(np.maximum(self.t, 0).sum())
        self.Q = int(np.maximum(-self.t, 0).sum())
        self.D = self._deviance()
        self.F = self.kind.value(self.D, self.P + self.Q)

    def _deviance(self, m1=None, m0=None):
        m1 = self.m1 if m1 is None else m1
        m0 = self.m0 if m0 is None else m0
        M1 = np.bincount(self.j_of, weights=m1, minlength=self.J)
        M0 = np.bincount(self.j_of, weights=m0, minlength=self.J)
        v = 2.0 * (xlogx(m1).sum() + xlogx(m0).sum() - xlogx(M1).sum() - xlogx(M0).sum())
        return max(0.0, self.const + v)

    def value_with(self, cell, step):
        """Objective after moving the net change of one cell by ``step``."""
        t = self.t.copy()
        t[cell] += step
        d = self._deviance(self.n1 + t, self.n0 - t)
        return self.kind.value(d, int(np.abs(t).sum()))

    def plan(self):
        dp = np.maximum(self.t, 0).reshape(self.I, self.J)
        dm = np.maximum(-self.t, 0).reshape(self.I, self.J)
        return dp, dm

    # single moves: candidate c = 2 * cell + (0 for +1, 1 for -1)
    def _single_terms(self):
        s = np.array([1, -1])
        t_new = self.t[:, None] + s[None, :]
        ok = (t_new <= self.n0[:, None]) & (t_new >= -self.n1[:, None]) & self.occupied[:, None]
        dP = np.maximum(t_new, 0) - np.maximum(self.t, 0)[:, None]
        dQ = np.maximum(-t_new, 0) - np.maximum(-self.t, 0)[:, None]
        m1n = np.clip(self.m1[:, None] + s[None, :], 0, None)
        m0n = np.clip(self.m0[:, None] - s[None, :], 0, None)
        dcell = 2.0 * (xlogx(m1n) + xlogx(m0n) - (xlogx(self.m1) + xlogx(self.m0))[:, None])
        return ok, dP, dQ, dcell

    def _strat_delta(self, r):
        """Change of the stratum term when every stratum's audited total moves by r."""
        r = np.asarray(r, dtype=np.float64)
        M1n = np.clip(self.M1 + r, 0, None)
        M0n = np.clip(self.M0 - r, 0, None)
        return -2.0 * (xlogx(M1n) + xlogx(M0n) - xlogx(self.M1) - xlogx(self.M0))

    def best_move(self, pairs=True):
        """Best improving single or pair move as (new objective, [(cell, step), ...])."""
        ok, dP, dQ, dcell = self._single_terms()
        s = np.array([1, -1])
        strat = {r: self._strat_delta(r) for r in (-2, -1, 1, 2)}
        strat[0] = np.zeros(self.J)
        jj = self.j_of
        dD1 = dcell + np.stack([strat[1][jj], strat[-1][jj]], axis=1)
        P1 = self.P + dP
        Q1 = self.Q + dQ
        ok1 = ok & (P1 <= self.m_plus) & (Q1 <= self.m_minus)
        F1v = self._values(self.D + dD1, P1 + Q1, ok1).ravel()

        best_val = self.F
        best = None
        if F1v.size:
            k = int(np.argmin(F1v))
            if F1v[k] < best_val:
                best_val, best = F1v[k], [(k // 2, int(s[k % 2]))]
        if not pairs:
            return best_val, best

        flat_ok = ok.ravel()
        idx = np.flatnonzero(flat_ok)
        if idx.size < 2:
            return best_val, best
        cell = idx // 2
        step = s[idx % 2]
        dc = dcell.ravel()[idx]
        same = cell[:, None] == cell[None, :]
        samej = jj[cell][:, None] == jj[cell][None, :]
        st_single = np.where(step == 1, strat[1][jj[cell]], strat[-1][jj[cell]])
        ssum = step[:, None] + step[None, :]
        st_joint = np.select(
            [ssum == 2, ssum == -2, ssum == 0],
            [strat[2][jj[cell]][:, None] * np.ones(idx.size),
             strat[-2][jj[cell]][:, None] * np.ones(idx.size), 0.0],
        )
        dD2 = dc[:, None] + dc[None, :] + np.where(samej, st_joint, st_single[:, None] + st_single[None, :])
        P2 = self.P + dP.ravel()[idx][:, None] + dP.ravel()[idx][None, :]
        Q2 = self.Q + dQ.ravel()[idx][:, None] + dQ.ravel()[idx][None, :]
        upper = np.triu(np.ones((idx.size, idx.size), dtype=bool), 1)
        ok2 = upper & ~same & (P2 <= self.m_plus) & (Q2 <= self.m_minus)
        F2v = self._values(self.D + dD2, P2 + Q2, ok2)
        k = int(np.argmin(F2v))
        a, b = divmod(k, idx.size)
        if F2v[a, b] < best_val:
            best_val = F2v[a, b]
            best = [(int(cell[a]), int(step[a])), (int(cell[b]), int(step[b]))]
        return best_val, best

    def _values(self, d, pen, ok):
        d = np.maximum(d, 0.0)
        if self.kind.kind == DEVIANCE:
            v = d
        elif self.kind.kind == F1:
            v = d + self.kind.weight * pen
        else:
            v = d + np.exp(-d / self.kind._kappa()) * pen
        return np.where(ok, v, np.inf)

    def apply(self, moves):
        t = self.t.copy()
        for c, st in moves:
            t[c] += st
        self.set_t(t)


def _improves(new, old):
    return new < old - 1e-10 * max(1.0, abs(old))


def round_to_integer_plan(delta_plus, delta_minus, table: ContingencyTable3, config: SolverConfig,
                          objective_kind: Objective | None = None):
    """Round a feasible continuous plan to whole units.

    Rounds each normalized adjustment to the nearest integer, clips it to
    the units available, then removes units one at a time from whichever
    stratum costs the least objective until both totals fit their caps.
    Ties go to keeping the lowest (i, j) stratum.
    """
    kind = objective_kind or config.objective
    n = table.counts
    dp, dm = normalize_deltas(np.asarray(delta_plus, float), np.asarray(delta_minus, float))
    dp = np.clip(np.floor(dp + 0.5).astype(np.int64), 0, n[:, :, 0])
    dm = np.clip(np.floor(dm + 0.5).astype(np.int64), 0, n[:, :, 1])
    state = _IntegerState(table, config.m_plus, config.m_minus, kind, (dp - dm).ravel())
    for sign, cap in ((1, config.m_plus), (-1, config.m_minus)):
        while (state.P if sign == 1 else state.Q) > cap:
            cand = np.flatnonzero(sign * state.t > 0)
            vals = np.array([state.value_with(c, -sign) for c in cand])
            # highest index among the cheapest, so low-index strata keep their units
            k = cand[np.flatnonzero(vals == vals.min())[-1]]
            t = state.t.copy()
            t[k] -= sign
            state.set_t(t)
    return state.plan()


def polish_integer_plan(delta_plus, delta_minus, table: ContingencyTable3, config: SolverConfig,
                        objective_kind: Objective | None = None, max_steps=None):
    """Steepest-descent search over single-unit and paired moves.

    Starts from a feasible integer plan and returns a plan no worse than it.
    """
    kind = objective_kind or config.objective
    dp, dm = normalize_deltas(np.asarray(delta_plus, np.int64), np.asarray(delta_minus, np.int64))
    state = _IntegerState(table, config.m_plus, config.m_minus, kind, (dp - dm).ravel())
    if max_steps is None:
        max_steps = 20 * state.t.size + 100
    for _ in range(max_steps):
        val, moves = state.best_move()
        if moves is None or not _improves(val, state.F):
            break
        state.apply(moves)
    return state.plan()


# ---------------------------------------------------------------------------
# continuous solver


class _Problem:
    """Free parameters and barrier for one table/config pair."""

    def __init__(self, table: ContingencyTable3, config: SolverConfig, kind: Objective):
        n = table.counts.astype(np.float64)
        self.table = table
        self.n0 = n[:, :, 0]
        self.n1 = n[:, :, 1]
        self.I, self.J = self.n0.shape
        self.occupied = (self.n0 + self.n1) > 0
        self.free_p = (self.n0 > 0) & (config.m_plus > 0)
        self.free_m = (self.n1 > 0) & (config.m_minus > 0)
        self.ip = np.flatnonzero(self.free_p.ravel())
        self.im = np.flatnonzero(self.free_m.ravel())
        self.np_, self.nm = self.ip.size, self.im.size
        self.m_plus = float(config.m_plus)
        self.m_minus = float(config.m_minus)
        self.ub_p = self.n0.ravel()[self.ip]
        self.ub_m = self.n1.ravel()[self.im]
        self.kind = kind
        self.const = constant_term(table)
        self.j_of = np.tile(np.arange(self.J), self.I)
        self.sel = np.concatenate([self.ip, self.im])
        self.sign = np.concatenate([np.ones(self.np_), -np.ones(self.nm)])
        self.j_sel = self.j_of[self.sel]
        # cell pairs sharing a stratum, with the sign pattern of (dp, dm)
        self.sign_same = (self.j_sel[:, None] == self.j_sel[None, :]) * np.outer(self.sign, self.sign)
        self.sign_cell = (self.sel[:, None] == self.sel[None, :]) * np.outer(self.sign, self.sign)
        self.diag = np.diag_indices(self.dim)
        self.ub = np.concatenate([self.ub_p, self.ub_m])

    @property
    def dim(self):
        return self.np_ + self.nm

    def unpack(self, x):
        K = self.I * self.J
        dp = np.zeros(K)
        dm = np.zeros(K)
        dp[self.ip] = x[: self.np_]
        dm[self.im] = x[self.np_:]
        return dp, dm

    def pack(self, dp, dm):
        return np.concatenate([np.ravel(dp)[self.ip], np.ravel(dm)[self.im]])

    def slacks(self, x):
        xp, xm = x[: self.np_], x[self.np_:]
        return (xp, self.ub_p - xp, xm, self.ub_m - xm,
                np.array([self.m_plus - xp.sum()]) if self.np_ else np.ones(1),
                np.array([self.m_minus - xm.sum()]) if self.nm else np.ones(1))

    def strictly_feasible(self, x):
        if x.size and (x.min() <= 0 or (self.ub - x).min() <= 0):
            return False
        if self.np_ and x[: self.np_].sum() >= self.m_plus:
            return False
        return not (self.nm and x[self.np_:].sum() >= self.m_minus)

    def evaluate(self, x, mu, need_hess=True):
        """Barrier objective, true objective, gradient and Hessian at x."""
        dp, dm = self.unpack(x)
        t = (dp - dm).reshape(self.I, self.J)
        m1 = self.n1 + t
        m0 = self.n0 - t
        M1 = m1.sum(axis=0)
        M0 = m0.sum(axis=0)
        l1, l0, L1, L0 = _safe_log(m1), _safe_log(m0), _safe_log(M1), _safe_log(M0)
        d = self.const + 2.0 * ((m1 * l1).sum() + (m0 * l0).sum() - M1 @ L1 - M0 @ L0)
        d = max(d, 0.0)
        pen = float(x.sum())
        f = self.kind.value(d, pen)

        gt = (2.0 * (l1 - l0 - L1 + L0)).ravel()
        gD = gt[self.sel] * self.sign
        if self.kind.kind == DEVIANCE:
            gf = gD
        elif self.kind.kind == F1:
            gf = gD + self.kind.weight
        else:
            kap = self.kind._kappa()
            e = math.exp(-d / kap)
            gf = gD + e * (1.0 - gD * pen / kap)

        lo_s, hi_s = x, self.ub - x
        bp = self.m_plus - x[: self.np_].sum()
        bm = self.m_minus - x[self.np_:].sum()
        phi = -(np.log(lo_s).sum() + np.log(hi_s).sum())
        gphi = 1.0 / hi_s - 1.0 / lo_s
        if self.np_:
            phi -= math.log(bp)
            gphi[: self.np_] += 1.0 / bp
        if self.nm:
            phi -= math.log(bm)
            gphi[self.np_:] += 1.0 / bm
        F = f + mu * phi
        G = gf + mu * gphi
        if not need_hess:
            return F, f, G, None

        with np.errstate(divide="ignore"):
            a = (1.0 / m1 + 1.0 / m0).ravel()[self.sel]
            b = (1.0 / M1 + 1.0 / M0)[self.j_sel]
        H = (2.0 * a[:, None]) * self.sign_cell - (2.0 * b[:, None]) * self.sign_same
        if self.kind.kind == F2:
            ones = np.ones(self.dim)
            kap = self.kind._kappa()
            e = math.exp(-d / kap)
            H = ((1.0 - e * pen / kap) * H + (e * pen / kap ** 2) * np.outer(gD, gD)
                 - (e / kap) * (np.outer(gD, ones) + np.outer(ones, gD)))
        H[self.diag] += mu * (1.0 / lo_s ** 2 + 1.0 / hi_s ** 2)
        if self.np_:
            H[: self.np_, : self.np_] += mu / bp ** 2
        if self.nm:
            H[self.np_:, self.np_:] += mu / bm ** 2
        return F, f, G, H

    def max_step(self, x, dx):
        """Largest alpha keeping x + alpha*dx strictly inside (times 0.99)."""
        xp, xm = x[: self.np_], x[self.np_:]
        dp, dm = dx[: self.np_], dx[self.np_:]
        alpha = np.inf
        for s, ds in ((xp, -dp), (self.ub_p - xp, dp), (xm, -dm), (self.ub_m - xm, dm)):
            neg = ds > 0
            if np.any(neg):
                alpha = min(alpha, float(np.min(s[neg] / ds[neg])))
        if self.np_ and dp.sum() > 0:
            alpha = min(alpha, (self.m_plus - xp.sum()) / dp.sum())
        if self.nm and dm.sum() > 0:
            alpha = min(alpha, (self.m_minus - xm.sum()) / dm.sum())
        return 0.99 * alpha if np.isfinite(alpha) else 1.0


def _safe_log(a):
    return np.log(np.where(a > 0, a, 1.0))


def _newton_direction(H, G):
    n = H.shape[0]
    scale = max(1e-12, float(np.max(np.abs(np.diag(H)))))
    tau = 0.0
    for _ in range(30):
        try:
            c = cho_factor(H + tau * np.eye(n) if tau else H, check_finite=False)
            return cho_solve(c, -G, check_finite=False)
        except np.linalg.LinAlgError:
            tau = max(4.0 * tau, 1e-10 * scale)
    return -G / np.maximum(np.abs(np.diag(H)), 1e-12)


def _solve(problem: _Problem, x0, config: SolverConfig, attempt=None, trace=None):
    x = np.array(x0, dtype=np.float64)
    if problem.dim == 0:
        return x
    if not problem.strictly_feasible(x):
        raise FeasibilityError("starting point is not strictly feasible", attempt)
    mu = config.barrier_init
    _, f_cur, _, _ = problem.evaluate(x, mu, need_hess=False)
    if trace is not None:
        trace.append(f_cur)
    for _ in range(config.barrier_rounds):
        F, f, G, H = problem.evaluate(x, mu)
        for _ in range(config.max_inner_iters):
            dx = _newton_direction(H, G)
            slope = float(G @ dx)
            if slope >= 0:
                dx = -G
                slope = -float(G @ G)
            if -slope <= 2.0 * config.inner_tol * max(1.0, abs(F)):
                break
            alpha = min(1.0, problem.max_step(x, dx))
            accepted = False
            while alpha >= 1e-6:
                xn = x + alpha * dx
                if problem.strictly_feasible(xn):
                    Fn, fn, Gn, _ = problem.evaluate(xn, mu, need_hess=False)
                    if Fn <= F + 1e-4 * alpha * slope:
                        # barrier decreases but the true objective does not:
                        # this round has reached its equilibrium
                        accepted = fn <= f + 1e-12 * max(1.0, abs(f))
                        break
                alpha *= 0.5
            if not accepted:
                # the true objective can no longer decrease along this path
                break
            change = abs(F - Fn)
            x, F, f = xn, Fn, fn
            if trace is not None:
                trace.append(f)
            if change <= config.inner_tol * max(1.0, abs(F)):
                break
            F, f, G, H = problem.evaluate(x, mu)
        mu *= config.barrier_factor
    if not problem.strictly_feasible(x):
        raise FeasibilityError("iterate left the feasible region", attempt)
    return x


def solve_single(start: AdjustedTable, config: SolverConfig, trace=None,
                 objective_kind: Objective | None = None) -> AdjustedTable:
    """Locally minimize the objective from a strictly feasible start.

    If ``trace`` is a list, the true objective value after every accepted
    step is appended to it (the first entry is the start).
    """
    kind = _resolve_kind(objective_kind or config.objective, start.base, config)
    problem = _Problem(start.base, config, kind)
    x0 = problem.pack(start.delta_plus, start.delta_minus)
    # parameters pinned at zero must stay there
    dp0, dm0 = problem.unpack(x0)
    if (not np.allclose(dp0.reshape(start.delta_plus.shape), start.delta_plus)
            or not np.allclose(dm0.reshape(start.delta_minus.shape), start.delta_minus)):
        raise FeasibilityError("start moves units in a stratum whose adjustment is fixed at zero")
    x = _solve(problem, x0, config, trace=trace)
    dp, dm = problem.unpack(x)
    return start.base.adjusted(dp.reshape(problem.I, problem.J), dm.reshape(problem.I, problem.J))


# ---------------------------------------------------------------------------
# starting values


def allocate_start(rng: np.random.Generator, upper, total, eps=1e-6):
    """Random values in ``[eps, upper - eps]`` summing to ``total``.

    Uniform weights are scaled to the target sum; values pushed past a
    bound are clipped and the excess is spread over the unclipped entries
    in proportion to their weights until nothing moves.
    """
    upper = np.asarray(upper, dtype=np.float64)
    k = upper.size
    if k == 0:
        return np.zeros(0)
    lo = np.minimum(eps, upper / 4)
    hi = upper - lo
    total = float(np.clip(total, lo.sum(), hi.sum()))
    w = rng.uniform(size=k)
    w = np.where(w > 0, w, 1e-12)
    x = np.zeros(k)
    fixed = np.zeros(k, dtype=bool)
    for _ in range(k + 1):
        free = ~fixed
        remaining = total - x[fixed].sum()
        x[free] = w[free] / w[free].sum() * remaining
        over = free & (x > hi)
        under = free & (x < lo)
        if not over.any() and not under.any():
            break
        x[over] = hi[over]
        x[under] = lo[under]
        fixed |= over | under
        if fixed.all():
            break
    return np.clip(x, lo, hi)


def attempt_rng(master_seed: int, attempt: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(master_seed) & _SEED_MASK, int(attempt)]))


def random_start(problem: _Problem, config: SolverConfig, rng: np.random.Generator):
    lp, up, lm, um = config.start_bounds
    parts = []
    for count, ub, cap, lo, hi in ((problem.np_, problem.ub_p, problem.m_plus, lp, up),
                                   (problem.nm, problem.ub_m, problem.m_minus, lm, um)):
        target = rng.uniform(lo * cap, hi * cap)
        parts.append(allocate_start(rng, ub, min(target, hi * ub.sum()) if count else 0.0,
                                    config.interior_eps))
    return np.concatenate(parts)


# ---------------------------------------------------------------------------
# multi-start driver


def _resolve_kind(kind: Objective, table: ContingencyTable3, config: SolverConfig) -> Objective:
    if kind.kind == F2 and kind.weight is None:
        df = max(1, table.J * (table.I - 1))
        return Objective(F2, chi_square_cutoff(df, config.alpha) / 10.0)
    return kind


def _check_caps(table, config):
    n = table.counts
    if config.m_plus > n[:, :, 0].sum():
        raise ValueError(f"m_plus={config.m_plus} exceeds the {int(n[:, :, 0].sum())} unaudited units")
    if config.m_minus > n[:, :, 1].sum():
        raise ValueError(f"m_minus={config.m_minus} exceeds the {int(n[:, :, 1].sum())} audited units")


def _integer_starts(problem, config):
    """Whether each attempt also polishes its own rounded random start.

    The cost of a polish run grows like (M+ + M-) * dim**2, so this is only
    done for small problems, where rounding the continuous optimum can land
    in a poor basin of the integer problem.
    """
    return config.polish and (config.m_plus + config.m_minus) * problem.dim ** 2 <= config.integer_start_budget


def _run_attempt(problem, table, config, kind, i):
    """Integer candidates of attempt ``i`` with the continuous deviance of each."""
    rng = attempt_rng(config.master_seed, i)
    x0 = random_start(problem, config, rng)
    x = _solve(problem, x0, config, attempt=i)
    shape = (problem.I, problem.J)
    dp, dm = (a.reshape(shape) for a in problem.unpack(x))
    cont_d = deviance(table.adjusted(*normalize_deltas(dp, dm)))
    out = [(*round_to_integer_plan(dp, dm, table, config, kind), cont_d)]
    if _integer_starts(problem, config):
        sp, sm = (a.reshape(shape) for a in problem.unpack(x0))
        ip, im = round_to_integer_plan(sp, sm, table, config, kind)
        out.append((*polish_integer_plan(ip, im, table, config, kind), cont_d))
    return out


def optimize(table: ContingencyTable3, config: SolverConfig) -> AuditPlan:
    """Multi-start search for the best integer audit plan.

    The incumbent starts as the unchanged sample, so the returned plan is
    never worse than doing nothing.  Attempt ``i`` draws its random start
    from a stream seeded by ``(master_seed, i)``.
    """
    _check_caps(table, config)
    kind = _resolve_kind(config.objective, table, config)
    df = table.J * (table.I - 1)
    cutoff = chi_square_cutoff(df, config.alpha) if df >= 1 else float("inf")
    d0 = deviance(table)
    zeros = np.zeros((table.I, table.J), dtype=np.int64)
    # incumbents: (value, attempt, dp, dm, continuous deviance), best first
    pool = [(kind.value(d0, 0.0), -1, zeros, zeros, d0)]

    problem = _Problem(table, config, kind)
    failures = []
    for i in range(config.n_attempts):
        if problem.dim == 0:
            break
        try:
            candidates = _run_attempt(problem, table, config, kind, i)
        except FeasibilityError as exc:
            log.warning("%s", exc)
            failures.append(exc)
            continue
        for ip, im, cont_d in candidates:
            val = kind.value(deviance(table.adjusted(ip, im)), float(ip.sum() + im.sum()))
            if any(np.array_equal(ip, c[2]) and np.array_equal(im, c[3]) for c in pool):
                continue
            if len(pool) < config.polish_candidates or _improves(val, pool[-1][0]):
                pool.append((val, i, ip, im, cont_d))
                # stable: an earlier attempt wins ties
                pool.sort(key=lambda c: (c[0], c[1]))
                del pool[config.polish_candidates:]
    if config.n_attempts > 0 and problem.dim > 0 and len(failures) == config.n_attempts:
        raise SolverError(f"all {config.n_attempts} attempts failed: {failures[-1]}")

    best = pool[0]
    if config.polish:
        for val, idx, ip, im, cont_d in pool:
            if idx < 0:
                continue
            ip, im = polish_integer_plan(ip, im, table, config, kind)
            val = kind.value(deviance(table.adjusted(ip, im)), float(ip.sum() + im.sum()))
            if _improves(val, best[0]):
                best = (val, idx, ip, im, cont_d)
    val, idx, ip, im, cont_d = best
    d = deviance(table.adjusted(ip, im))
    return AuditPlan(
        table=table,
        delta_plus=ip.astype(np.int64),
        delta_minus=im.astype(np.int64),
        achieved_deviance=d,
        deviance_before=d0,
        cutoff=cutoff,
        accepted=bool(d <= cutoff),
        attempts_run=config.n_attempts,
        best_attempt_index=idx,
        objective=kind,
        objective_value=val,
        continuous_deviance=cont_d,
        m_plus=config.m_plus,
        m_minus=config.m_minus,
    )


def with_bounds(config: SolverConfig, m_plus: int, m_minus: int) -> SolverConfig:
    return replace(config, m_plus=int(m_plus), m_minus=int(m_minus))
