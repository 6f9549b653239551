"""Three-way (X, Y, Z) count tables and the deviance of the (XY)(YZ) model.

Counts are held as an ``(I, J, 2)`` array: axis 0 is the error-prone
category X, axis 1 the background stratum Y and axis 2 the audit flag Z
(0 = not audited, 1 = audited).  All logarithms are natural and
``0 * log 0`` is taken as 0.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

NEG_SLACK = 1e-9
ROUND_NOISE = 1e-14


def xlogx(a):
    """Elementwise ``a * log(a)`` with ``0 * log 0 = 0``."""
    a = np.asarray(a, dtype=np.float64)
    out = np.zeros_like(a)
    pos = a > 0
    out[pos] = a[pos] * np.log(a[pos])
    return out


def _as_counts(counts, integer=True):
    arr = np.asarray(counts)
    if arr.ndim != 3 or arr.shape[2] != 2:
        raise ValueError(f"counts must have shape (I, J, 2), got {arr.shape}")
    if integer:
        if not np.issubdtype(arr.dtype, np.integer):
            if not np.all(np.equal(np.mod(arr, 1), 0)):
                raise ValueError("counts must be integers")
        arr = arr.astype(np.int64)
    else:
        arr = arr.astype(np.float64)
    return arr


@dataclass(frozen=True)
class ContingencyTable3:
    """Observed counts ``n_ijk`` of the (X, Y, Z) cross-classification."""

    counts: np.ndarray

    def __post_init__(self):
        arr = _as_counts(self.counts)
        if np.any(arr < 0):
            raise ValueError("counts must be nonnegative")
        if arr.sum() <= 0:
            raise ValueError("table is empty")
        arr.setflags(write=False)
        object.__setattr__(self, "counts", arr)

    @property
    def I(self) -> int:  # noqa: E743
        return self.counts.shape[0]

    @property
    def J(self) -> int:
        return self.counts.shape[1]

    @property
    def N(self) -> int:
        return int(self.counts.sum())

    @property
    def n_audited(self) -> int:
        """Size of the current audit sample (all units with Z = 1)."""
        return int(self.counts[:, :, 1].sum())

    @property
    def n_xy(self) -> np.ndarray:
        """``n_ij+``."""
        return self.counts.sum(axis=2)

    @property
    def n_yz(self) -> np.ndarray:
        """``n_+jk``, shape (J, 2)."""
        return self.counts.sum(axis=0)

    @property
    def n_y(self) -> np.ndarray:
        """``n_+j+``."""
        return self.counts.sum(axis=(0, 2))

    def adjusted(self, delta_plus, delta_minus) -> "AdjustedTable":
        return AdjustedTable(self, delta_plus, delta_minus)


@dataclass(frozen=True)
class AdjustedTable:
    """A base table with ``delta_plus`` units moved 0 -> 1 and
    ``delta_minus`` units moved 1 -> 0 in every (X, Y) stratum.

    The adjustments are reals because the solver works on the continuous
    relaxation; margins ``n_ij+`` are preserved by construction.
    """

    base: ContingencyTable3
    delta_plus: np.ndarray
    delta_minus: np.ndarray
    m: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        shape = self.base.counts.shape[:2]
        dp = np.broadcast_to(np.asarray(self.delta_plus, dtype=np.float64), shape).copy()
        dm = np.broadcast_to(np.asarray(self.delta_minus, dtype=np.float64), shape).copy()
        n = self.base.counts
        tol = NEG_SLACK
        if np.any(dp < -tol) or np.any(dm < -tol):
            raise ValueError("adjustments must be nonnegative")
        if np.any(dp > n[:, :, 0] + tol) or np.any(dm > n[:, :, 1] + tol):
            raise ValueError("adjustment exceeds the units available in a stratum")
        m = np.empty(n.shape, dtype=np.float64)
        m[:, :, 1] = n[:, :, 1] + dp - dm
        m[:, :, 0] = n[:, :, 0] - dp + dm
        for a in (dp, dm, m):
            a.setflags(write=False)
        object.__setattr__(self, "delta_plus", dp)
        object.__setattr__(self, "delta_minus", dm)
        object.__setattr__(self, "m", m)

    @property
    def counts(self) -> np.ndarray:
        return self.m


def _counts_of(table_or_counts) -> np.ndarray:
    if isinstance(table_or_counts, (ContingencyTable3, AdjustedTable)):
        return np.asarray(table_or_counts.counts, dtype=np.float64)
    arr = _as_counts(table_or_counts, integer=False)
    if np.any(arr < -NEG_SLACK):
        raise ValueError("counts must be nonnegative")
    return np.clip(arr, 0.0, None)


def fitted_counts(table) -> np.ndarray:
    """Fitted counts of the independence model, ``n_ij+ n_+jk / n_+j+``.

    Strata with ``n_+j+ = 0`` get fitted counts of 0.
    """
    n = _counts_of(table)
    n_xy = n.sum(axis=2)
    n_yz = n.sum(axis=0)
    n_y = n_yz.sum(axis=1)
    safe = np.where(n_y > 0, n_y, 1.0)
    fit = n_xy[:, :, None] * n_yz[None, :, :] / safe[None, :, None]
    fit[:, n_y == 0, :] = 0.0
    return fit


def constant_term(table) -> float:
    """The part of the deviance that depends only on the (X, Y) margins."""
    n = _counts_of(table)
    return float(2.0 * xlogx(n.sum(axis=(0, 2))).sum() - 2.0 * xlogx(n.sum(axis=2)).sum())


def variable_term(counts) -> float:
    """``2 sum m log m - 2 sum m_+jk log m_+jk``; add :func:`constant_term` for D."""
    m = np.asarray(counts, dtype=np.float64)
    return float(2.0 * xlogx(m).sum() - 2.0 * xlogx(m.sum(axis=0)).sum())


def deviance(table) -> float:
    """Likelihood-ratio deviance of (XY)(YZ) against the saturated model.

    Accepts a :class:`ContingencyTable3`, an :class:`AdjustedTable`, or a raw
    ``(I, J, 2)`` array of (possibly non-integer) counts.
    """
    n = _counts_of(table)
    d = constant_term(n) + variable_term(n)
    scale = max(1.0, float(xlogx(n).sum()))
    if d < -NEG_SLACK * scale:
        raise ArithmeticError(f"negative deviance {d!r}")
    # below the rounding noise of the log sums the model fits exactly
    return 0.0 if d <= ROUND_NOISE * scale else d


def deviance_from_fit(table) -> float:
    """Deviance evaluated as ``2 sum n log(n / fitted)`` (the direct form)."""
    n = _counts_of(table)
    fit = fitted_counts(n)
    pos = n > 0
    return float(max(0.0, 2.0 * np.sum(n[pos] * (np.log(n[pos]) - np.log(fit[pos])))))


def degrees_of_freedom(table) -> int:
    """``J * (I - 1)``, the reference chi-square degrees of freedom."""
    n = _counts_of(table)
    return n.shape[1] * (n.shape[0] - 1)
