"""Stratified estimates of the true-category distribution and of the
misclassification probabilities from an audited sample.

The audit sample is treated as a stratified simple random sample with the
background variable Y as the stratifier and known population shares
``P_y``.  Finite population corrections are not applied.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

log = logging.getLogger(__name__)


class EmptyStratumError(ValueError):
    def __init__(self, strata):
        self.strata = list(strata)
        super().__init__(f"no audited units in strata with positive population share: {self.strata}")


@dataclass(frozen=True)
class PopulationMargins:
    p_y: np.ndarray

    def __post_init__(self):
        p = np.asarray(self.p_y, dtype=np.float64)
        if p.ndim != 1 or p.size == 0:
            raise ValueError("p_y must be a nonempty vector")
        if np.any(p < 0):
            raise ValueError("p_y must be nonnegative")
        if abs(p.sum() - 1.0) > 1e-12:
            raise ValueError(f"p_y must sum to 1, got {p.sum()!r}")
        p.setflags(write=False)
        object.__setattr__(self, "p_y", p)

    @classmethod
    def from_counts(cls, counts):
        c = np.asarray(counts, dtype=np.float64)
        p = c / c.sum()
        p[-1] = 1.0 - p[:-1].sum()
        return cls(p)


@dataclass(frozen=True)
class AuditedData:
    """True category ``w``, observed category ``x`` and stratum ``y`` per
    audited unit, all 0-based."""

    w: np.ndarray
    x: np.ndarray
    y: np.ndarray
    n_w: int | None = None
    n_x: int | None = None

    def __post_init__(self):
        w, x, y = (np.asarray(a, dtype=np.int64) for a in (self.w, self.x, self.y))
        if not (w.shape == x.shape == y.shape) or w.ndim != 1:
            raise ValueError("w, x and y must be vectors of equal length")
        if w.size == 0:
            raise ValueError("audited data is empty")
        if min(w.min(), x.min(), y.min()) < 0:
            raise ValueError("category indices must be nonnegative")
        object.__setattr__(self, "w", w)
        object.__setattr__(self, "x", x)
        object.__setattr__(self, "y", y)
        object.__setattr__(self, "n_w", int(self.n_w if self.n_w is not None else w.max() + 1))
        object.__setattr__(self, "n_x", int(self.n_x if self.n_x is not None else x.max() + 1))

    def __len__(self):
        return self.w.size


def _stratum_props(data: AuditedData, margins: PopulationMargins):
    """Per-stratum sizes, ``p_{w|y}`` (H, J) and ``p_{wx|y}`` (H, I, J)."""
    J = margins.p_y.size
    if data.y.max() >= J:
        raise ValueError(f"stratum index {int(data.y.max())} outside the {J} population margins")
    H, I = data.n_w, data.n_x
    n_y = np.bincount(data.y, minlength=J).astype(np.float64)
    empty = [int(j) for j in np.flatnonzero((n_y == 0) & (margins.p_y > 0))]
    if empty:
        raise EmptyStratumError(empty)
    safe = np.where(n_y > 0, n_y, 1.0)
    c_wy = np.bincount(data.w * J + data.y, minlength=H * J).reshape(H, J)
    c_wxy = np.bincount((data.w * I + data.x) * J + data.y, minlength=H * I * J).reshape(H, I, J)
    return n_y, c_wy / safe, c_wxy / safe


def estimate_pw(data: AuditedData, margins: PopulationMargins) -> np.ndarray:
    """``sum_y P_y p_{w|y}`` for every true category w."""
    _, p_wy, _ = _stratum_props(data, margins)
    return p_wy @ margins.p_y


def estimate_px_given_w(data: AuditedData, margins: PopulationMargins) -> np.ndarray:
    """Combined ratio estimate of ``P(X = x | W = w)``, shape ``(I, H)``.

    Columns for a w with an estimated share of 0 are NaN.
    """
    _, p_wy, p_wxy = _stratum_props(data, margins)
    num = p_wxy @ margins.p_y  # (H, I)
    den = p_wy @ margins.p_y
    with np.errstate(divide="ignore", invalid="ignore"):
        r = np.where(den[:, None] > 0, num / den[:, None], np.nan)
    return r.T


def variance_pw(data: AuditedData, margins: PopulationMargins) -> np.ndarray:
    n_y, p_wy, _ = _stratum_props(data, margins)
    wts = np.where(n_y > 0, margins.p_y ** 2 / np.where(n_y > 0, n_y, 1.0), 0.0)
    return (p_wy * (1.0 - p_wy)) @ wts


def variance_px_given_w(data: AuditedData, margins: PopulationMargins) -> np.ndarray:
    """Linearized variance of the combined ratio estimator, shape ``(I, H)``."""
    n_y, p_wy, p_wxy = _stratum_props(data, margins)
    wts = np.where(n_y > 0, margins.p_y ** 2 / np.where(n_y > 0, n_y, 1.0), 0.0)
    pw = p_wy @ margins.p_y
    with np.errstate(divide="ignore", invalid="ignore"):
        r = np.where(pw[:, None] > 0, (p_wxy @ margins.p_y) / pw[:, None], np.nan)  # (H, I)
    a = p_wxy  # (H, I, J)
    b = p_wy[:, None, :]
    rr = r[:, :, None]
    inner = a * (1.0 - a) + rr ** 2 * b * (1.0 - b) - 2.0 * rr * a * (1.0 - b)
    with np.errstate(divide="ignore", invalid="ignore"):
        v = (inner @ wts) / pw[:, None] ** 2
    neg = v < 0
    if np.any(neg):
        worst = float(v[neg].min())
        if worst < -1e-12:
            raise ArithmeticError(f"ratio variance is negative ({worst!r})")
        log.debug("clamped %d tiny negative ratio variances (min %g)", int(neg.sum()), worst)
        v = np.where(neg, 0.0, v)
    return v.T


@dataclass(frozen=True)
class EstimateReport:
    p_w: np.ndarray
    se_w: np.ndarray
    p_x_given_w: np.ndarray
    se_x_given_w: np.ndarray
    n_y: np.ndarray
    empty_strata: tuple = ()
    small_strata: tuple = ()
    labels: dict = field(default_factory=dict)

    def rows(self):
        """Flat records for CSV output."""
        wl = self.labels.get("w") or [str(k) for k in range(self.p_w.size)]
        xl = self.labels.get("x") or [str(k) for k in range(self.p_x_given_w.shape[0])]
        out = []
        for h, lab in enumerate(wl):
            out.append({"parameter": "P_W", "w": lab, "x": "",
                        "estimate": self.p_w[h], "se": self.se_w[h]})
        for h, wlab in enumerate(wl):
            for i, xlab in enumerate(xl):
                out.append({"parameter": "P_X_given_W", "w": wlab, "x": xlab,
                            "estimate": self.p_x_given_w[i, h], "se": self.se_x_given_w[i, h]})
        return out


def estimate(data: AuditedData, margins: PopulationMargins, labels=None) -> EstimateReport:
    n_y, _, _ = _stratum_props(data, margins)
    pxw = estimate_px_given_w(data, margins)
    vxw = variance_px_given_w(data, margins)
    empty = tuple(int(j) for j in np.flatnonzero(n_y == 0))
    small = tuple(int(j) for j in np.flatnonzero(n_y == 1))
    return EstimateReport(
        p_w=estimate_pw(data, margins),
        se_w=np.sqrt(variance_pw(data, margins)),
        p_x_given_w=pxw,
        se_x_given_w=np.sqrt(vxw),
        n_y=n_y.astype(np.int64),
        empty_strata=empty,
        small_strata=small,
        labels=dict(labels or {}),
    )
