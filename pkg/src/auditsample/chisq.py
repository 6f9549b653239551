"""Chi-square CDF and quantiles from the regularized incomplete gamma function."""

from __future__ import annotations

import math

from scipy.special import gammainc, gammaincc, ndtri


def regularized_gamma_p(a: float, x: float) -> float:
    """Lower regularized incomplete gamma ``P(a, x)``."""
    if a <= 0:
        raise ValueError("a must be positive")
    if x < 0:
        raise ValueError("x must be nonnegative")
    if x == 0:
        return 0.0
    return float(gammainc(a, x))


def regularized_gamma_q(a: float, x: float) -> float:
    """Upper regularized incomplete gamma ``Q(a, x) = 1 - P(a, x)``."""
    if a <= 0:
        raise ValueError("a must be positive")
    if x < 0:
        raise ValueError("x must be nonnegative")
    if x == 0:
        return 1.0
    return float(gammaincc(a, x))


def chi2_cdf(x: float, df: float) -> float:
    if x <= 0:
        return 0.0
    return regularized_gamma_p(df / 2.0, x / 2.0)


def chi2_sf(x: float, df: float) -> float:
    if x <= 0:
        return 1.0
    return regularized_gamma_q(df / 2.0, x / 2.0)


def chi2_pdf(x: float, df: float) -> float:
    if x <= 0:
        return 0.0
    k = df / 2.0
    return math.exp((k - 1.0) * math.log(x) - x / 2.0 - k * math.log(2.0) - math.lgamma(k))


def chi2_quantile(p: float, df: float, tol: float = 1e-10) -> float:
    """Invert :func:`chi2_cdf` for probability ``p``.

    Starts from the Wilson-Hilferty approximation, then alternates Newton
    steps with bisection inside a maintained bracket.
    """
    if not 0.0 < p < 1.0:
        raise ValueError("p must lie in (0, 1)")
    if df <= 0:
        raise ValueError("df must be positive")

    # Wilson-Hilferty start
    z = float(ndtri(p))
    h = 2.0 / (9.0 * df)
    x = df * max(1.0 - h + z * math.sqrt(h), 0.01) ** 3

    lo, hi = 0.0, max(2.0 * x, df + 10.0 * math.sqrt(2.0 * df) + 10.0)
    while chi2_cdf(hi, df) < p:
        lo, hi = hi, 2.0 * hi

    upper = p > 0.5
    for _ in range(200):
        # work on the tail that keeps precision
        f = (1.0 - p - chi2_sf(x, df)) if upper else (chi2_cdf(x, df) - p)
        if f < 0:
            lo = max(lo, x)
        else:
            hi = min(hi, x)
        dens = chi2_pdf(x, df)
        step_ok = False
        if dens > 0:
            nxt = x - f / dens
            if lo < nxt < hi:
                step_ok = True
        if not step_ok:
            nxt = 0.5 * (lo + hi)
        if abs(nxt - x) <= tol * max(1.0, abs(x)):
            return nxt
        x = nxt
    return x


def chi_square_cutoff(df: int, alpha: float) -> float:
    """The ``(1 - alpha)`` quantile of a chi-square with ``df`` degrees of freedom.

    A table whose deviance does not exceed this value is accepted as
    representative.
    """
    if not 0.0 < alpha < 1.0:
        raise ValueError(f"alpha must lie in (0, 1), got {alpha!r}")
    if int(df) != df or df < 1:
        raise ValueError(f"df must be a positive integer, got {df!r}")
    return chi2_quantile(1.0 - alpha, float(df))
