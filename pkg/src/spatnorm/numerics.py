"""Scalar special functions shared by the covariance and testing modules.

Provides the modified Bessel function of the second kind K_nu (needed by the
Matern covariance), the standard normal CDF, and quantiles of the standard
normal and chi-squared distributions.  Everything here is pure and stateless.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.special import ndtr

__all__ = [
    "QuantileRequest",
    "bessel_k",
    "bessel_k_vec",
    "chi2_cdf",
    "chi2_quantile",
    "quantile",
    "std_normal_cdf",
    "std_normal_quantile",
]

_EULER = 0.5772156649015329
# Taylor coefficients a_k of 1/Gamma(1+z) = 1 + a1 z + a2 z^2 + ...
_A1 = _EULER
_A3 = -0.0420026350340952
_A5 = -0.0421977345555443

_SERIES_EPS = 1e-16
_MAX_ITER = 500


def _gam1(mu: float) -> float:
    # (1/Gamma(1-mu) - 1/Gamma(1+mu)) / (2 mu), stable through mu -> 0
    if abs(mu) < 1e-3:
        mu2 = mu * mu
        return -(_A1 + _A3 * mu2 + _A5 * mu2 * mu2)
    return (1.0 / math.gamma(1.0 - mu) - 1.0 / math.gamma(1.0 + mu)) / (2.0 * mu)


def _gam2(mu: float) -> float:
    return 0.5 * (1.0 / math.gamma(1.0 - mu) + 1.0 / math.gamma(1.0 + mu))


def _kv_half_integer(n: int, x: np.ndarray) -> np.ndarray:
    # K_{n+1/2}(x) = sqrt(pi/(2x)) e^{-x} sum_k (n+k)!/(k!(n-k)!) (2x)^{-k}
    acc = np.ones_like(x)
    coef = 1.0
    inv2x = 0.5 / x
    term = np.ones_like(x)
    for k in range(n):
        coef *= (n + k + 1) * (n - k) / (k + 1)
        term = term * inv2x
        acc = acc + coef * term
    return np.sqrt(np.pi / (2.0 * x)) * np.exp(-x) * acc


def _kv_temme(mu: float, x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    # Temme's series for K_mu and K_{mu+1}, |mu| <= 1/2, 0 < x <= 2.
    x2 = 0.5 * x
    pimu = math.pi * mu
    fact = pimu / math.sin(pimu) if abs(pimu) > 1e-15 else 1.0
    d = -np.log(x2)
    e = mu * d
    small_e = np.abs(e) < 1e-8
    safe_e = np.where(small_e, 1.0, e)
    fact2 = np.where(small_e, 1.0 + e * e / 6.0, np.sinh(safe_e) / safe_e)
    ff = fact * (_gam1(mu) * np.cosh(e) + _gam2(mu) * fact2 * d)
    total = ff.copy()
    ee = np.exp(e)
    p = 0.5 * ee * math.gamma(1.0 + mu)
    q = 0.5 / ee * math.gamma(1.0 - mu)
    c = np.ones_like(x)
    d2 = x2 * x2
    total1 = p.copy()
    mu2 = mu * mu
    for i in range(1, _MAX_ITER):
        ff = (i * ff + p + q) / (i * i - mu2)
        c = c * d2 / i
        p = p / (i - mu)
        q = q / (i + mu)
        delta = c * ff
        total = total + delta
        total1 = total1 + c * (p - i * ff)
        if np.all(np.abs(delta) < np.abs(total) * _SERIES_EPS):
            break
    return total, total1 * (2.0 / x)


def _kv_cf2(mu: float, x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    # Steed's continued fraction for K_mu and K_{mu+1}, |mu| <= 1/2, x >= 2.
    b = 2.0 * (1.0 + x)
    d = 1.0 / b
    h = d.copy()
    delh = d.copy()
    q1 = np.zeros_like(x)
    q2 = np.ones_like(x)
    a1 = 0.25 - mu * mu
    q = np.full_like(x, a1)
    c = np.full_like(x, a1)
    a = -a1
    s = 1.0 + q * delh
    for i in range(2, _MAX_ITER):
        a -= 2.0 * (i - 1)
        c = -a * c / i
        qnew = (q1 - b * q2) / a
        q1, q2 = q2, qnew
        q = q + c * qnew
        b = b + 2.0
        d = 1.0 / (b + a * d)
        delh = (b * d - 1.0) * delh
        h = h + delh
        dels = q * delh
        s = s + dels
        if np.all(np.abs(dels / s) < _SERIES_EPS):
            break
    h = a1 * h
    kmu = np.sqrt(np.pi / (2.0 * x)) * np.exp(-x) / s
    k1 = kmu * (mu + x + 0.5 - h) / x
    return kmu, k1


def bessel_k_vec(order: float, x: np.ndarray) -> np.ndarray:
    """K_order evaluated elementwise on a strictly positive array."""
    x = np.asarray(x, dtype=float)
    if order <= 0.0:
        raise ValueError(f"bessel_k order must be positive, got {order}")
    if np.any(x <= 0.0):
        raise ValueError("bessel_k requires x > 0")
    if np.any(x < 1e-300):
        raise OverflowError("bessel_k overflows for x < 1e-300")

    n_half = int(round(order - 0.5))
    if n_half >= 0 and abs(order - (n_half + 0.5)) < 1e-12:
        return _kv_half_integer(n_half, x)

    nl = int(order + 0.5)
    mu = order - nl  # in [-0.5, 0.5]
    out_lo = np.empty_like(x)
    out_hi = np.empty_like(x)
    small = x < 2.0
    if small.any():
        out_lo[small], out_hi[small] = _kv_temme(mu, x[small])
    if (~small).any():
        out_lo[~small], out_hi[~small] = _kv_cf2(mu, x[~small])
    # upward recurrence K_{m+1} = K_{m-1} + (2m/x) K_m (stable for K)
    km, kp = out_lo, out_hi
    m = mu + 1.0
    for _ in range(nl):
        km, kp = kp, km + (2.0 * m / x) * kp
        m += 1.0
    return km


def bessel_k(order: float, x: float) -> float:
    """Modified Bessel function of the second kind, K_order(x)."""
    if x <= 0.0:
        raise ValueError(f"bessel_k requires x > 0, got {x}")
    return float(bessel_k_vec(order, np.array([x]))[0])


def std_normal_cdf(z):
    """Standard normal CDF; accepts a scalar or an ndarray."""
    if np.isscalar(z):
        return float(ndtr(z))
    return ndtr(np.asarray(z, dtype=float))


def _regularized_gamma_p(a: float, x: float) -> float:
    # P(a, x), lower regularized incomplete gamma, by series / continued fraction
    if a <= 0.0:
        raise ValueError("shape parameter must be positive")
    if x < 0.0:
        raise ValueError("x must be nonnegative")
    if x == 0.0:
        return 0.0
    log_pref = -x + a * math.log(x) - math.lgamma(a)
    if x < a + 1.0:
        ap = a
        total = 1.0 / a
        delta = total
        for _ in range(_MAX_ITER):
            ap += 1.0
            delta *= x / ap
            total += delta
            if abs(delta) < abs(total) * _SERIES_EPS:
                break
        return total * math.exp(log_pref)
    tiny = 1e-300
    b = x + 1.0 - a
    c = 1.0 / tiny
    d = 1.0 / b
    h = d
    for i in range(1, _MAX_ITER):
        an = -i * (i - a)
        b += 2.0
        d = an * d + b
        if abs(d) < tiny:
            d = tiny
        c = b + an / c
        if abs(c) < tiny:
            c = tiny
        d = 1.0 / d
        delta = d * c
        h *= delta
        if abs(delta - 1.0) < _SERIES_EPS:
            break
    return 1.0 - math.exp(log_pref) * h


def chi2_cdf(df: int, x: float) -> float:
    """Chi-squared CDF with df degrees of freedom."""
    if df < 1:
        raise ValueError(f"df must be >= 1, got {df}")
    if x <= 0.0:
        return 0.0
    return _regularized_gamma_p(0.5 * df, 0.5 * x)


def _bisect(cdf, p: float, lo: float, hi: float) -> float:
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if mid == lo or mid == hi:
            break
        if cdf(mid) < p:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


def std_normal_quantile(p: float) -> float:
    """Inverse standard normal CDF on (0, 1)."""
    if not 0.0 < p < 1.0:
        raise ValueError(f"probability must lie in (0,1), got {p}")
    return _bisect(std_normal_cdf, p, -40.0, 40.0)


def chi2_quantile(df: int, p: float) -> float:
    """Inverse chi-squared CDF on (0, 1)."""
    if not 0.0 < p < 1.0:
        raise ValueError(f"probability must lie in (0,1), got {p}")
    hi = max(4.0 * df, 20.0)
    while chi2_cdf(df, hi) < p:
        hi *= 2.0
    return _bisect(lambda x: chi2_cdf(df, x), p, 0.0, hi)


@dataclass(frozen=True)
class QuantileRequest:
    """Quantile lookup request for the two supported null distributions."""

    distribution: str  # "standard_normal" | "chi_squared"
    probability: float
    df: int | None = None

    def __post_init__(self) -> None:
        if self.distribution not in ("standard_normal", "chi_squared"):
            raise ValueError(f"unsupported distribution {self.distribution!r}")
        if not 0.0 < self.probability < 1.0:
            raise ValueError(f"probability must lie in (0,1), got {self.probability}")
        if self.distribution == "chi_squared":
            if self.df is None or self.df < 1:
                raise ValueError("chi_squared requires df >= 1")


def quantile(req: QuantileRequest) -> float:
    """Quantile of the requested distribution at the requested probability."""
    if req.distribution == "standard_normal":
        return std_normal_quantile(req.probability)
    return chi2_quantile(req.df, req.probability)
