"""The classifier input statistics: Shapiro-Wilk, Lilliefors, Anderson-Darling,
Jarque-Bera, and the sample skewness and kurtosis, plus Monte Carlo critical
values for using the four classical tests directly on i.i.d. data.
"""

from __future__ import annotations

import csv
import functools
import math
import os
from dataclasses import dataclass

import numpy as np

from .numerics import std_normal_cdf, std_normal_quantile

__all__ = [
    "CriticalValues",
    "FeatureVector",
    "SHAPIRO_WILK_MAX_N",
    "anderson_darling",
    "classical_critical_values",
    "classical_rejections",
    "features",
    "features_matrix",
    "jarque_bera",
    "lilliefors",
    "shapiro_wilk",
    "skewness_kurtosis",
]

SHAPIRO_WILK_MAX_N = 5000

FEATURE_NAMES = (
    "shapiro_wilk",
    "lilliefors",
    "anderson_darling",
    "jarque_bera",
    "skewness",
    "kurtosis",
)

# statistics for which small values (not large) indicate non-normality
LOWER_TAIL_STATS = frozenset({"shapiro_wilk"})


class ZeroVarianceError(ValueError):
    """Raised when a statistic is requested for (near-)constant data."""


def _check_variance(values: np.ndarray) -> None:
    if values.size < 2 or np.ptp(values) == 0.0 or np.var(values) == 0.0:
        raise ZeroVarianceError("sample variance is zero; statistics are undefined")


def skewness_kurtosis(values) -> tuple[float, float]:
    """Sample skewness m3/m2^(3/2) and kurtosis m4/m2^2 (1/M central moments)."""
    y = np.asarray(values, dtype=float)
    if y.size < 3:
        raise ValueError("need at least 3 observations")
    _check_variance(y)
    d = y - y.mean()
    m2 = np.mean(d * d)
    m3 = np.mean(d**3)
    m4 = np.mean(d**4)
    return float(m3 / m2**1.5), float(m4 / (m2 * m2))


def jarque_bera(values) -> float:
    """JB = (M/6)(S^2 + (K-3)^2/4); zero exactly when S=0 and K=3."""
    y = np.asarray(values, dtype=float)
    s, k = skewness_kurtosis(y)
    return float(len(y) / 6.0 * (s * s + 0.25 * (k - 3.0) ** 2))


def _standardized_order_cdf(values: np.ndarray) -> np.ndarray:
    # Phi of the order statistics standardized by mean and (M-1)-denominator sd
    sd = values.std(ddof=1)
    if sd == 0.0:
        raise ZeroVarianceError("sample variance is zero; statistics are undefined")
    z = np.sort((values - values.mean()) / sd)
    return std_normal_cdf(z)


def lilliefors(values) -> float:
    """Max deviation between the empirical CDF and the fitted normal CDF."""
    y = np.asarray(values, dtype=float)
    if y.size < 2:
        raise ValueError("need at least 2 observations")
    u = _standardized_order_cdf(y)
    m = y.size
    i = np.arange(1, m + 1)
    return float(max(np.max(i / m - u), np.max(u - (i - 1) / m)))


def anderson_darling(values) -> float:
    """Tail-weighted CDF discrepancy for the fitted normal, summation form."""
    y = np.asarray(values, dtype=float)
    if y.size < 2:
        raise ValueError("need at least 2 observations")
    u = np.clip(_standardized_order_cdf(y), 1e-300, 1.0 - 1e-16)
    m = y.size
    i = np.arange(1, m + 1)
    s = np.sum((2 * i - 1) * (np.log(u) + np.log1p(-u[::-1])))
    return float(-m - s / m)


@functools.lru_cache(maxsize=64)
def _royston_weights(n: int) -> np.ndarray:
    """Royston's polynomial approximation to the expected-order-statistic
    weights: Blom scores normalized, with corrections to the two tail weights.
    """
    mm = np.array([std_normal_quantile((i - 0.375) / (n + 0.25)) for i in range(1, n + 1)])
    ssq = float(mm @ mm)
    c = mm / math.sqrt(ssq)
    u = 1.0 / math.sqrt(n)
    a = np.empty(n)
    if n == 3:
        a[:] = 0.0
        a[2] = math.sqrt(0.5)
        a[0] = -a[2]
        return a
    poly_n = np.array([-2.706056, 4.434685, -2.071190, -0.147981, 0.221157, 0.0])
    an = float(np.polyval(poly_n, u)) + c[-1]
    if n > 5:
        poly_n1 = np.array([-3.582633, 5.682633, -1.752461, -0.293762, 0.042981, 0.0])
        an1 = float(np.polyval(poly_n1, u)) + c[-2]
        phi = (ssq - 2.0 * mm[-1] ** 2 - 2.0 * mm[-2] ** 2) / (1.0 - 2.0 * an**2 - 2.0 * an1**2)
        a[:] = mm / math.sqrt(phi)
        a[-1], a[-2] = an, an1
        a[0], a[1] = -an, -an1
    else:
        phi = (ssq - 2.0 * mm[-1] ** 2) / (1.0 - 2.0 * an**2)
        a[:] = mm / math.sqrt(phi)
        a[-1] = an
        a[0] = -an
    return a


def shapiro_wilk(values) -> float | None:
    """W statistic in (0, 1]; None when the sample exceeds the supported size."""
    y = np.asarray(values, dtype=float)
    n = y.size
    if n < 3:
        raise ValueError("need at least 3 observations")
    if n > SHAPIRO_WILK_MAX_N:
        return None
    _check_variance(y)
    ys = np.sort(y)
    a = _royston_weights(n)
    num = float(a @ ys) ** 2
    den = float(np.sum((y - y.mean()) ** 2))
    return float(min(num / den, 1.0))


@dataclass(frozen=True)
class FeatureVector:
    """The classifier inputs for one sample; shapiro_wilk may be absent."""

    shapiro_wilk: float | None
    lilliefors: float
    anderson_darling: float
    jarque_bera: float
    skewness: float
    kurtosis: float

    @property
    def m(self) -> int:
        return 5 if self.shapiro_wilk is None else 6

    @property
    def names(self) -> tuple[str, ...]:
        if self.shapiro_wilk is None:
            return FEATURE_NAMES[1:]
        return FEATURE_NAMES

    def to_array(self) -> np.ndarray:
        vals = [getattr(self, name) for name in self.names]
        return np.array(vals, dtype=float)


def features(values) -> FeatureVector:
    """All classifier input statistics for one sample (length >= 8)."""
    y = np.asarray(values, dtype=float)
    if y.size < 8:
        raise ValueError("need at least 8 observations for the feature vector")
    s, k = skewness_kurtosis(y)
    return FeatureVector(
        shapiro_wilk=shapiro_wilk(y),
        lilliefors=lilliefors(y),
        anderson_darling=anderson_darling(y),
        jarque_bera=jarque_bera(y),
        skewness=s,
        kurtosis=k,
    )


def features_matrix(value_rows) -> tuple[np.ndarray, tuple[str, ...]]:
    """Stack feature vectors for an iterable of samples into an (N, m) array."""
    fvs = [features(v) for v in value_rows]
    if not fvs:
        raise ValueError("no samples given")
    names = fvs[0].names
    if any(fv.names != names for fv in fvs):
        raise ValueError("samples disagree on feature availability")
    return np.stack([fv.to_array() for fv in fvs]), names


# ---------------------------------------------------------------------------
# Monte Carlo critical values for the classical i.i.d. tests
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class CriticalValues:
    """Empirical critical values of the four classical tests under i.i.d.
    normal data of a fixed sample size."""

    sample_size: int
    alpha: float
    n_null: int
    seed: int
    values: dict  # statistic name -> critical value

    def reject(self, name: str, stat: float) -> bool:
        crit = self.values[name]
        if name in LOWER_TAIL_STATS:
            return stat < crit
        return stat > crit


_CLASSICAL = ("shapiro_wilk", "lilliefors", "anderson_darling", "jarque_bera")


def _cache_path(cache_dir, sample_size: int, alpha: float, n_null: int, seed: int) -> str:
    fname = f"critvals_M{sample_size}_a{alpha:g}_n{n_null}_s{seed}.csv"
    return os.path.join(cache_dir, fname)


def classical_critical_values(
    sample_size: int,
    alpha: float,
    n_null: int,
    seed: int,
    cache_dir: str | None = None,
) -> CriticalValues:
    """Calibrate each classical test at level alpha by simulation under H0.

    For upper-tail statistics the critical value is the ceil(n(1-alpha))-th
    order statistic over n_null i.i.d. N(0,1) samples; for Shapiro-Wilk, which
    rejects for small W, it is the lower-tail counterpart.
    """
    if n_null < 1000:
        raise ValueError("n_null must be at least 1000 for a usable calibration")
    if cache_dir is not None:
        path = _cache_path(cache_dir, sample_size, alpha, n_null, seed)
        if os.path.exists(path):
            return _read_critical_values(path, sample_size, alpha, n_null, seed)

    rng = np.random.default_rng(np.random.SeedSequence((seed, sample_size, n_null)))
    use_sw = sample_size <= SHAPIRO_WILK_MAX_N
    names = _CLASSICAL if use_sw else _CLASSICAL[1:]
    stats = {name: np.empty(n_null) for name in names}
    for r in range(n_null):
        y = rng.standard_normal(sample_size)
        if use_sw:
            stats["shapiro_wilk"][r] = shapiro_wilk(y)
        stats["lilliefors"][r] = lilliefors(y)
        stats["anderson_darling"][r] = anderson_darling(y)
        stats["jarque_bera"][r] = jarque_bera(y)

    values = {}
    k_hi = math.ceil(n_null * (1.0 - alpha))
    k_lo = max(1, math.floor(n_null * alpha))
    for name, arr in stats.items():
        arr = np.sort(arr)
        values[name] = float(arr[k_lo - 1] if name in LOWER_TAIL_STATS else arr[k_hi - 1])

    out = CriticalValues(sample_size, alpha, n_null, seed, values)
    if cache_dir is not None:
        os.makedirs(cache_dir, exist_ok=True)
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(["statistic", "M", "alpha", "n_null", "seed", "value"])
            for name in sorted(values):
                writer.writerow([name, sample_size, repr(alpha), n_null, seed, repr(values[name])])
    return out


def _read_critical_values(path, sample_size, alpha, n_null, seed) -> CriticalValues:
    values = {}
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            if (
                int(row["M"]) != sample_size
                or float(row["alpha"]) != alpha
                or int(row["n_null"]) != n_null
                or int(row["seed"]) != seed
            ):
                raise ValueError(f"critical-value cache {path} does not match its key")
            values[row["statistic"]] = float(row["value"])
    return CriticalValues(sample_size, alpha, n_null, seed, values)


def classical_rejections(fv: FeatureVector, crit: CriticalValues) -> dict:
    """Reject/retain decision of each calibrated classical test for one sample."""
    out = {}
    for name in crit.values:
        stat = getattr(fv, name)
        if stat is None:
            continue
        out[name] = crit.reject(name, stat)
    return out
