"""Maximum-likelihood estimation of Matern parameters from one zero-mean
field realization, with the variance profiled out analytically.

The range (and optionally the smoothness) is optimized by Nelder-Mead in log
space from three fixed starting points, which keeps fits deterministic.  An
optional factor cache quantizes the search coordinates and memoizes Cholesky
factors of the correlation matrix, which pays off when many samples on the
same grid are fitted in sequence.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.linalg import solve_triangular
from scipy.optimize import minimize

from .grf import FactorizationError, GridSpec, MaternParams, _cholesky_with_jitter, _distance_info, matern_correlation

__all__ = [
    "FIT_COUNTER",
    "FactorCache",
    "FitResult",
    "fit",
    "log_likelihood",
    "profile_sigma2",
]

_NU_BOUNDS = (0.1, 5.0)
_LOG2PI = math.log(2.0 * math.pi)


class _CallCounter:
    """Counts fit() invocations; lets harnesses assert MLE was never used."""

    def __init__(self) -> None:
        self.count = 0

    def increment(self) -> None:
        self.count += 1

    def reset(self) -> None:
        self.count = 0


FIT_COUNTER = _CallCounter()


@dataclass
class FitResult:
    params: MaternParams
    log_likelihood: float
    iterations: int
    converged: bool


def _corr_cholesky(grid: GridSpec, beta: float, nu: float):
    """Lower Cholesky factor of the correlation matrix and its log-determinant.

    Returns (None, 0.0) when the matrix is numerically the identity (beta zero
    or so small that every off-diagonal correlation underflows), so callers
    can skip the factorization and the triangular solve.
    """
    m = grid.size
    if beta == 0.0:
        return None, 0.0
    uniq, inverse = _distance_info(grid)
    corr = matern_correlation(nu, uniq / beta)
    if uniq[0] == 0.0 and corr.size > 1 and float(corr[1:].max()) < 1e-16:
        return None, 0.0
    mat = corr[inverse].reshape(m, m)
    chol = _cholesky_with_jitter(mat, 1.0)
    return chol, float(np.sum(np.log(np.diag(chol))))


def _whiten(chol, y: np.ndarray) -> np.ndarray:
    return y if chol is None else solve_triangular(chol, y, lower=True)


class FactorCache:
    """LRU cache of correlation-matrix Cholesky factors keyed by quantized
    (log beta, nu); capacity is capped in bytes.

    Quantization trades a sub-percent perturbation of the search coordinates
    for factor reuse across fits on the same grid; the smoothness step can be
    coarse because downstream use snaps it to a half-integer bank anyway.
    """

    def __init__(
        self,
        grid: GridSpec,
        beta_step: float = 2e-3,
        nu_step: float = 0.02,
        max_bytes: int = 1_000_000_000,
    ):
        self.grid = grid
        self.beta_step = beta_step
        self.nu_step = nu_step
        self.max_bytes = max_bytes
        self._store: dict = {}
        self._order: list = []
        self._bytes = 0

    def quantize_beta(self, beta: float) -> float:
        if beta <= 0.0:
            return beta
        return math.exp(round(math.log(beta) / self.beta_step) * self.beta_step)

    def quantize_nu(self, nu: float) -> float:
        return round(nu / self.nu_step) * self.nu_step

    def get(self, beta: float, nu: float) -> tuple[np.ndarray, float]:
        key = (
            round(math.log(beta) / self.beta_step) if beta > 0.0 else None,
            round(nu / self.nu_step),
        )
        hit = self._store.get(key)
        if hit is not None:
            return hit
        chol, logdet = _corr_cholesky(self.grid, beta, nu)
        self._store[key] = (chol, logdet)
        self._order.append(key)
        self._bytes += 0 if chol is None else chol.nbytes
        while self._bytes > self.max_bytes and len(self._order) > 1:
            old = self._order.pop(0)
            evicted = self._store.pop(old)[0]
            self._bytes -= 0 if evicted is None else evicted.nbytes
        return chol, logdet


def log_likelihood(grid: GridSpec, params: MaternParams, values) -> float:
    """Zero-mean Gaussian log-likelihood via Cholesky; -inf if factorization fails."""
    y = np.asarray(values, dtype=float)
    if y.shape != (grid.size,):
        raise ValueError("values length must match the grid size")
    try:
        chol, logdet_r = _corr_cholesky(grid, params.beta, params.nu)
    except FactorizationError:
        return -math.inf
    m = grid.size
    z = _whiten(chol, y)
    quad = float(z @ z) / params.sigma2
    logdet = m * math.log(params.sigma2) + 2.0 * logdet_r
    return -0.5 * (quad + logdet + m * _LOG2PI)


def profile_sigma2(grid: GridSpec, beta: float, nu: float, values) -> float:
    """Closed-form variance maximizer y' R^{-1} y / M for fixed (beta, nu)."""
    y = np.asarray(values, dtype=float)
    chol, _ = _corr_cholesky(grid, beta, nu)
    z = _whiten(chol, y)
    return float(z @ z) / grid.size


def _profiled_negloglik(grid, y, beta, nu, cache: FactorCache | None):
    m = grid.size
    try:
        if cache is not None:
            chol, logdet_r = cache.get(beta, nu)
        else:
            chol, logdet_r = _corr_cholesky(grid, beta, nu)
    except FactorizationError:
        return math.inf, 0.0
    z = _whiten(chol, y)
    sigma2 = float(z @ z) / m
    if not sigma2 > 0.0 or not math.isfinite(sigma2):
        return math.inf, 0.0
    ll = -0.5 * m * (math.log(sigma2) + 1.0 + _LOG2PI) - logdet_r
    return -ll, sigma2


def fit(
    grid: GridSpec,
    values,
    nu: float | None,
    nu_bounds: tuple = _NU_BOUNDS,
    cache: FactorCache | None = None,
) -> FitResult:
    """Maximize the profiled likelihood over beta (and nu when nu is None).

    Search runs in log space with bounds enforced by clamping: beta within
    [1e-6, 2] times the grid diameter, nu within nu_bounds.  Three fixed
    restarts guard against local optima; convergence means the best restart's
    simplex collapsed below 1e-6 in the objective.
    """
    FIT_COUNTER.increment()
    y = np.asarray(values, dtype=float)
    if y.shape != (grid.size,):
        raise ValueError("values length must match the grid size")
    if grid.size < 25:
        raise ValueError(f"need at least 25 sites to fit, got {grid.size}")
    diam = grid.diameter
    beta_lo, beta_hi = 1e-6 * diam, 2.0 * diam
    free_nu = nu is None

    def clamp_params(x) -> tuple[float, float]:
        beta = min(max(math.exp(x[0]), beta_lo), beta_hi)
        if free_nu:
            nu_val = min(max(math.exp(x[1]), nu_bounds[0]), nu_bounds[1])
        else:
            nu_val = nu
        if cache is not None:
            beta = cache.quantize_beta(beta)
            nu_val = min(max(cache.quantize_nu(nu_val), nu_bounds[0]), nu_bounds[1])
        return beta, nu_val

    def objective(x) -> float:
        beta, nu_val = clamp_params(x)
        return _profiled_negloglik(grid, y, beta, nu_val, cache)[0]

    beta_inits = [0.02 * diam, 0.1 * diam, 0.4 * diam]
    nu_inits = [0.5, 1.0, 2.5]
    starts = []
    for i, b0 in enumerate(beta_inits):
        if free_nu:
            starts.append([math.log(b0), math.log(nu_inits[i])])
        else:
            starts.append([math.log(b0)])

    best = None
    converged = False
    iterations = 0
    for x0 in starts:
        res = minimize(
            objective,
            np.array(x0),
            method="Nelder-Mead",
            options={"xatol": 1e-3, "fatol": 1e-6, "maxiter": 400, "maxfev": 400},
        )
        iterations += int(res.nit)
        if math.isfinite(res.fun) and (best is None or res.fun < best.fun):
            best = res
            converged = bool(res.success)

    if best is None or not math.isfinite(best.fun):
        fallback = MaternParams(max(float(y @ y) / grid.size, 1e-300), beta_lo, nu if nu is not None else 0.5)
        return FitResult(fallback, -math.inf, iterations, False)

    beta_hat, nu_hat = clamp_params(best.x)
    negll, sigma2_hat = _profiled_negloglik(grid, y, beta_hat, nu_hat, cache)
    params = MaternParams(sigma2_hat, beta_hat, nu_hat)
    return FitResult(params, -negll, iterations, converged)
