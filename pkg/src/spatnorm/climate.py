"""Application pipeline for gridded temperature-like series: month-of-year
standardization, per-location ARMA whitening, block spatial aggregation, and a
per-timepoint normality scan that routes each field through the classifier
trained at the nearest estimated smoothness.
"""

from __future__ import annotations

import csv
import math
import os
import struct
from dataclasses import dataclass, replace

import numpy as np
from scipy.optimize import minimize
from scipy.signal import lfilter

from . import mle
from . import mlp
from .cutoff import predict_cutoff
from .grf import GridSpec, MaternParams, beta_max, cholesky_cov, signed_power
from .normstats import features
from .study import StudyConfig, TrainedSuite, extract_features, generate_dataset, run_training

__all__ = [
    "BankSettings",
    "ClassifierBank",
    "GriddedSeries",
    "ResidualCube",
    "ScanResult",
    "aggregate",
    "aggregate_cube",
    "aggregated_grid",
    "arma_whiten",
    "deseasonalize",
    "read_gts",
    "read_series_csv",
    "run_normality_scan",
    "snap_nu",
    "synthetic_series",
    "train_bank",
    "whiten_series",
    "write_gts",
    "write_series_csv",
]


@dataclass(frozen=True)
class GriddedSeries:
    """Temperature-like series on a fixed grid: values[t, i] at month
    (start_month + t) mod 12."""

    grid: GridSpec
    start_month: int
    values: np.ndarray  # (T, M)

    def __post_init__(self) -> None:
        object.__setattr__(self, "values", np.asarray(self.values, dtype=float))
        if self.values.ndim != 2 or self.values.shape[1] != self.grid.size:
            raise ValueError("values must be (T, M) for the grid")
        if not 0 <= self.start_month < 12:
            raise ValueError("start_month must lie in 0..11")

    @property
    def t_len(self) -> int:
        return self.values.shape[0]


def _month_index(start_month: int, t_len: int) -> np.ndarray:
    return (start_month + np.arange(t_len)) % 12


def deseasonalize(series: GriddedSeries, divide_by_sd: bool = True):
    """Per-(location, month) means and variances, and standardized residuals.

    divide_by_sd=False divides by the variance instead of the standard
    deviation (the alternative scaling convention; see README).
    """
    t_len, m = series.values.shape
    if t_len < 24:
        raise ValueError("need at least 24 time points")
    months = _month_index(series.start_month, t_len)
    mu = np.zeros((12, m))
    var = np.zeros((12, m))
    for r in range(12):
        rows = series.values[months == r]
        if rows.shape[0] == 0:
            raise ValueError(f"month {r} never occurs in the series")
        mu[r] = rows.mean(axis=0)
        var[r] = ((rows - mu[r]) ** 2).mean(axis=0)
    if np.any(var <= 0.0):
        r, i = np.argwhere(var <= 0.0)[0]
        raise ValueError(f"zero monthly variance at location {i}, month {r}")
    denom = np.sqrt(var) if divide_by_sd else var
    eps = (series.values - mu[months]) / denom[months]
    return mu, var, eps


def _css_innovations(x: np.ndarray, psi: np.ndarray, theta: np.ndarray) -> np.ndarray:
    # e_t = x_t - sum psi_j x_{t-j} - sum theta_k e_{t-k}; zero pre-sample
    b = np.concatenate([[1.0], -psi])
    a = np.concatenate([[1.0], theta])
    return lfilter(b, a, x)


def _poly_roots_stable(coefs: np.ndarray) -> bool:
    # roots of 1 + c1 z + ... + ck z^k must lie outside the unit circle
    if coefs.size == 0:
        return True
    poly = np.concatenate([coefs[::-1], [1.0]])
    roots = np.roots(poly)
    return roots.size == 0 or np.min(np.abs(roots)) > 1.0 + 1e-6


def _fit_arma_css(x: np.ndarray, p: int, q: int):
    """CSS fit of ARMA(p, q); returns (sse, psi, theta) or None if unusable."""
    t_len = x.size
    if p == 0 and q == 0:
        return float(x @ x), np.empty(0), np.empty(0)
    if q == 0:
        lagged = np.zeros((t_len, p))
        for j in range(1, p + 1):
            lagged[j:, j - 1] = x[:-j]
        psi, *_ = np.linalg.lstsq(lagged, x, rcond=None)
        resid = x - lagged @ psi
        if not _poly_roots_stable(-psi):
            return None
        return float(resid @ resid), psi, np.empty(0)

    def objective(params):
        e = _css_innovations(x, params[:p], params[p:])
        sse = float(e @ e)
        return sse if math.isfinite(sse) else 1e300

    res = minimize(
        objective,
        np.zeros(p + q),
        method="Nelder-Mead",
        options={"xatol": 1e-4, "fatol": 1e-8, "maxiter": 200 * (p + q), "maxfev": 200 * (p + q)},
    )
    psi, theta = res.x[:p], res.x[p:]
    if not (_poly_roots_stable(-psi) and _poly_roots_stable(theta)):
        return None
    return float(res.fun), psi, theta


@dataclass
class ResidualCube:
    """Whitened residuals plus the per-location models that produced them."""

    residuals: np.ndarray  # (T, M)
    orders: np.ndarray  # (M, 2) selected (p, q)
    ar_coefs: list
    ma_coefs: list
    month_means: np.ndarray | None = None
    month_vars: np.ndarray | None = None
    start_month: int = 0
    grid: GridSpec | None = None


def arma_whiten(eps: np.ndarray, max_p: int = 3, max_q: int = 2) -> ResidualCube:
    """Per-location ARMA fit by conditional sum of squares with BIC order
    selection; residuals are the one-step-ahead innovations.

    Non-stationary or non-invertible candidates are dropped from the BIC race;
    if every candidate drops, the location falls back to white noise (0, 0).
    """
    eps = np.asarray(eps, dtype=float)
    t_len, m = eps.shape
    log_t = math.log(t_len)
    residuals = np.empty_like(eps)
    orders = np.zeros((m, 2), dtype=int)
    ar_coefs: list = []
    ma_coefs: list = []
    for i in range(m):
        x = eps[:, i]
        best = None
        for p in range(max_p + 1):
            for q in range(max_q + 1):
                fit_pq = _fit_arma_css(x, p, q)
                if fit_pq is None:
                    continue
                sse, psi, theta = fit_pq
                bic = t_len * math.log(max(sse, 1e-300) / t_len) + (p + q + 1) * log_t
                if best is None or bic < best[0] - 1e-12:
                    best = (bic, p, q, psi, theta)
        if best is None:
            best = (0.0, 0, 0, np.empty(0), np.empty(0))
        _, p, q, psi, theta = best
        orders[i] = (p, q)
        ar_coefs.append(psi)
        ma_coefs.append(theta)
        residuals[:, i] = _css_innovations(x, psi, theta) if (p or q) else x
    return ResidualCube(residuals, orders, ar_coefs, ma_coefs)


def whiten_series(
    series: GriddedSeries,
    max_p: int = 3,
    max_q: int = 2,
    divide_by_sd: bool = True,
) -> ResidualCube:
    """Deseasonalize then ARMA-whiten a gridded series."""
    mu, var, eps = deseasonalize(series, divide_by_sd=divide_by_sd)
    cube = arma_whiten(eps, max_p=max_p, max_q=max_q)
    return replace(
        cube,
        month_means=mu,
        month_vars=var,
        start_month=series.start_month,
        grid=series.grid,
    )


def aggregate(field: np.ndarray, rows: int, cols: int, block: int) -> np.ndarray:
    """Non-overlapping block means of one field, flattened row-major."""
    if block < 1:
        raise ValueError("block must be positive")
    if rows % block or cols % block:
        raise ValueError(f"block {block} does not divide grid {rows}x{cols}")
    f = np.asarray(field, dtype=float).reshape(rows, cols)
    out = f.reshape(rows // block, block, cols // block, block).mean(axis=(1, 3))
    return out.ravel()


def aggregate_cube(values: np.ndarray, rows: int, cols: int, block: int) -> np.ndarray:
    """Block means applied to every time slice of a (T, M) cube."""
    values = np.asarray(values, dtype=float)
    if block == 1:
        return values.copy()
    if rows % block or cols % block:
        raise ValueError(f"block {block} does not divide grid {rows}x{cols}")
    t_len = values.shape[0]
    v = values.reshape(t_len, rows // block, block, cols // block, block).mean(axis=(2, 4))
    return v.reshape(t_len, -1)


def aggregated_grid(grid: GridSpec, block: int) -> GridSpec:
    if grid.rows % block or grid.cols % block:
        raise ValueError(f"block {block} does not divide grid {grid.rows}x{grid.cols}")
    return GridSpec(grid.geometry, grid.rows // block, grid.cols // block, grid.radius_km)


def snap_nu(nu_hat: float, keys) -> float:
    """Nearest bank smoothness; ties resolve to the smaller key."""
    return float(min(sorted(keys), key=lambda k: abs(k - nu_hat)))


# ---------------------------------------------------------------------------
# classifier bank: one trained suite per (aggregation level, smoothness)
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class BankSettings:
    """Training scale for the classifier bank."""

    nu_values: tuple = (0.5, 1.0, 1.5, 2.0, 2.5, 3.0)
    n_beta: int = 30
    n_sample: int = 200
    p_train: tuple = (1.2, 1.4, 1.6, 1.8)
    alpha: float = 0.05
    network: mlp.NetworkConfig = mlp.NetworkConfig(layer_widths=(256, 128), dropout_rate=0.3)
    seed: int = 0


@dataclass
class ClassifierBank:
    """Suites keyed by aggregation block then smoothness."""

    suites: dict  # block -> {nu -> TrainedSuite}
    blocks: tuple
    nu_values: tuple

    def save(self, out_dir: str) -> None:
        os.makedirs(out_dir, exist_ok=True)
        with open(os.path.join(out_dir, "bank.txt"), "w") as fh:
            fh.write("blocks " + ",".join(str(b) for b in self.blocks) + "\n")
            fh.write("nu " + ",".join(repr(v) for v in self.nu_values) + "\n")
        for block, by_nu in self.suites.items():
            for nu, suite in by_nu.items():
                suite.save(os.path.join(out_dir, f"block_{block}", f"nu_{nu:g}"))

    @classmethod
    def load(cls, out_dir: str) -> "ClassifierBank":
        with open(os.path.join(out_dir, "bank.txt")) as fh:
            blocks = tuple(int(b) for b in fh.readline().split()[1].split(","))
            nus = tuple(float(v) for v in fh.readline().split()[1].split(","))
        suites: dict = {}
        for block in blocks:
            suites[block] = {
                nu: TrainedSuite.load(os.path.join(out_dir, f"block_{block}", f"nu_{nu:g}"))
                for nu in nus
            }
        return cls(suites, blocks, nus)


def _bank_study_config(grid: GridSpec, nu: float, settings: BankSettings, seed: int) -> StudyConfig:
    # the effective range rescales with the domain: 0.7/sqrt(2) of the
    # largest pairwise distance, matching the unit-square convention
    eff_range = grid.diameter * 0.7 / math.sqrt(2.0)
    return StudyConfig(
        grid=grid,
        nu_train=nu,
        n_beta_train=settings.n_beta,
        n_beta_test=1,
        beta_max=beta_max(nu, eff_range),
        p_train=settings.p_train,
        p_test=(1.5,),
        n_sample=settings.n_sample,
        alpha=settings.alpha,
        network=replace(settings.network, seed=seed),
        seed=seed,
    )


def train_bank(grid: GridSpec, blocks, settings: BankSettings) -> ClassifierBank:
    """Train per-(block, smoothness) classifier pairs on simulated fields over
    the aggregated geometry."""
    suites: dict = {}
    for bi, block in enumerate(blocks):
        agg = aggregated_grid(grid, block)
        if agg.size < 8:
            raise ValueError(f"block {block} leaves too few sites ({agg.size}) to build features")
        suites[block] = {}
        for vi, nu in enumerate(settings.nu_values):
            cfg = _bank_study_config(agg, nu, settings, settings.seed + 1000 * bi + 100 * vi)
            table = extract_features(generate_dataset(cfg, "train"))
            suites[block][nu] = run_training(cfg, table)
    return ClassifierBank(suites, tuple(blocks), tuple(settings.nu_values))


# ---------------------------------------------------------------------------
# the per-timepoint normality scan
# ---------------------------------------------------------------------------


@dataclass
class ScanResult:
    rates: list  # dicts: block, m, method, rejection_rate, n, excluded
    decisions: list  # per-(block, t) decision log dicts

    def rate(self, block: int, method: str) -> float:
        for row in self.rates:
            if row["block"] == block and row["method"] == method:
                return row["rejection_rate"]
        raise KeyError((block, method))

    def write_rates_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(["block", "m", "method", "rejection_rate", "n", "excluded"])
            for row in self.rates:
                writer.writerow(
                    [row["block"], row["m"], row["method"], repr(row["rejection_rate"]), row["n"], row["excluded"]]
                )

    def write_decisions_csv(self, path) -> None:
        cols = [
            "block", "t", "converged", "beta_hat", "nu_hat", "nu_key", "sigma2_hat",
            "score_nn", "cutoff_nn", "reject_nn", "score_linear", "cutoff_linear", "reject_linear",
        ]
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(cols)
            for row in self.decisions:
                writer.writerow([
                    row["block"], row["t"], int(row["converged"]),
                    repr(row["beta_hat"]), repr(row["nu_hat"]), repr(row["nu_key"]), repr(row["sigma2_hat"]),
                    repr(row["score_nn"]), repr(row["cutoff_nn"]), int(row["reject_nn"]),
                    repr(row["score_linear"]), repr(row["cutoff_linear"]), int(row["reject_linear"]),
                ])


def run_normality_scan(
    cube: ResidualCube,
    bank: ClassifierBank,
    alpha: float,
    blocks=None,
    max_timepoints: int | None = None,
) -> ScanResult:
    """Per-timepoint Matern fit (smoothness free), bank allocation by nearest
    smoothness, and adaptive-cutoff decisions, per aggregation level.

    Timepoints whose fit fails to converge are excluded and counted.
    """
    if cube.grid is None:
        raise ValueError("residual cube carries no grid; whiten a GriddedSeries first")
    blocks = tuple(blocks) if blocks is not None else bank.blocks
    rates: list = []
    decisions: list = []
    t_total = cube.residuals.shape[0] if max_timepoints is None else min(max_timepoints, cube.residuals.shape[0])
    for block in blocks:
        agg_grid = aggregated_grid(cube.grid, block)
        agg_vals = aggregate_cube(cube.residuals, cube.grid.rows, cube.grid.cols, block)
        # coarse quantization: the smoothness only feeds the bank snap and the
        # range only a slowly varying cutoff curve, so factor reuse dominates
        cache = mle.FactorCache(agg_grid, beta_step=5e-3, nu_step=0.05)
        by_nu = bank.suites[block]
        counts = {"nn": 0, "linear": 0}
        n_ok = 0
        n_excluded = 0
        for t in range(t_total):
            y = agg_vals[t]
            res = mle.fit(agg_grid, y, nu=None, cache=cache)
            row = {
                "block": block,
                "t": t,
                "converged": res.converged,
                "beta_hat": res.params.beta,
                "nu_hat": res.params.nu,
                "nu_key": math.nan,
                "sigma2_hat": res.params.sigma2,
            }
            if not res.converged:
                n_excluded += 1
                for method in ("nn", "linear"):
                    row[f"score_{method}"] = math.nan
                    row[f"cutoff_{method}"] = math.nan
                    row[f"reject_{method}"] = False
                decisions.append(row)
                continue
            n_ok += 1
            nu_key = snap_nu(res.params.nu, bank.nu_values)
            row["nu_key"] = nu_key
            suite = by_nu[nu_key]
            fv = features(y).to_array()
            for method in ("nn", "linear"):
                score = mlp.forward(suite.models[method], fv)
                cut = predict_cutoff(suite.curves[method], res.params.beta)
                reject = score > cut
                counts[method] += reject
                row[f"score_{method}"] = score
                row[f"cutoff_{method}"] = cut
                row[f"reject_{method}"] = reject
            decisions.append(row)
        for method in ("nn", "linear"):
            rates.append(
                {
                    "block": block,
                    "m": agg_grid.size,
                    "method": method,
                    "rejection_rate": counts[method] / n_ok if n_ok else 0.0,
                    "n": n_ok,
                    "excluded": n_excluded,
                }
            )
    return ScanResult(rates, decisions)


# ---------------------------------------------------------------------------
# synthetic data and container IO
# ---------------------------------------------------------------------------


def synthetic_series(
    grid: GridSpec,
    t_len: int,
    seed: int,
    start_month: int = 0,
    seasonal_amp: float = 3.0,
    ar_range: tuple = (0.2, 0.6),
    sd_range: tuple = (0.6, 1.4),
    spatial_beta: float = 0.0,
    nu: float = 0.5,
    exponent: float = 1.0,
) -> GriddedSeries:
    """Seasonal + AR(1) series whose innovations are optionally spatially
    correlated and optionally signed-power transformed (exponent > 1 makes
    the whitened residuals non-Gaussian)."""
    rng = np.random.default_rng(np.random.SeedSequence((seed, 17)))
    m = grid.size
    phase = rng.uniform(0.0, 2.0 * np.pi, size=m)
    months = np.arange(12)
    mu = seasonal_amp * np.cos(2.0 * np.pi * months[:, None] / 12.0 + phase[None, :])
    sd_base = rng.uniform(*sd_range, size=m)
    sd = sd_base[None, :] * (1.0 + 0.25 * np.sin(2.0 * np.pi * months[:, None] / 12.0 + phase[None, :]))
    psi = rng.uniform(*ar_range, size=m)

    chol = None
    if spatial_beta > 0.0:
        chol = cholesky_cov(grid, MaternParams(1.0, spatial_beta, nu))

    burn = 30
    eps = np.zeros(m)
    out = np.empty((t_len, m))
    for t in range(-burn, t_len):
        z = rng.standard_normal(m)
        if chol is not None:
            z = chol @ z
        if exponent > 1.0:
            z = signed_power(z, exponent)
        eps = psi * eps + z
        if t >= 0:
            r = (start_month + t) % 12
            out[t] = mu[r] + sd[r] * eps
    return GriddedSeries(grid, start_month, out)


_GTS_HEADER = struct.Struct("<4sBIIdII")
_GEOM_TAGS = {"unit_square": 0, "sphere": 1}
_TAG_GEOMS = {v: k for k, v in _GEOM_TAGS.items()}


def write_gts(path, series: GriddedSeries) -> None:
    with open(path, "wb") as fh:
        fh.write(
            _GTS_HEADER.pack(
                b"GTS1",
                _GEOM_TAGS[series.grid.geometry],
                series.grid.rows,
                series.grid.cols,
                series.grid.radius_km,
                series.t_len,
                series.start_month,
            )
        )
        fh.write(np.ascontiguousarray(series.values, dtype="<f8").tobytes())


def read_gts(path) -> GriddedSeries:
    with open(path, "rb") as fh:
        magic, tag, rows, cols, radius, t_len, start = _GTS_HEADER.unpack(fh.read(_GTS_HEADER.size))
        if magic != b"GTS1":
            raise ValueError(f"not a GTS1 file: bad magic {magic!r}")
        grid = GridSpec(_TAG_GEOMS[tag], rows, cols, radius)
        values = np.frombuffer(fh.read(8 * t_len * grid.size), dtype="<f8").reshape(t_len, grid.size)
    return GriddedSeries(grid, start, values.astype(float))


def write_series_csv(path, series: GriddedSeries) -> None:
    with open(path, "w", newline="") as fh:
        g = series.grid
        fh.write(
            f"# geometry={g.geometry} rows={g.rows} cols={g.cols} radius_km={g.radius_km!r} "
            f"start_month={series.start_month}\n"
        )
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow([f"loc{i}" for i in range(g.size)])
        for t in range(series.t_len):
            writer.writerow([repr(float(v)) for v in series.values[t]])


def read_series_csv(path) -> GriddedSeries:
    with open(path, newline="") as fh:
        header = fh.readline()
        if not header.startswith("#"):
            raise ValueError("series CSV is missing its parameter header")
        params = dict(kv.split("=") for kv in header[1:].split())
        grid = GridSpec(
            params["geometry"], int(params["rows"]), int(params["cols"]), float(params["radius_km"])
        )
        reader = csv.reader(fh)
        next(reader)  # column names
        values = np.array([[float(v) for v in row] for row in reader])
    return GriddedSeries(grid, int(params["start_month"]), values)
