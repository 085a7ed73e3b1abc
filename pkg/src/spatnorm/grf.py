"""Matern covariances, Gaussian random field sampling, and the signed-power
departure used to generate non-Gaussian alternatives.

Grids are either a regular unit square (endpoints included, so an n x n grid
has spacing 1/(n-1)) or a regular latitude/longitude grid on a sphere with
distances measured chordally in 3-D.
"""

from __future__ import annotations

import csv
import functools
import math
import struct
from dataclasses import dataclass, replace

import numpy as np

from .numerics import bessel_k_vec

__all__ = [
    "FactorizationError",
    "FieldSample",
    "GridSpec",
    "MaternParams",
    "beta_max",
    "cholesky_cov",
    "cov_matrix",
    "matern_cov",
    "read_grfs",
    "sample_field",
    "signed_power",
    "transform_sample",
    "write_grfs",
    "write_samples_csv",
]

_JITTERS = (0.0, 1e-10, 1e-9, 1e-8, 1e-7, 1e-6)


class FactorizationError(RuntimeError):
    """Covariance matrix could not be Cholesky-factorized, even with jitter."""


@dataclass(frozen=True)
class GridSpec:
    """Regular grid of observation sites.

    geometry "unit_square": rows x cols points on [0,1]^2 including endpoints.
    geometry "sphere": rows latitude bands x cols longitude bands of cell
    centers, mapped to 3-D coordinates; distances are chordal (straight-line).
    """

    geometry: str
    rows: int
    cols: int
    radius_km: float = 0.0

    def __post_init__(self) -> None:
        if self.geometry not in ("unit_square", "sphere"):
            raise ValueError(f"unknown geometry {self.geometry!r}")
        if self.rows < 1 or self.cols < 1 or self.rows * self.cols < 4:
            raise ValueError("grid needs rows*cols >= 4")
        if self.geometry == "sphere" and self.radius_km <= 0.0:
            raise ValueError("sphere grid needs a positive radius")

    @property
    def size(self) -> int:
        return self.rows * self.cols

    def coordinates(self) -> np.ndarray:
        """(M, 2) or (M, 3) array of site coordinates, row-major."""
        if self.geometry == "unit_square":
            xs = np.linspace(0.0, 1.0, self.rows) if self.rows > 1 else np.array([0.0])
            ys = np.linspace(0.0, 1.0, self.cols) if self.cols > 1 else np.array([0.0])
            gx, gy = np.meshgrid(xs, ys, indexing="ij")
            return np.column_stack([gx.ravel(), gy.ravel()])
        lat = -90.0 + (np.arange(self.rows) + 0.5) * (180.0 / self.rows)
        lon = -180.0 + (np.arange(self.cols) + 0.5) * (360.0 / self.cols)
        glat, glon = np.meshgrid(np.deg2rad(lat), np.deg2rad(lon), indexing="ij")
        r = self.radius_km
        x = r * np.cos(glat) * np.cos(glon)
        y = r * np.cos(glat) * np.sin(glon)
        z = r * np.sin(glat)
        return np.column_stack([x.ravel(), y.ravel(), z.ravel()])

    @property
    def diameter(self) -> float:
        """Largest pairwise distance on the grid."""
        return float(_distance_info(self)[0][-1])


@functools.lru_cache(maxsize=32)
def _distance_info(grid: GridSpec) -> tuple[np.ndarray, np.ndarray]:
    """Sorted unique pairwise distances and the M*M inverse index map.

    Regular grids have few distinct distances, so covariance matrices are
    assembled by evaluating the covariance once per unique distance.
    """
    pts = grid.coordinates()
    d2 = ((pts[:, None, :] - pts[None, :, :]) ** 2).sum(axis=-1)
    d = np.sqrt(np.maximum(d2, 0.0))
    # scale-aware rounding so symmetry-duplicate distances collapse regardless
    # of the coordinate units (unit square vs thousands of km)
    scale = d.max() if d.max() > 0.0 else 1.0
    uniq, inverse = np.unique(np.round(d / scale, 12), return_inverse=True)
    return uniq * scale, inverse.reshape(-1).astype(np.int32)


@dataclass(frozen=True)
class MaternParams:
    """Matern covariance parameters: marginal variance, range, smoothness."""

    sigma2: float
    beta: float
    nu: float

    def __post_init__(self) -> None:
        if not self.sigma2 > 0.0:
            raise ValueError(f"sigma2 must be positive, got {self.sigma2}")
        if self.beta < 0.0:
            raise ValueError(f"beta must be nonnegative, got {self.beta}")
        if not self.nu > 0.0:
            raise ValueError(f"nu must be positive, got {self.nu}")


def matern_correlation(nu: float, r) -> np.ndarray:
    """Matern correlation at scaled distance r = d/beta (array-friendly)."""
    r = np.asarray(r, dtype=float)
    out = np.ones_like(r)
    pos = r > 0.0
    if pos.any():
        rp = r[pos]
        if abs(nu - 0.5) < 1e-12:
            out[pos] = np.exp(-rp)
        else:
            scale = 2.0 ** (1.0 - nu) / math.gamma(nu)
            out[pos] = scale * rp**nu * bessel_k_vec(nu, rp)
    return out


def matern_cov(params: MaternParams, distance: float) -> float:
    """Matern covariance at a single distance; continuous limit at zero."""
    if distance < 0.0 or not math.isfinite(distance):
        raise ValueError(f"distance must be finite and nonnegative, got {distance}")
    if params.beta == 0.0:
        return params.sigma2 if distance == 0.0 else 0.0
    if distance == 0.0:
        return params.sigma2
    return params.sigma2 * float(matern_correlation(params.nu, np.array([distance / params.beta]))[0])


def beta_max(nu: float, effective_range: float) -> float:
    """Range parameter at which correlation equals 0.05 at effective_range."""
    if nu <= 0.0 or effective_range <= 0.0:
        raise ValueError("nu and effective_range must be positive")
    target = 0.05

    def corr(r: float) -> float:
        return float(matern_correlation(nu, np.array([r]))[0])

    lo, hi = 1e-8, 1.0
    while corr(hi) > target:
        hi *= 2.0
        if hi > 1e9:
            raise RuntimeError("failed to bracket the correlation root")
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if mid == lo or mid == hi:
            break
        if corr(mid) > target:
            lo = mid
        else:
            hi = mid
    return effective_range / (0.5 * (lo + hi))


def cov_matrix(grid: GridSpec, params: MaternParams) -> np.ndarray:
    """Dense Matern covariance matrix of the grid."""
    m = grid.size
    if params.beta == 0.0:
        return params.sigma2 * np.eye(m)
    uniq, inverse = _distance_info(grid)
    vals = params.sigma2 * matern_correlation(params.nu, uniq / params.beta)
    return vals[inverse].reshape(m, m)


def _cholesky_with_jitter(mat: np.ndarray, scale: float) -> np.ndarray:
    for jit in _JITTERS:
        try:
            if jit == 0.0:
                return np.linalg.cholesky(mat)
            return np.linalg.cholesky(mat + (jit * scale) * np.eye(mat.shape[0]))
        except np.linalg.LinAlgError:
            continue
    raise FactorizationError(
        f"Cholesky failed after jitter up to {_JITTERS[-1] * scale:g}; matrix is ill-conditioned"
    )


def cholesky_cov(grid: GridSpec, params: MaternParams) -> np.ndarray:
    """Lower Cholesky factor of cov_matrix, with an escalating diagonal jitter."""
    return _cholesky_with_jitter(cov_matrix(grid, params), params.sigma2)


@dataclass
class FieldSample:
    """One field realization plus the metadata that generated it."""

    grid: GridSpec
    values: np.ndarray
    beta: float
    nu: float
    exponent_p: float
    seed: int
    label: str  # "H0" | "H1"

    def __post_init__(self) -> None:
        self.values = np.asarray(self.values, dtype=float)
        if self.values.shape != (self.grid.size,):
            raise ValueError("values length must match the grid size")
        if self.label not in ("H0", "H1"):
            raise ValueError(f"label must be H0 or H1, got {self.label!r}")
        if (self.label == "H0") != (self.exponent_p == 1.0):
            raise ValueError("label H0 requires exponent_p == 1 and vice versa")

    def lattice(self) -> np.ndarray:
        return self.values.reshape(self.grid.rows, self.grid.cols)


def _stream_seed(seed, index: int) -> int:
    entropy = (seed, index) if np.isscalar(seed) else tuple(seed) + (index,)
    return int(np.random.SeedSequence(entropy).generate_state(1, np.uint64)[0])


def sample_field(grid: GridSpec, params: MaternParams, count: int, seed) -> list[FieldSample]:
    """Draw `count` zero-mean Gaussian fields by Cholesky factorization.

    Each sample uses its own stream seed derived from (seed, index), so any
    single sample can be regenerated from the seed stored in its metadata.
    """
    if count < 1:
        raise ValueError("count must be positive")
    chol = cholesky_cov(grid, params)
    out = []
    for i in range(count):
        s = _stream_seed(seed, i)
        rng = np.random.default_rng(s)
        u = rng.standard_normal(grid.size)
        out.append(
            FieldSample(
                grid=grid,
                values=chol @ u,
                beta=params.beta,
                nu=params.nu,
                exponent_p=1.0,
                seed=s,
                label="H0",
            )
        )
    return out


def signed_power(values, p: float) -> np.ndarray:
    """Elementwise |z|^p sign(z); identity at p = 1."""
    if p < 1.0:
        raise ValueError(f"exponent must be >= 1, got {p}")
    values = np.asarray(values, dtype=float)
    return np.sign(values) * np.abs(values) ** p


def transform_sample(sample: FieldSample, p: float) -> FieldSample:
    """Signed-power transform of an H0 sample into an H1 sample."""
    if p <= 1.0:
        raise ValueError("alternative samples need exponent > 1")
    return replace(sample, values=signed_power(sample.values, p), exponent_p=p, label="H1")


# ---------------------------------------------------------------------------
# container file (magic "GRFS1") and CSV export
# ---------------------------------------------------------------------------

_GEOMETRY_TAGS = {"unit_square": 0, "sphere": 1}
_TAG_GEOMETRIES = {v: k for k, v in _GEOMETRY_TAGS.items()}
_HEADER = struct.Struct("<5sBIIdII")
_SAMPLE_META = struct.Struct("<dddQB")
_LABEL_CODE = {"H0": 0, "H1": 1}
_CODE_LABEL = {0: "H0", 1: "H1"}


def write_grfs(path, samples: list[FieldSample]) -> None:
    """Write samples (sharing one grid) to the little-endian GRFS1 container."""
    if not samples:
        raise ValueError("nothing to write")
    grid = samples[0].grid
    if any(s.grid != grid for s in samples):
        raise ValueError("all samples in a container must share one grid")
    with open(path, "wb") as fh:
        fh.write(
            _HEADER.pack(
                b"GRFS1",
                _GEOMETRY_TAGS[grid.geometry],
                grid.rows,
                grid.cols,
                grid.radius_km,
                grid.size,
                len(samples),
            )
        )
        for s in samples:
            fh.write(_SAMPLE_META.pack(s.beta, s.nu, s.exponent_p, s.seed, _LABEL_CODE[s.label]))
            fh.write(np.ascontiguousarray(s.values, dtype="<f8").tobytes())


def read_grfs(path) -> list[FieldSample]:
    """Read a GRFS1 container written by write_grfs."""
    with open(path, "rb") as fh:
        head = fh.read(_HEADER.size)
        magic, tag, rows, cols, radius, m, count = _HEADER.unpack(head)
        if magic != b"GRFS1":
            raise ValueError(f"not a GRFS1 file: bad magic {magic!r}")
        grid = GridSpec(_TAG_GEOMETRIES[tag], rows, cols, radius)
        if grid.size != m:
            raise ValueError("corrupt header: grid size mismatch")
        out = []
        for _ in range(count):
            beta, nu, p, seed, label = _SAMPLE_META.unpack(fh.read(_SAMPLE_META.size))
            values = np.frombuffer(fh.read(8 * m), dtype="<f8").astype(float)
            out.append(
                FieldSample(
                    grid=grid,
                    values=values,
                    beta=beta,
                    nu=nu,
                    exponent_p=p,
                    seed=seed,
                    label=_CODE_LABEL[label],
                )
            )
    return out


def write_samples_csv(path, samples: list[FieldSample]) -> None:
    """One row per sample: metadata columns, then the field values."""
    if not samples:
        raise ValueError("nothing to write")
    m = samples[0].grid.size
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["label", "beta", "nu", "p", "seed"] + [f"v{i}" for i in range(m)])
        for s in samples:
            writer.writerow(
                [s.label, repr(s.beta), repr(s.nu), repr(s.exponent_p), s.seed]
                + [repr(float(v)) for v in s.values]
            )
