"""Level-alpha decisions from classifier scores.

Per-range empirical cutoffs (the smallest score q such that at most an alpha
fraction of null training scores exceed q) are smoothed into a function of
the range parameter by Gaussian-kernel regression, so test samples at ranges
never seen in training still get a calibrated threshold.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass

import numpy as np

__all__ = [
    "CutoffCurve",
    "decide",
    "empirical_cutoff",
    "fit_curve",
    "predict_cutoff",
    "read_curve",
    "write_curve",
]


def empirical_cutoff(scores, alpha: float) -> float:
    """Smallest q with at most an alpha fraction of scores strictly above it.

    Realized as the ceil(N(1-alpha))-th order statistic, with no interpolation.
    """
    scores = np.asarray(scores, dtype=float)
    if scores.size == 0:
        raise ValueError("cannot compute a cutoff from no scores")
    if not 0.0 < alpha < 1.0:
        raise ValueError(f"alpha must lie in (0,1), got {alpha}")
    k = max(1, math.ceil(scores.size * (1.0 - alpha)))
    return float(np.sort(scores)[k - 1])


@dataclass(frozen=True)
class CutoffCurve:
    """Per-range cutoffs plus the kernel-regression bandwidth.

    Kernel distances are computed on ranges divided by `beta_scale`, so one
    bandwidth serves grids whose range parameters live on different scales;
    beta_scale=1 means raw ranges.
    """

    betas: tuple
    cutoffs: tuple
    bandwidth: float
    alpha: float
    beta_scale: float = 1.0

    def __post_init__(self) -> None:
        if len(self.betas) == 0 or len(self.betas) != len(self.cutoffs):
            raise ValueError("curve needs matching, nonempty betas and cutoffs")
        if any(b2 <= b1 for b1, b2 in zip(self.betas, self.betas[1:])):
            raise ValueError("betas must be strictly increasing")
        if any(not 0.0 <= q <= 1.0 for q in self.cutoffs):
            raise ValueError("cutoffs must lie in [0,1]")
        if not self.bandwidth > 0.0 or not self.beta_scale > 0.0:
            raise ValueError("bandwidth and beta_scale must be positive")


def fit_curve(
    groups,
    alpha: float,
    bandwidth: float = 0.3,
    beta_scale: float | None = None,
) -> CutoffCurve:
    """Empirical cutoff per (beta, H0 scores) group, sorted by beta.

    groups: mapping beta -> score array, or iterable of (beta, scores) pairs.
    beta_scale=None rescales by the largest beta so the default bandwidth
    refers to the [0, 1] range.
    """
    pairs = sorted(groups.items()) if hasattr(groups, "items") else sorted(groups)
    betas = [b for b, _ in pairs]
    if len(betas) != len(set(betas)):
        raise ValueError("duplicate betas in cutoff groups")
    cutoffs = [empirical_cutoff(scores, alpha) for _, scores in pairs]
    if beta_scale is None:
        beta_scale = betas[-1] if betas and betas[-1] > 0.0 else 1.0
    return CutoffCurve(tuple(betas), tuple(cutoffs), bandwidth, alpha, beta_scale)


def predict_cutoff(curve: CutoffCurve, beta: float) -> float:
    """Gaussian-kernel (Nadaraya-Watson) estimate of the cutoff at beta."""
    if beta < 0.0:
        raise ValueError(f"beta must be nonnegative, got {beta}")
    b = np.asarray(curve.betas, dtype=float)
    q = np.asarray(curve.cutoffs, dtype=float)
    z = (beta - b) / (curve.beta_scale * curve.bandwidth)
    logw = -0.5 * z * z
    w = np.exp(logw - logw.max())  # max-shift keeps weights alive far from all betas
    return float((w @ q) / w.sum())


def decide(score: float, curve: CutoffCurve, beta: float) -> bool:
    """True = reject the normality hypothesis (score strictly above cutoff)."""
    if not 0.0 <= score <= 1.0:
        raise ValueError(f"score must lie in [0,1], got {score}")
    return score > predict_cutoff(curve, beta)


def write_curve(path, curve: CutoffCurve) -> None:
    with open(path, "w", newline="") as fh:
        fh.write(f"# alpha={curve.alpha!r} bandwidth={curve.bandwidth!r} beta_scale={curve.beta_scale!r}\n")
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["beta", "cutoff"])
        for b, q in zip(curve.betas, curve.cutoffs):
            writer.writerow([repr(b), repr(q)])


def read_curve(path) -> CutoffCurve:
    with open(path, newline="") as fh:
        header = fh.readline()
        if not header.startswith("#"):
            raise ValueError("curve file is missing its parameter header")
        params = dict(kv.split("=") for kv in header[1:].split())
        rows = list(csv.DictReader(fh))
    return CutoffCurve(
        tuple(float(r["beta"]) for r in rows),
        tuple(float(r["cutoff"]) for r in rows),
        float(params["bandwidth"]),
        float(params["alpha"]),
        float(params["beta_scale"]),
    )
