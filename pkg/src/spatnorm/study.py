"""Simulation harness: dataset generation, classifier training, adaptive-cutoff
calibration, and rejection-rate tables for Type I error, power, classical-test
inflation, and architecture sensitivity.

Two scales are provided: a desk preset that finishes in minutes and the full
publication-scale preset.
"""

from __future__ import annotations

import csv
import os
from dataclasses import dataclass, field, replace

import numpy as np

from . import cutoff as cutoff_mod
from . import mle
from . import mlp
from .depnorm import dep_normality_test
from .grf import FieldSample, GridSpec, MaternParams, beta_max, sample_field, transform_sample
from .normstats import CriticalValues, classical_critical_values, features_matrix

__all__ = [
    "EvalRow",
    "EvalTable",
    "FeatureTable",
    "StudyConfig",
    "TABLE1_MODELS",
    "TrainedSuite",
    "classical_type1",
    "desk_config",
    "evaluate",
    "extract_features",
    "generate_dataset",
    "paper_config",
    "power_by_p",
    "run_study",
    "run_training",
    "sensitivity_suite",
]

# the six architecture presets of the sensitivity study
TABLE1_MODELS = {
    "model1": ((256, 128), 0.3),
    "model2": ((256, 128, 64), 0.3),
    "model3": ((32, 16), 0.3),
    "model4": ((128,), 0.3),
    "model5": ((256, 128), 0.6),
    "model6": ((256, 128), 0.1),
}

_SPLIT_CODES = {"train": 0, "test": 1}


@dataclass(frozen=True)
class StudyConfig:
    """Everything needed to reproduce one simulation study run."""

    grid: GridSpec
    nu_train: float
    n_beta_train: int
    n_beta_test: int
    beta_max: float
    p_train: tuple
    p_test: tuple
    n_sample: int
    alpha: float
    network: mlp.NetworkConfig
    seed: int
    beta_mode: str = "known"  # "known" | "estimated"
    cross_nu: float | None = None  # mismatched test-generation smoothness
    h0_multiplier: int | None = None  # H0 draws per beta = multiplier * n_sample

    def __post_init__(self) -> None:
        for p_set in (self.p_train, self.p_test):
            if any(p <= 1.0 for p in p_set):
                raise ValueError("alternative exponent sets must exclude 1 and stay above it")
        if self.beta_mode not in ("known", "estimated"):
            raise ValueError(f"unknown beta_mode {self.beta_mode!r}")
        if not 0.0 < self.alpha < 1.0:
            raise ValueError("alpha must lie in (0,1)")
        if self.n_beta_train < 1 or self.n_beta_test < 1 or self.n_sample < 1:
            raise ValueError("grid and sample counts must be positive")

    def betas(self, split: str) -> np.ndarray:
        n = self.n_beta_train if split == "train" else self.n_beta_test
        return np.linspace(0.0, self.beta_max, n)

    def h0_count(self, split: str) -> int:
        p_set = self.p_train if split == "train" else self.p_test
        mult = self.h0_multiplier if self.h0_multiplier is not None else len(p_set)
        return mult * self.n_sample


def desk_config(seed: int = 0, **overrides) -> StudyConfig:
    """Minutes-scale preset: 30x30 grid, 10/15 range values, 50 samples/cell."""
    nu = overrides.pop("nu_train", 0.5)
    cfg = StudyConfig(
        grid=GridSpec("unit_square", 30, 30),
        nu_train=nu,
        n_beta_train=10,
        n_beta_test=15,
        beta_max=beta_max(nu, 0.7),
        p_train=(1.2, 1.4, 1.6, 1.8),
        p_test=(1.2, 1.6, 2.0),
        n_sample=50,
        alpha=0.05,
        network=mlp.NetworkConfig(layer_widths=(256, 128), dropout_rate=0.3, seed=seed + 101),
        seed=seed,
    )
    return replace(cfg, **overrides) if overrides else cfg


def paper_config(seed: int = 0, **overrides) -> StudyConfig:
    """Publication-scale preset: 60x60 grid, 30/50 range values, 200 samples/cell."""
    nu = overrides.pop("nu_train", 0.5)
    cfg = StudyConfig(
        grid=GridSpec("unit_square", 60, 60),
        nu_train=nu,
        n_beta_train=30,
        n_beta_test=50,
        beta_max=beta_max(nu, 0.7),
        p_train=(1.2, 1.4, 1.6, 1.8),
        p_test=tuple(np.round(np.arange(1.1, 2.01, 0.1), 10)),
        n_sample=200,
        alpha=0.05,
        network=mlp.NetworkConfig(layer_widths=(256, 128), dropout_rate=0.3, seed=seed + 101),
        seed=seed,
    )
    return replace(cfg, **overrides) if overrides else cfg


def generate_dataset(config: StudyConfig, split: str) -> list[FieldSample]:
    """Labeled fields for one split: per beta, an H0 block and one H1 block per
    exponent (signed-power transforms of fresh Gaussian draws)."""
    if split not in _SPLIT_CODES:
        raise ValueError(f"split must be train or test, got {split!r}")
    code = _SPLIT_CODES[split]
    nu_gen = config.nu_train
    if split == "test" and config.cross_nu is not None:
        nu_gen = config.cross_nu
    p_set = config.p_train if split == "train" else config.p_test
    h0_count = config.h0_count(split)
    out: list[FieldSample] = []
    for i, beta in enumerate(config.betas(split)):
        params = MaternParams(1.0, float(beta), nu_gen)
        out.extend(sample_field(config.grid, params, h0_count, (config.seed, code, i, 0)))
        for j, p in enumerate(p_set):
            base = sample_field(config.grid, params, config.n_sample, (config.seed, code, i, j + 1))
            out.extend(transform_sample(s, p) for s in base)
    return out


@dataclass
class FeatureTable:
    """Feature matrix aligned with sample metadata."""

    x: np.ndarray
    names: tuple
    betas: np.ndarray
    ps: np.ndarray
    labels: np.ndarray  # 0 = H0, 1 = H1
    seeds: np.ndarray

    def __len__(self) -> int:
        return self.x.shape[0]


def extract_features(samples: list[FieldSample]) -> FeatureTable:
    x, names = features_matrix(s.values for s in samples)
    return FeatureTable(
        x=x,
        names=names,
        betas=np.array([s.beta for s in samples]),
        ps=np.array([s.exponent_p for s in samples]),
        labels=np.array([1 if s.label == "H1" else 0 for s in samples]),
        seeds=np.array([s.seed for s in samples], dtype=np.uint64),
    )


def write_features_csv(path, table: FeatureTable) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["label", "beta", "p", "seed"] + list(table.names))
        for i in range(len(table)):
            writer.writerow(
                [int(table.labels[i]), repr(float(table.betas[i])), repr(float(table.ps[i])), int(table.seeds[i])]
                + [repr(float(v)) for v in table.x[i]]
            )


def read_features_csv(path) -> FeatureTable:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        names = tuple(header[4:])
        rows = list(reader)
    n = len(rows)
    x = np.empty((n, len(names)))
    betas = np.empty(n)
    ps = np.empty(n)
    labels = np.empty(n, dtype=int)
    seeds = np.empty(n, dtype=np.uint64)
    for i, row in enumerate(rows):
        labels[i] = int(row[0])
        betas[i] = float(row[1])
        ps[i] = float(row[2])
        seeds[i] = int(row[3])
        x[i] = [float(v) for v in row[4:]]
    return FeatureTable(x, names, betas, ps, labels, seeds)


@dataclass
class TrainedSuite:
    """Both classifiers plus their adaptive cutoff curves."""

    models: dict  # method -> ClassifierModel
    curves: dict  # method -> CutoffCurve
    alpha: float

    def save(self, out_dir: str) -> None:
        os.makedirs(out_dir, exist_ok=True)
        for name, model in self.models.items():
            mlp.save_model(os.path.join(out_dir, f"{name}_model.txt"), model)
        for name, curve in self.curves.items():
            cutoff_mod.write_curve(os.path.join(out_dir, f"{name}_curve.csv"), curve)

    @classmethod
    def load(cls, out_dir: str, methods=("nn", "linear")) -> "TrainedSuite":
        models = {m: mlp.load_model(os.path.join(out_dir, f"{m}_model.txt")) for m in methods}
        curves = {m: cutoff_mod.read_curve(os.path.join(out_dir, f"{m}_curve.csv")) for m in methods}
        alpha = next(iter(curves.values())).alpha
        return cls(models, curves, alpha)


def _fit_cutoff_curve(config: StudyConfig, model, table: FeatureTable) -> cutoff_mod.CutoffCurve:
    h0 = table.labels == 0
    scores = mlp.forward_batch(model, table.x)
    groups = {}
    for beta in config.betas("train"):
        sel = h0 & (table.betas == beta)
        groups[float(beta)] = scores[sel]
    scale = config.beta_max if config.beta_max > 0.0 else 1.0
    return cutoff_mod.fit_curve(groups, config.alpha, bandwidth=0.3, beta_scale=scale)


def run_training(config: StudyConfig, train_table: FeatureTable) -> TrainedSuite:
    """Train the network and the linear baseline on identical features, then
    calibrate one cutoff curve per classifier from the H0 training scores."""
    y = train_table.labels.astype(float)
    nn = mlp.train(config.network, train_table.x, y)
    linear = mlp.train(mlp.linear_config(config.network, seed=config.network.seed + 1), train_table.x, y)
    models = {"nn": nn, "linear": linear}
    curves = {name: _fit_cutoff_curve(config, model, train_table) for name, model in models.items()}
    return TrainedSuite(models, curves, config.alpha)


@dataclass(frozen=True)
class EvalRow:
    beta: float
    p: float  # 1.0 marks H0 rows
    method: str
    rejection_rate: float
    n: int
    excluded: int = 0


@dataclass
class EvalTable:
    rows: list = field(default_factory=list)

    def sorted_rows(self) -> list:
        return sorted(self.rows, key=lambda r: (r.method, r.beta, r.p))

    def rate(self, method: str, h0: bool | None = None, p: float | None = None) -> float:
        """Unweighted mean rejection rate over matching cells."""
        sel = [
            r.rejection_rate
            for r in self.rows
            if r.method == method
            and (h0 is None or (r.p == 1.0) == h0)
            and (p is None or r.p == p)
        ]
        if not sel:
            raise ValueError(f"no cells match method={method} h0={h0} p={p}")
        return float(np.mean(sel))

    def write_csv(self, path, h0_only: bool | None = None) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(["beta", "p", "method", "rejection_rate", "n", "excluded"])
            for r in self.sorted_rows():
                if h0_only is True and r.p != 1.0:
                    continue
                if h0_only is False and r.p == 1.0:
                    continue
                writer.writerow([repr(r.beta), repr(r.p), r.method, repr(r.rejection_rate), r.n, r.excluded])


def evaluate(
    suite: TrainedSuite,
    samples: list[FieldSample],
    table: FeatureTable,
    alpha: float,
    nu_train: float,
    beta_mode: str = "known",
    methods: tuple = ("nn", "linear", "depnorm"),
    mle_cache: mle.FactorCache | None = None,
) -> EvalTable:
    """Per-sample decisions aggregated into per-(beta, p, method) rejection rates.

    In "estimated" mode the cutoff is looked up at the maximum-likelihood range
    (smoothness fixed at the training value); samples whose fit does not
    converge are excluded and counted.
    """
    n = len(table)
    if len(samples) != n:
        raise ValueError("samples and feature table are misaligned")
    if beta_mode not in ("known", "estimated"):
        raise ValueError(f"unknown beta_mode {beta_mode!r}")

    beta_used = table.betas.copy()
    usable = np.ones(n, dtype=bool)
    if beta_mode == "estimated":
        grid = samples[0].grid
        if mle_cache is None:
            mle_cache = mle.FactorCache(grid)
        for i, s in enumerate(samples):
            res = mle.fit(grid, s.values, nu=nu_train, cache=mle_cache)
            if res.converged:
                beta_used[i] = res.params.beta
            else:
                usable[i] = False

    decisions = {}
    for method in methods:
        if method == "depnorm":
            decisions[method] = np.array(
                [dep_normality_test(s.lattice(), alpha).reject for s in samples]
            )
        else:
            scores = mlp.forward_batch(suite.models[method], table.x)
            curve = suite.curves[method]
            cuts = np.array([cutoff_mod.predict_cutoff(curve, b) for b in beta_used])
            decisions[method] = scores > cuts

    out = EvalTable()
    for beta in np.unique(table.betas):
        for p in np.unique(table.ps[table.betas == beta]):
            cell = (table.betas == beta) & (table.ps == p)
            for method in methods:
                # depnorm needs no range estimate, so no exclusions apply
                ok = cell if method == "depnorm" else (cell & usable)
                n_cell = int(ok.sum())
                excluded = int(cell.sum()) - n_cell
                rate = float(decisions[method][ok].mean()) if n_cell else 0.0
                out.rows.append(EvalRow(float(beta), float(p), method, rate, n_cell, excluded))
    return out


def power_by_p(table: EvalTable, methods=("nn", "linear", "depnorm")) -> dict:
    """Power averaged over beta, keyed (method, p)."""
    ps = sorted({r.p for r in table.rows if r.p != 1.0})
    return {(m, p): table.rate(m, p=p) for m in methods for p in ps}


def classical_type1(
    table: FeatureTable,
    crit: CriticalValues,
) -> EvalTable:
    """Rejection rates of the calibrated classical i.i.d. tests on H0 samples."""
    out = EvalTable()
    h0 = table.labels == 0
    name_to_col = {name: i for i, name in enumerate(table.names)}
    for stat_name, crit_val in sorted(crit.values.items()):
        col = table.x[:, name_to_col[stat_name]]
        reject = (col < crit_val) if stat_name in ("shapiro_wilk",) else (col > crit_val)
        for beta in np.unique(table.betas):
            cell = h0 & (table.betas == beta)
            out.rows.append(
                EvalRow(
                    float(beta),
                    1.0,
                    f"classical-{stat_name}",
                    float(reject[cell].mean()),
                    int(cell.sum()),
                )
            )
    return out


def sensitivity_suite(
    config: StudyConfig,
    train_table: FeatureTable,
    samples: list[FieldSample],
    test_table: FeatureTable,
) -> dict:
    """Known-range Type I error and power for every architecture preset."""
    out = {}
    for idx, (name, (widths, dropout)) in enumerate(TABLE1_MODELS.items()):
        net = replace(config.network, layer_widths=widths, dropout_rate=dropout, seed=config.network.seed + 10 * (idx + 1))
        model = mlp.train(net, train_table.x, train_table.labels.astype(float))
        curve = _fit_cutoff_curve(config, model, train_table)
        suite = TrainedSuite({"nn": model}, {"nn": curve}, config.alpha)
        out[name] = evaluate(
            suite, samples, test_table, config.alpha, config.nu_train, beta_mode="known", methods=("nn",)
        )
    return out


def run_study(
    config: StudyConfig,
    out_dir: str,
    estimated: bool = False,
    sensitivity: bool = False,
    classical: bool = True,
    n_null_calibration: int = 2000,
) -> dict:
    """Full pipeline to CSV files in out_dir; returns the tables produced."""
    os.makedirs(out_dir, exist_ok=True)
    results: dict = {}

    train_samples = generate_dataset(config, "train")
    train_table = extract_features(train_samples)
    write_features_csv(os.path.join(out_dir, "features_train.csv"), train_table)

    test_samples = generate_dataset(config, "test")
    test_table = extract_features(test_samples)
    write_features_csv(os.path.join(out_dir, "features_test.csv"), test_table)

    suite = run_training(config, train_table)
    suite.save(os.path.join(out_dir, "suite"))

    known = evaluate(suite, test_samples, test_table, config.alpha, config.nu_train, beta_mode="known")
    known.write_csv(os.path.join(out_dir, "type1_known.csv"), h0_only=True)
    results["known"] = known

    powers = power_by_p(known)
    with open(os.path.join(out_dir, "power_by_p.csv"), "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["method", "p", "power"])
        for (method, p), val in sorted(powers.items()):
            writer.writerow([method, repr(p), repr(val)])

    if estimated:
        est = evaluate(suite, test_samples, test_table, config.alpha, config.nu_train, beta_mode="estimated")
        est.write_csv(os.path.join(out_dir, "type1_estimated.csv"), h0_only=True)
        results["estimated"] = est

    if classical:
        crit = classical_critical_values(
            config.grid.size,
            config.alpha,
            n_null_calibration,
            config.seed + 7,
            cache_dir=os.path.join(out_dir, "critval_cache"),
        )
        ct = classical_type1(test_table, crit)
        ct.write_csv(os.path.join(out_dir, "classical_type1.csv"))
        results["classical"] = ct

    if sensitivity:
        tables = sensitivity_suite(config, train_table, test_samples, test_table)
        for name, tab in tables.items():
            tab.write_csv(os.path.join(out_dir, f"sensitivity_{name}.csv"))
        results["sensitivity"] = tables

    return results
