"""Command-line entry point.

Every subcommand resolves its options from defaults, then an optional INI
config file (section named after the subcommand), then explicit flags, and
records the resolved invocation in a manifest inside the output directory so
any run can be reproduced exactly.
"""

from __future__ import annotations

import argparse
import configparser
import hashlib
import json
import os
import sys
import time
from dataclasses import replace

import numpy as np

from . import __version__, climate, depnorm, grf, mle, mlp, study
from . import cutoff as cutoff_mod
from .normstats import classical_critical_values

__all__ = ["main", "write_manifest"]


class ConfigError(ValueError):
    """A named option failed validation; exits with status 2."""


def write_manifest(out_dir: str, command: str, argv: list, options: dict, timings: dict, outputs: list) -> str:
    os.makedirs(out_dir, exist_ok=True)
    canonical = json.dumps({"command": command, "options": options}, sort_keys=True)
    manifest = {
        "version": __version__,
        "command": command,
        "argv": list(argv),
        "options": options,
        "config_hash": hashlib.sha256(canonical.encode()).hexdigest(),
        "seed": options.get("seed"),
        "timings_s": timings,
        "outputs": sorted(outputs),
    }
    path = os.path.join(out_dir, "manifest.json")
    with open(path, "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return path


def _parse_grid(spec: str, radius: float) -> grf.GridSpec:
    try:
        if spec.startswith("sphere:"):
            rows, cols = spec[len("sphere:") :].lower().split("x")
            return grf.GridSpec("sphere", int(rows), int(cols), radius)
        rows, cols = spec.lower().split("x")
        return grf.GridSpec("unit_square", int(rows), int(cols))
    except (ValueError, TypeError) as exc:
        raise ConfigError(f"grid: cannot parse {spec!r} ({exc})") from exc


def _parse_floats(text: str, key: str) -> tuple:
    try:
        return tuple(float(v) for v in str(text).split(","))
    except ValueError as exc:
        raise ConfigError(f"{key}: cannot parse {text!r}") from exc


def _parse_ints(text: str, key: str) -> tuple:
    try:
        return tuple(int(v) for v in str(text).split(","))
    except ValueError as exc:
        raise ConfigError(f"{key}: cannot parse {text!r}") from exc


def _load_config_section(path: str, section: str) -> dict:
    if not os.path.exists(path):
        raise ConfigError(f"config: file {path!r} does not exist")
    parser = configparser.ConfigParser()
    parser.read(path)
    if not parser.has_section(section):
        return {}
    return dict(parser.items(section))


def _resolve(args: argparse.Namespace, defaults: dict) -> dict:
    """defaults <- config file section <- explicit CLI flags."""
    options = dict(defaults)
    if getattr(args, "config", None):
        section = _load_config_section(args.config, args.command)
        for key, raw in section.items():
            key = key.replace("-", "_")
            if key not in defaults:
                raise ConfigError(f"{key}: unknown option for {args.command!r}")
            ref = defaults[key]
            if isinstance(ref, bool):
                options[key] = raw.strip().lower() in ("1", "true", "yes", "on")
            elif isinstance(ref, int) and not isinstance(ref, bool):
                options[key] = int(raw)
            elif isinstance(ref, float):
                options[key] = float(raw)
            else:
                options[key] = raw
    for key in defaults:
        val = getattr(args, key, None)
        if val is not None:
            options[key] = val
    return options


def _require_out(options: dict) -> str:
    out = options.get("out")
    if not out:
        raise ConfigError("out: an output directory is required")
    os.makedirs(out, exist_ok=True)
    return out


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

_SIMULATE_DEFAULTS = {
    "grid": "30x30",
    "radius": 6371.0,
    "beta": 0.1,
    "nu": 0.5,
    "sigma2": 1.0,
    "p": 1.0,
    "count": 10,
    "seed": 0,
    "csv": False,
    "out": "",
}


def _cmd_simulate(options: dict) -> list:
    out = _require_out(options)
    grid = _parse_grid(options["grid"], options["radius"])
    params = grf.MaternParams(options["sigma2"], options["beta"], options["nu"])
    samples = grf.sample_field(grid, params, options["count"], options["seed"])
    if options["p"] > 1.0:
        samples = [grf.transform_sample(s, options["p"]) for s in samples]
    elif options["p"] < 1.0:
        raise ConfigError("p: exponent must be >= 1")
    path = os.path.join(out, "fields.grfs")
    grf.write_grfs(path, samples)
    outputs = [path]
    if options["csv"]:
        csv_path = os.path.join(out, "fields.csv")
        grf.write_samples_csv(csv_path, samples)
        outputs.append(csv_path)
    return outputs


_FEATURES_DEFAULTS = {"input": "", "out": ""}


def _cmd_features(options: dict) -> list:
    out = _require_out(options)
    if not options["input"]:
        raise ConfigError("input: a GRFS container is required")
    samples = grf.read_grfs(options["input"])
    table = study.extract_features(samples)
    path = os.path.join(out, "features.csv")
    study.write_features_csv(path, table)
    return [path]


_TRAIN_DEFAULTS = {
    "features": "",
    "widths": "256,128",
    "dropout": 0.3,
    "epochs": 100,
    "batch": 128,
    "learning_rate": 1e-3,
    "seed": 0,
    "linear": False,
    "out": "",
}


def _cmd_train(options: dict) -> list:
    out = _require_out(options)
    if not options["features"]:
        raise ConfigError("features: a features CSV is required")
    table = study.read_features_csv(options["features"])
    widths = () if options["linear"] else _parse_ints(options["widths"], "widths")
    config = mlp.NetworkConfig(
        layer_widths=widths,
        dropout_rate=0.0 if options["linear"] else options["dropout"],
        learning_rate=options["learning_rate"],
        epochs=options["epochs"],
        batch_size=options["batch"],
        seed=options["seed"],
    )
    model = mlp.train(config, table.x, table.labels.astype(float))
    path = os.path.join(out, "linear_model.txt" if options["linear"] else "nn_model.txt")
    mlp.save_model(path, model)
    return [path]


_CALIBRATE_DEFAULTS = {
    "features": "",
    "model": "",
    "alpha": 0.05,
    "bandwidth": 0.3,
    "beta_scale": 0.0,  # 0 = rescale by the largest training beta
    "raw_beta_scale": False,  # disable rescaling: bandwidth applies to raw betas
    "out": "",
}


def _cmd_calibrate(options: dict) -> list:
    out = _require_out(options)
    for key in ("features", "model"):
        if not options[key]:
            raise ConfigError(f"{key}: required")
    table = study.read_features_csv(options["features"])
    model = mlp.load_model(options["model"])
    h0 = table.labels == 0
    if not h0.any():
        raise ConfigError("features: no H0 rows to calibrate on")
    scores = mlp.forward_batch(model, table.x)
    groups = {float(b): scores[h0 & (table.betas == b)] for b in np.unique(table.betas[h0])}
    if options["raw_beta_scale"]:
        scale = 1.0
    else:
        scale = options["beta_scale"] if options["beta_scale"] > 0.0 else None
    curve = cutoff_mod.fit_curve(groups, options["alpha"], options["bandwidth"], beta_scale=scale)
    path = os.path.join(out, "curve.csv")
    cutoff_mod.write_curve(path, curve)
    return [path]


_EVALUATE_DEFAULTS = {
    "samples": "",
    "features": "",
    "suite": "",
    "alpha": 0.05,
    "nu": 0.5,
    "beta_mode": "known",
    "methods": "nn,linear,depnorm",
    "out": "",
}


def _cmd_evaluate(options: dict) -> list:
    out = _require_out(options)
    for key in ("samples", "suite"):
        if not options[key]:
            raise ConfigError(f"{key}: required")
    samples = grf.read_grfs(options["samples"])
    if options["features"]:
        table = study.read_features_csv(options["features"])
    else:
        table = study.extract_features(samples)
    methods = tuple(options["methods"].split(","))
    suite = study.TrainedSuite.load(options["suite"], methods=tuple(m for m in methods if m != "depnorm"))
    table_out = study.evaluate(
        suite, samples, table, options["alpha"], options["nu"], beta_mode=options["beta_mode"], methods=methods
    )
    path = os.path.join(out, f"eval_{options['beta_mode']}.csv")
    table_out.write_csv(path)
    return [path]


_STUDY_DEFAULTS = {
    "preset": "desk",
    "seed": 0,
    "estimated": False,
    "sensitivity": False,
    "classical": True,
    "n_sample": 0,  # 0 = preset value
    "n_beta_train": 0,
    "n_beta_test": 0,
    "h0_multiplier": 0,
    "cross_nu": 0.0,
    "n_null_calibration": 2000,
    "out": "",
}


def _cmd_study(options: dict) -> list:
    out = _require_out(options)
    if options["preset"] not in ("desk", "paper"):
        raise ConfigError(f"preset: must be desk or paper, got {options['preset']!r}")
    overrides = {}
    for key in ("n_sample", "n_beta_train", "n_beta_test"):
        if options[key]:
            overrides[key] = options[key]
    if options["h0_multiplier"]:
        overrides["h0_multiplier"] = options["h0_multiplier"]
    if options["cross_nu"]:
        overrides["cross_nu"] = options["cross_nu"]
    factory = study.desk_config if options["preset"] == "desk" else study.paper_config
    config = factory(seed=options["seed"], **overrides)
    study.run_study(
        config,
        out,
        estimated=options["estimated"],
        sensitivity=options["sensitivity"],
        classical=options["classical"],
        n_null_calibration=options["n_null_calibration"],
    )
    outputs = [os.path.join(out, name) for name in sorted(os.listdir(out)) if name.endswith(".csv")]
    return outputs


_CLASSICAL_DEFAULTS = {
    "grid": "30x30",
    "radius": 6371.0,
    "nu": 0.5,
    "betas": "",  # empty = 0 and beta_max
    "effective_range": 0.7,
    "alpha": 0.05,
    "n_sample": 400,
    "n_null": 3000,
    "seed": 0,
    "out": "",
}


def _cmd_classical_type1(options: dict) -> list:
    out = _require_out(options)
    grid = _parse_grid(options["grid"], options["radius"])
    if options["betas"]:
        betas = _parse_floats(options["betas"], "betas")
    else:
        betas = (0.0, grf.beta_max(options["nu"], options["effective_range"]))
    crit = classical_critical_values(
        grid.size,
        options["alpha"],
        options["n_null"],
        options["seed"] + 7,
        cache_dir=os.path.join(out, "critval_cache"),
    )
    samples: list = []
    for i, beta in enumerate(betas):
        params = grf.MaternParams(1.0, beta, options["nu"])
        samples.extend(grf.sample_field(grid, params, options["n_sample"], (options["seed"], 3, i, 0)))
    table = study.extract_features(samples)
    eval_table = study.classical_type1(table, crit)
    path = os.path.join(out, "classical_type1.csv")
    eval_table.write_csv(path)
    return [path]


_DEPNORM_DEFAULTS = {"input": "", "alpha": 0.05, "window": 0, "out": ""}


def _cmd_depnorm_test(options: dict) -> list:
    out = _require_out(options)
    if not options["input"]:
        raise ConfigError("input: a GRFS container is required")
    samples = grf.read_grfs(options["input"])
    window = options["window"] or None
    path = os.path.join(out, "depnorm.csv")
    import csv as _csv

    with open(path, "w", newline="") as fh:
        writer = _csv.writer(fh, lineterminator="\n")
        writer.writerow(["sample", "stat", "skew_term", "kurt_term", "reject", "alpha", "window"])
        for i, s in enumerate(samples):
            res = depnorm.dep_normality_test(s.lattice(), options["alpha"], window)
            writer.writerow([i] + res.csv_row())
    return [path]


_MLE_DEFAULTS = {"input": "", "nu": 0.5, "free_nu": False, "out": ""}


def _cmd_mle_fit(options: dict) -> list:
    out = _require_out(options)
    if not options["input"]:
        raise ConfigError("input: a GRFS container is required")
    samples = grf.read_grfs(options["input"])
    path = os.path.join(out, "mle_fits.csv")
    import csv as _csv

    cache = mle.FactorCache(samples[0].grid) if samples else None
    with open(path, "w", newline="") as fh:
        writer = _csv.writer(fh, lineterminator="\n")
        writer.writerow(["sample_id", "sigma2", "beta", "nu", "loglik", "converged", "iterations"])
        for i, s in enumerate(samples):
            res = mle.fit(s.grid, s.values, nu=None if options["free_nu"] else options["nu"], cache=cache)
            writer.writerow(
                [
                    i,
                    repr(res.params.sigma2),
                    repr(res.params.beta),
                    repr(res.params.nu),
                    repr(res.log_likelihood),
                    int(res.converged),
                    res.iterations,
                ]
            )
    return [path]


_CLIMATE_DEFAULTS = {
    "input": "",
    "bank": "",
    "train_bank": False,
    "bank_nu": "0.5,1.0",
    "bank_n_beta": 6,
    "bank_n_sample": 20,
    "bank_epochs": 60,
    "blocks": "1,2,4,8",
    "alpha": 0.05,
    "max_p": 3,
    "max_q": 2,
    "max_timepoints": 0,
    "divide_by_sd": True,
    "seed": 0,
    "out": "",
}


def _cmd_climate(options: dict) -> list:
    out = _require_out(options)
    if not options["input"]:
        raise ConfigError("input: a GTS1 cube is required")
    series = climate.read_gts(options["input"])
    blocks = _parse_ints(options["blocks"], "blocks")
    outputs = []

    if options["bank"]:
        bank = climate.ClassifierBank.load(options["bank"])
    elif options["train_bank"]:
        settings = climate.BankSettings(
            nu_values=_parse_floats(options["bank_nu"], "bank_nu"),
            n_beta=options["bank_n_beta"],
            n_sample=options["bank_n_sample"],
            alpha=options["alpha"],
            network=mlp.NetworkConfig(
                layer_widths=(256, 128), dropout_rate=0.3, epochs=options["bank_epochs"], seed=options["seed"]
            ),
            seed=options["seed"],
        )
        bank = climate.train_bank(series.grid, blocks, settings)
        bank_dir = os.path.join(out, "bank")
        bank.save(bank_dir)
        outputs.append(os.path.join(bank_dir, "bank.txt"))
    else:
        raise ConfigError("bank: pass a trained bank directory or set train-bank")

    cube = climate.whiten_series(
        series, max_p=options["max_p"], max_q=options["max_q"], divide_by_sd=options["divide_by_sd"]
    )
    scan = climate.run_normality_scan(
        cube, bank, options["alpha"], blocks=blocks, max_timepoints=options["max_timepoints"] or None
    )
    rates_path = os.path.join(out, "rejection_rates.csv")
    scan.write_rates_csv(rates_path)
    dec_path = os.path.join(out, "decisions.csv")
    scan.write_decisions_csv(dec_path)
    outputs.extend([rates_path, dec_path])
    return outputs


_COMMANDS = {
    "simulate": (_cmd_simulate, _SIMULATE_DEFAULTS, "draw Matern Gaussian fields into a GRFS container"),
    "features": (_cmd_features, _FEATURES_DEFAULTS, "compute classifier input statistics for stored fields"),
    "train": (_cmd_train, _TRAIN_DEFAULTS, "train the network (or linear) classifier on a features file"),
    "calibrate": (_cmd_calibrate, _CALIBRATE_DEFAULTS, "fit the adaptive cutoff curve from H0 scores"),
    "evaluate": (_cmd_evaluate, _EVALUATE_DEFAULTS, "rejection rates of stored classifiers on stored fields"),
    "study": (_cmd_study, _STUDY_DEFAULTS, "run the full simulation study"),
    "classical-type1": (_cmd_classical_type1, _CLASSICAL_DEFAULTS, "classical-test Type I errors under dependence"),
    "depnorm-test": (_cmd_depnorm_test, _DEPNORM_DEFAULTS, "dependent-data skewness/kurtosis test per sample"),
    "mle-fit": (_cmd_mle_fit, _MLE_DEFAULTS, "Matern maximum-likelihood fits per sample"),
    "climate": (_cmd_climate, _CLIMATE_DEFAULTS, "whiten a gridded series and scan normality per timepoint"),
}


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="spatnorm", description=__doc__)
    parser.add_argument("--version", action="version", version=f"spatnorm {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, (_fn, defaults, help_text) in _COMMANDS.items():
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", help="INI file; section [%s] supplies defaults" % name)
        p.add_argument("--threads", type=int, default=None, help="worker cap (results are independent of it)")
        for key, ref in defaults.items():
            flag = "--" + key.replace("_", "-")
            if isinstance(ref, bool):
                p.add_argument(flag, dest=key, action="store_true", default=None)
            elif isinstance(ref, int):
                p.add_argument(flag, dest=key, type=int, default=None)
            elif isinstance(ref, float):
                p.add_argument(flag, dest=key, type=float, default=None)
            else:
                p.add_argument(flag, dest=key, default=None)
    return parser


def main(argv=None) -> int:
    argv = list(sys.argv[1:]) if argv is None else list(argv)
    parser = _build_parser()
    args = parser.parse_args(argv)
    fn, defaults, _help = _COMMANDS[args.command]
    started = time.perf_counter()
    try:
        options = _resolve(args, defaults)
        outputs = fn(options)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # runtime failure: structured line on stderr
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    timings = {"wall_s": round(time.perf_counter() - started, 3)}
    write_manifest(options["out"], args.command, argv, options, timings, outputs)
    return 0


if __name__ == "__main__":
    sys.exit(main())
