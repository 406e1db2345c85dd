"""Command line entry point: ``fedccp {synth,train,eval,run,report}``.

Settings come from an optional YAML config (``--config``); any flag given on
the command line overrides the file. Exit codes: 0 success, 1 partial or total
failure of experiment stages, 2 configuration error.
"""

from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import replace
from pathlib import Path

import yaml

from .errors import ConfigError, FedCCPError
from .experiment import (METHODS, ExperimentConfig, MetricsReport, aggregate_rows, build_clients, emit_report,
                         evaluate_models, load_config, load_trained, missing_models, read_rows_csv, save_trained,
                         scenario_spec, train_models, write_aggregate_csvs, write_synth_dir)

log = logging.getLogger("fedccp")

EXIT_OK, EXIT_PARTIAL, EXIT_CONFIG = 0, 1, 2

# flag -> (section, field, type); section None means a top-level ExperimentConfig field
OVERRIDES = {
    "scenario": (None, "scenario", str),
    "scenario_file": (None, "scenario_file", str),
    "data_dir": (None, "data_dir", str),
    "dataset_schema": (None, "dataset_schema", str),
    "K": (None, "K", int),
    "d": (None, "d", int),
    "n_train": (None, "n_train", int),
    "n_calib": (None, "n_calib", int),
    "n_test": (None, "n_test", int),
    "alpha": (None, "alpha", float),
    "cond_dim": (None, "cond_dim", int),
    "cond_std": (None, "cond_std", float),
    "grid_points": (None, "grid_points", int),
    "grid_margin": (None, "grid_margin", float),
    "calibration_mode": (None, "calibration_mode", str),
    "n_reference_calib": (None, "n_reference_calib", int),
    "trials": (None, "trials", int),
    "seed": (None, "seed", int),
    "output_dir": (None, "output_dir", str),
    "rounds": ("fed", "rounds", int),
    "local_steps": ("fed", "local_steps", int),
    "batch_size": ("fed", "batch_size", int),
    "lr": ("fed", "lr", float),
    "clients_per_round": ("fed", "clients_per_round", int),
    "n_layers": ("fed", "n_layers", int),
    "hidden": ("fed", "hidden", int),
    "depth": ("fed", "depth", int),
    "scale_clamp": ("fed", "scale_clamp", float),
    "checkpoint_every": ("fed", "checkpoint_every", int),
    "quantile_steps": ("quantile", "steps", int),
    "quantile_hidden": ("quantile", "hidden", int),
    "baseline_steps": ("baseline_quantile", "steps", int),
}


def add_config_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="YAML file with ExperimentConfig fields")
    for name, (_, _, typ) in OVERRIDES.items():
        p.add_argument("--" + name.replace("_", "-"), dest=name, type=typ, default=None)
    p.add_argument("-o", "--out", dest="output_dir", default=None, help="output directory")
    p.add_argument("--methods", default=None, help=f"comma separated subset of {','.join(METHODS)}")
    p.add_argument("--per-batch-conditioner", action="store_true", default=None,
                   help="one conditioner draw per minibatch instead of per row")
    p.add_argument("--learn-cond-mean", action="store_true", default=None)
    p.add_argument("--export-sets", action="store_true", default=None, help="also write sets.csv")


def build_config(args) -> ExperimentConfig:
    config = load_config(args.config) if args.config else ExperimentConfig()
    for name, (section, fname, _) in OVERRIDES.items():
        value = getattr(args, name, None)
        if value is None:
            continue
        if section is None:
            config = replace(config, **{fname: value})
        else:
            config = replace(config, **{section: replace(getattr(config, section), **{fname: value})})
    if getattr(args, "methods", None) is not None:
        config = replace(config, methods=[m.strip() for m in args.methods.split(",") if m.strip()])
    if getattr(args, "per_batch_conditioner", None):
        config = replace(config, fed=replace(config.fed, per_sample_conditioner=False))
    if getattr(args, "learn_cond_mean", None):
        config = replace(config, fed=replace(config.fed, learn_cond_mean=True))
    if getattr(args, "export_sets", None):
        config = replace(config, export_sets=True)
    # a file-based data source replaces the default built-in scenario
    if config.scenario_file or config.data_dir or config.dataset_schema:
        if getattr(args, "scenario", None) is None:
            config = replace(config, scenario=None)
    config.validate()
    return config


def output_dir(config: ExperimentConfig) -> Path:
    if not config.output_dir:
        raise ConfigError("an output directory is required (--out)")
    return Path(config.output_dir)


def print_summary(aggs, out=None) -> None:
    out = out or sys.stdout
    header = f"{'method':<15}{'client':>7}{'n':>4}{'coverage':>18}{'set size':>20}"
    print(header, file=out)
    for a in aggs:
        cov = f"{a['coverage_mean']:.3f} +/- {a['coverage_std']:.3f}"
        size = f"{a['size_mean']:.3f} +/- {a['size_std']:.3f}"
        print(f"{a['method']:<15}{a['client']:>7}{a['n']:>4}{cov:>18}{size:>20}", file=out)
    if aggs:
        print(f"target coverage {aggs[0]['target_coverage']:.3f}; set sizes in standardized label units", file=out)


def finish(report: MetricsReport, outdir: Path) -> int:
    emit_report(report, outdir)
    print_summary(report.aggregates())
    if report.n_failed:
        total = len(report.rows)
        log.error("%d of %d result rows failed", report.n_failed, total)
        return EXIT_PARTIAL
    return EXIT_OK


def cmd_synth(args) -> int:
    config = build_config(args)
    if config.data_dir or config.dataset_schema:
        raise ConfigError("synth needs a built-in scenario or a scenario file")
    outdir = output_dir(config)
    for trial in range(config.trials):
        target = outdir if config.trials == 1 else outdir / f"trial{trial:03d}"
        files = write_synth_dir(scenario_spec(config, trial), target)
        print(f"wrote {len(files)} client files to {target}")
    return EXIT_OK


def cmd_train(args) -> int:
    config = build_config(args)
    outdir = output_dir(config)
    outdir.mkdir(parents=True, exist_ok=True)
    (outdir / "config.yaml").write_text(yaml.safe_dump(config.to_dict(), sort_keys=True))
    failures = 0
    for trial in range(config.trials):
        clients = build_clients(config, trial)
        trained = train_models(config, clients, trial)
        failures += len(trained.errors)
        save_trained(trained, outdir / "models" / f"trial{trial:03d}")
        print(f"trial {trial}: trained {', '.join(sorted(trained.flows)) or 'no flows'}")
    return EXIT_PARTIAL if failures else EXIT_OK


def cmd_eval(args) -> int:
    if args.config is None and args.models:
        snapshot = Path(args.models) / "config.yaml"
        if snapshot.exists():
            args.config = str(snapshot)
    config = build_config(args)
    models = Path(args.models) if args.models else output_dir(config)
    outdir = Path(config.output_dir) if config.output_dir else models
    report = MetricsReport(config, [])
    for trial in range(config.trials):
        trained = load_trained(models / "models" / f"trial{trial:03d}")
        missing = missing_models(config, trained)
        if missing:
            raise ConfigError(f"trial {trial}: no checkpoint for {', '.join(missing)}")
        clients = build_clients(config, trial)
        rows, sets = evaluate_models(config, clients, trained, trial)
        report.rows.extend(rows)
        if config.export_sets:
            report.sets.extend((trial, *s) for s in sets)
    return finish(report, outdir)


def cmd_run(args) -> int:
    from .experiment import run_experiment

    config = build_config(args)
    outdir = output_dir(config)
    report = run_experiment(config)
    return finish(report, outdir)


def cmd_report(args) -> int:
    rundir = Path(args.rundir)
    rows_path = rundir / "rows.csv"
    if not rows_path.exists():
        raise ConfigError(f"{rows_path} not found")
    rows = read_rows_csv(rows_path)
    alpha = args.alpha
    if alpha is None:
        snapshot = rundir / "config.yaml"
        alpha = ExperimentConfig.from_dict(yaml.safe_load(snapshot.read_text())).alpha if snapshot.exists() else 0.1
    write_aggregate_csvs(rundir, rows, alpha)
    print_summary(aggregate_rows(rows, alpha))
    failed = sum(r.status != "ok" for r in rows)
    return EXIT_PARTIAL if failed else EXIT_OK


def make_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fedccp", description="Federated conditional conformal prediction")
    parser.add_argument("-v", "--verbose", action="count", default=0)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="write synthetic scenario data as CSV")
    add_config_flags(p)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="fit quantile models and federated flows, write checkpoints")
    add_config_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="calibrate and test from checkpoints written by train")
    add_config_flags(p)
    p.add_argument("--models", help="directory given to train --out (default: --out)")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("run", help="end-to-end experiment")
    add_config_flags(p)
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("report", help="recompute aggregate and plot CSVs from rows.csv")
    p.add_argument("rundir")
    p.add_argument("--alpha", type=float, default=None)
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    parser = make_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_CONFIG if exc.code else EXIT_OK
    level = logging.WARNING - 10 * min(args.verbose, 2)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (FedCCPError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_PARTIAL


if __name__ == "__main__":
    sys.exit(main())
