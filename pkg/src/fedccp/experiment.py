"""End-to-end comparison of CQR-only, Fed-CCP without conditioner and Fed-CCP.

Per trial: build clients, fit the reference-space quantile model, train one
flow per flow-based method by federated averaging, calibrate per client, pull
test-point intervals back onto a label grid and record coverage and set size.
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Sequence

import numpy as np
import yaml

from .conformal import (CALIBRATION_MODES, GridSpec, PredictionSet, QuantileConfig, QuantileModel, calibrate,
                        coverage_and_size, fit_quantile_model, interval_sets, load_quantile_model,
                        save_quantile_model, train_quantile_model, transform_sets)
from .data import (CsvSchema, Dataset, ScenarioSpec, builtin_scenario, clients_from_csv, clients_from_splits,
                   generate_client_splits, load_scenario_file, read_yaml)
from .errors import ConfigError, FedCCPError
from .federated import ClientSpec, FedConfig, RoundLog, fed_train, write_round_log_csv
from .flow import FlowParams, ReferenceSpec, flow_forward, flow_nll, load_flow, save_flow
from .numerics import gaussian_sample, substream

log = logging.getLogger(__name__)

METHODS = ("cqr_only", "fedccp_nocond", "fedccp")
FLOW_METHODS = ("fedccp_nocond", "fedccp")


@dataclass
class ExperimentConfig:
    scenario: str | None = "response-shift"
    scenario_file: str | None = None
    data_dir: str | None = None
    dataset_schema: str | None = None
    split_fractions: tuple[float, float, float] = (0.6, 0.2, 0.2)
    K: int = 4
    d: int = 1
    n_train: int = 1000
    n_calib: int = 500
    n_test: int = 500
    alpha: float = 0.1
    methods: list[str] = field(default_factory=lambda: list(METHODS))
    fed: FedConfig = field(default_factory=FedConfig)
    quantile: QuantileConfig = field(default_factory=QuantileConfig)
    baseline_quantile: QuantileConfig = field(default_factory=lambda: QuantileConfig(hidden=64, steps=3000))
    cond_dim: int = 4
    cond_std: float = 0.1
    grid_points: int = 512
    grid_margin: float = 0.5
    calibration_mode: str = "transformed-client"
    n_reference_calib: int = 1000
    trials: int = 10
    seed: int = 0
    output_dir: str | None = None
    export_sets: bool = False

    def validate(self) -> None:
        if not 0.0 < self.alpha < 1.0:
            raise ConfigError(f"alpha must lie in (0, 1), got {self.alpha}")
        if self.trials < 1:
            raise ConfigError("trials must be >= 1")
        if not self.methods:
            raise ConfigError("method list is empty")
        bad = [m for m in self.methods if m not in METHODS]
        if bad:
            raise ConfigError(f"unknown methods {bad}; choose from {list(METHODS)}")
        if self.calibration_mode not in CALIBRATION_MODES:
            raise ConfigError(f"calibration_mode must be one of {CALIBRATION_MODES}")
        if self.grid_points < 2:
            raise ConfigError("grid_points must be >= 2")
        if self.cond_dim < 1 and "fedccp" in self.methods:
            raise ConfigError("fedccp needs cond_dim >= 1")
        sources = [s for s in (self.scenario_file, self.data_dir, self.dataset_schema) if s]
        if len(sources) > 1:
            raise ConfigError("give at most one of scenario_file, data_dir, dataset_schema")
        if not sources and not self.scenario:
            raise ConfigError("no data source configured")
        for src in sources:
            if not Path(src).exists():
                raise ConfigError(f"data source {src} does not exist")
        try:
            self.fed.validate(max(self.K, 1))
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc

    def to_dict(self, include_output: bool = False) -> dict:
        out = asdict(self)
        out["split_fractions"] = list(self.split_fractions)
        if not include_output:
            out.pop("output_dir")
        return out

    @classmethod
    def from_dict(cls, payload: dict) -> "ExperimentConfig":
        payload = dict(payload or {})
        known = {f.name for f in fields(cls)}
        unknown = set(payload) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        try:
            if "fed" in payload:
                payload["fed"] = FedConfig(**(payload["fed"] or {}))
            for key in ("quantile", "baseline_quantile"):
                if key in payload:
                    payload[key] = QuantileConfig(**(payload[key] or {}))
            if "split_fractions" in payload:
                payload["split_fractions"] = tuple(payload["split_fractions"])
            return cls(**payload)
        except TypeError as exc:
            raise ConfigError(f"bad config: {exc}") from exc


def load_config(path) -> ExperimentConfig:
    payload = read_yaml(path)
    if payload is not None and not isinstance(payload, dict):
        raise ConfigError(f"{path}: config must be a mapping")
    return ExperimentConfig.from_dict(payload)


def method_settings(config: ExperimentConfig, method: str) -> dict:
    """Effective settings a method runs with (used to audit the ablation)."""
    if method == "cqr_only":
        return {"method": method, "uses_flow": False, "alpha": config.alpha,
                "calibration": "pooled", "quantile": asdict(config.baseline_quantile)}
    return {"method": method, "uses_flow": True, "alpha": config.alpha,
            "calibration": config.calibration_mode, "quantile": asdict(config.quantile),
            "fed": asdict(config.fed), "cond_dim": config.cond_dim if method == "fedccp" else 0,
            "cond_std": config.cond_std}


# ---------------------------------------------------------------------------
# data


def trial_seed(config: ExperimentConfig, trial: int) -> int:
    return config.seed + trial


def scenario_spec(config: ExperimentConfig, trial: int) -> ScenarioSpec:
    seed = trial_seed(config, trial)
    if config.scenario_file:
        spec = load_scenario_file(config.scenario_file)
        spec.seed = spec.seed + seed
        return spec
    return builtin_scenario(config.scenario, K=config.K, d=config.d, n_train=config.n_train,
                            n_calib=config.n_calib, n_test=config.n_test, seed=seed)


def build_clients(config: ExperimentConfig, trial: int) -> list[ClientSpec]:
    seed = trial_seed(config, trial)
    if config.dataset_schema:
        schema = CsvSchema.from_file(config.dataset_schema)
        return clients_from_csv(schema, config.split_fractions, seed, config.cond_dim, config.cond_std)
    if config.data_dir:
        return clients_from_splits(load_synth_dir(config.data_dir), seed, config.cond_dim, config.cond_std)
    return clients_from_splits(generate_client_splits(scenario_spec(config, trial)), seed,
                               config.cond_dim, config.cond_std)


def write_synth_dir(spec: ScenarioSpec, outdir) -> list[Path]:
    """Write raw per-client splits as CSVs plus the scenario config."""
    outdir = Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    (outdir / "scenario.yaml").write_text(yaml.safe_dump(spec.to_dict(), sort_keys=False))
    written = []
    for k, parts in enumerate(generate_client_splits(spec)):
        for name, ds in zip(("train", "calib", "test"), parts):
            path = outdir / f"client{k:03d}_{name}.csv"
            with open(path, "w", newline="") as fh:
                writer = csv.writer(fh)
                writer.writerow(ds.feature_names + ["y"])
                for xrow, y in zip(ds.x, ds.y):
                    writer.writerow([repr(float(v)) for v in xrow] + [repr(float(y))])
            written.append(path)
    return written


def load_synth_dir(path) -> list[tuple[Dataset, Dataset, Dataset]]:
    path = Path(path)
    files = sorted(path.glob("client*_train.csv"))
    if not files:
        raise ConfigError(f"{path}: no client*_train.csv files")
    splits = []
    for train_file in files:
        stem = train_file.name[: -len("_train.csv")]
        parts = []
        for name in ("train", "calib", "test"):
            raw = np.loadtxt(path / f"{stem}_{name}.csv", delimiter=",", skiprows=1, ndmin=2)
            parts.append(Dataset(raw[:, :-1], raw[:, -1]))
        splits.append(tuple(parts))
    return splits


# ---------------------------------------------------------------------------
# training


@dataclass
class TrainedModels:
    reference_model: QuantileModel | None = None
    pooled_model: QuantileModel | None = None
    flows: dict[str, FlowParams] = field(default_factory=dict)
    round_logs: dict[str, list[RoundLog]] = field(default_factory=dict)
    errors: dict[str, str] = field(default_factory=dict)


def clients_for_method(clients: Sequence[ClientSpec], method: str) -> list[ClientSpec]:
    if method == "fedccp_nocond":
        return [c.without_conditioner() for c in clients]
    for c in clients:
        c.reset_streams()
    return list(clients)


def train_models(config: ExperimentConfig, clients: Sequence[ClientSpec], trial: int) -> TrainedModels:
    """Step 1 (reference quantile model) and step 2 (federated flows)."""
    seed = trial_seed(config, trial)
    out = TrainedModels()
    d = clients[0].d
    ref = ReferenceSpec.standard(d + 1)
    if "cqr_only" in config.methods:
        try:
            x = np.vstack([c.train.x for c in clients])
            y = np.concatenate([c.train.y for c in clients])
            out.pooled_model = fit_quantile_model(x, y, config.alpha, config.baseline_quantile,
                                                  substream(seed, "init", 1))
        except FedCCPError as exc:
            out.errors["cqr_only"] = str(exc)
    flow_methods = [m for m in FLOW_METHODS if m in config.methods]
    if flow_methods:
        out.reference_model = train_quantile_model(ref, config.alpha, config.quantile,
                                                   substream(seed, "reference", 0))
    for method in flow_methods:
        fed = replace(config.fed, seed=seed)
        try:
            flow, logs = fed_train(clients_for_method(clients, method), fed, ref)
        except FedCCPError as exc:
            log.warning("trial %d: %s training failed: %s", trial, method, exc)
            out.errors[method] = str(exc)
            continue
        out.flows[method] = flow
        out.round_logs[method] = logs
    return out


def save_trained(trained: TrainedModels, outdir) -> list[Path]:
    """Checkpoint one trial's models: quantile models, flows and round logs."""
    outdir = Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    written = []
    for name, model in (("reference", trained.reference_model), ("pooled", trained.pooled_model)):
        if model is not None:
            path = outdir / f"quantile_{name}.json"
            save_quantile_model(model, path)
            written.append(path)
    for method, flow in sorted(trained.flows.items()):
        path = outdir / f"flow_{method}.json"
        save_flow(flow, path)
        written.append(path)
        log_path = outdir / f"rounds_{method}.csv"
        write_round_log_csv(log_path, trained.round_logs.get(method, []))
        written.append(log_path)
    if trained.errors:
        path = outdir / "errors.yaml"
        path.write_text(yaml.safe_dump(trained.errors, sort_keys=True))
        written.append(path)
    return written


def load_trained(indir) -> TrainedModels:
    indir = Path(indir)
    if not indir.is_dir():
        raise ConfigError(f"{indir}: no checkpoint directory")
    out = TrainedModels()
    if (indir / "quantile_reference.json").exists():
        out.reference_model = load_quantile_model(indir / "quantile_reference.json")
    if (indir / "quantile_pooled.json").exists():
        out.pooled_model = load_quantile_model(indir / "quantile_pooled.json")
    for path in sorted(indir.glob("flow_*.json")):
        out.flows[path.stem[len("flow_"):]] = load_flow(path)
    if (indir / "errors.yaml").exists():
        out.errors = yaml.safe_load((indir / "errors.yaml").read_text()) or {}
    return out


def missing_models(config: ExperimentConfig, trained: TrainedModels) -> list[str]:
    """Methods in the config for which neither a model nor a recorded failure exists."""
    missing = []
    for m in config.methods:
        if m in trained.errors:
            continue
        if m == "cqr_only" and trained.pooled_model is None:
            missing.append(m)
        elif m in FLOW_METHODS and (m not in trained.flows or trained.reference_model is None):
            missing.append(m)
    return missing


# ---------------------------------------------------------------------------
# evaluation


@dataclass
class MetricRow:
    method: str
    client: int
    trial: int
    coverage: float
    avg_size: float
    n_test: int
    tau: float
    n_unbounded: int
    n_failed_cells: int
    flow_nll: float
    status: str = "ok"


ROW_FIELDS = tuple(f.name for f in fields(MetricRow))


def client_flow_points(flow: FlowParams, client: ClientSpec, ds: Dataset, rng) -> np.ndarray:
    etas = client.draw_conditioners(ds.n, rng)
    z, _ = flow_forward(flow, ds.xy, etas)
    return z


def evaluate_models(config: ExperimentConfig, clients: Sequence[ClientSpec], trained: TrainedModels,
                    trial: int) -> tuple[list[MetricRow], list[tuple[str, int, int, float, PredictionSet]]]:
    """Calibrate and test every method on every client."""
    seed = trial_seed(config, trial)
    rows: list[MetricRow] = []
    sets_out = []
    d = clients[0].d
    ref = ReferenceSpec.standard(d + 1)

    def failed(method, client_id):
        return MetricRow(method, client_id, trial, math.nan, math.nan, 0, math.nan, 0, 0, math.nan, "failed")

    for method in config.methods:
        if method in trained.errors:
            rows.extend(failed(method, c.id) for c in clients)
            continue
        if method == "cqr_only":
            model = trained.pooled_model
            xc = np.vstack([c.calib.x for c in clients])
            yc = np.concatenate([c.calib.y for c in clients])
            result = calibrate(model, xc, yc, config.alpha, mode="reference-samples")
            for c in clients:
                grid = GridSpec.from_labels(c.train.y, config.grid_points, config.grid_margin)
                sets = interval_sets(model, result, c.test.x, grid)
                cov, size = coverage_and_size(sets, c.test.y)
                rows.append(MetricRow(method, c.id, trial, cov, size, c.test.n, result.tau,
                                      c.test.n if result.unbounded else 0, 0, math.nan))
                sets_out.extend((method, c.id, i, float(y), s) for i, (y, s) in enumerate(zip(c.test.y, sets)))
            continue

        flow = trained.flows[method]
        model = trained.reference_model
        method_clients = clients_for_method(clients, method)
        ref_result = None
        if config.calibration_mode == "reference-samples":
            z = gaussian_sample(substream(seed, "reference", 1), ref.mean, ref.std, config.n_reference_calib)
            ref_result = calibrate(model, z[:, :d], z[:, d], config.alpha, mode="reference-samples")
        for c in method_clients:
            try:
                eval_rng = substream(seed, "eval", c.id)
                if ref_result is None:
                    z = client_flow_points(flow, c, c.calib, eval_rng)
                    result = calibrate(model, z[:, :d], z[:, d], config.alpha)
                else:
                    result = ref_result
                etas = c.draw_conditioners(c.test.n, eval_rng)
                grid = GridSpec.from_labels(c.train.y, config.grid_points, config.grid_margin)
                sets = transform_sets(flow, model, result, c.test.x, etas, grid)
                cov, size = coverage_and_size(sets, c.test.y)
                nll = flow_nll(flow, c.train.xy, c.draw_conditioners(c.train.n, eval_rng), ref)
            except FedCCPError as exc:
                log.warning("trial %d: %s evaluation failed on client %d: %s", trial, method, c.id, exc)
                rows.append(failed(method, c.id))
                continue
            rows.append(MetricRow(method, c.id, trial, cov, size, c.test.n, result.tau,
                                  c.test.n if result.unbounded else 0, sum(s.failures for s in sets), nll))
            sets_out.extend((method, c.id, i, float(y), s) for i, (y, s) in enumerate(zip(c.test.y, sets)))
    return rows, sets_out


# ---------------------------------------------------------------------------
# reports


@dataclass
class MetricsReport:
    config: ExperimentConfig
    rows: list[MetricRow]
    round_logs: dict[tuple[str, int], list[RoundLog]] = field(default_factory=dict)
    sets: list[tuple[int, str, int, int, float, PredictionSet]] = field(default_factory=list)

    @property
    def n_failed(self) -> int:
        return sum(r.status != "ok" for r in self.rows)

    def aggregates(self) -> list[dict]:
        return aggregate_rows(self.rows, self.config.alpha)


def _mean_std(values: Sequence[float]) -> tuple[float, float]:
    arr = np.asarray(values, dtype=float)
    if arr.size == 0:
        return math.nan, math.nan
    return float(arr.mean()), float(arr.std(ddof=1)) if arr.size > 1 else 0.0


def aggregate_rows(rows: Sequence[MetricRow], alpha: float) -> list[dict]:
    """Mean and sample std across trials per (method, client), plus client='all'.

    The 'all' row averages per-trial means over clients, so its std measures
    trial-to-trial spread.
    """
    ok = [r for r in rows if r.status == "ok"]
    methods = list(dict.fromkeys(r.method for r in rows))
    out = []
    for method in methods:
        mine = [r for r in ok if r.method == method]
        for client in sorted({r.client for r in mine}):
            sel = [r for r in mine if r.client == client]
            out.append(_agg_entry(method, str(client), [r.coverage for r in sel], [r.avg_size for r in sel],
                                  len(sel), alpha))
        trials = sorted({r.trial for r in mine})
        cov = [float(np.mean([r.coverage for r in mine if r.trial == t])) for t in trials]
        size = [float(np.mean([r.avg_size for r in mine if r.trial == t])) for t in trials]
        out.append(_agg_entry(method, "all", cov, size, len(trials), alpha))
    return out


def _agg_entry(method, client, cov, size, n, alpha) -> dict:
    cm, cs = _mean_std(cov)
    sm, ss = _mean_std(size)
    return {"method": method, "client": client, "n": n, "coverage_mean": cm, "coverage_std": cs,
            "size_mean": sm, "size_std": ss, "coverage_min": float(np.min(cov)) if cov else math.nan,
            "target_coverage": 1.0 - alpha}


AGG_FIELDS = ("method", "client", "n", "coverage_mean", "coverage_std", "size_mean", "size_std",
              "coverage_min", "target_coverage")
PLOT_FIELDS = ("panel", "method", "client", "value", "error", "target")


def _fmt(v):
    return repr(float(v)) if isinstance(v, (float, np.floating)) else str(v)


def write_rows_csv(path, rows: Sequence[MetricRow]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(ROW_FIELDS)
        for r in rows:
            writer.writerow([_fmt(getattr(r, f)) for f in ROW_FIELDS])


def read_rows_csv(path) -> list[MetricRow]:
    types = {f.name: f.type for f in fields(MetricRow)}
    out = []
    with open(path, newline="") as fh:
        for rec in csv.DictReader(fh):
            kw = {}
            for name in ROW_FIELDS:
                t = types[name]
                kw[name] = int(rec[name]) if t == "int" else float(rec[name]) if t == "float" else rec[name]
            out.append(MetricRow(**kw))
    return out


def write_aggregate_csvs(outdir, rows: Sequence[MetricRow], alpha: float) -> list[Path]:
    """Aggregate table plus long-format plot data (coverage and size panels)."""
    outdir = Path(outdir)
    aggs = aggregate_rows(rows, alpha)
    agg_path = outdir / "aggregate.csv"
    with open(agg_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(AGG_FIELDS)
        for a in aggs:
            writer.writerow([_fmt(a[f]) for f in AGG_FIELDS])
    plot_path = outdir / "plot_data.csv"
    with open(plot_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(PLOT_FIELDS)
        for a in aggs:
            writer.writerow(["coverage", a["method"], a["client"], _fmt(a["coverage_mean"]),
                             _fmt(a["coverage_std"]), _fmt(a["target_coverage"])])
        for a in aggs:
            writer.writerow(["set_size", a["method"], a["client"], _fmt(a["size_mean"]), _fmt(a["size_std"]), ""])
    return [agg_path, plot_path]


def emit_report(report: MetricsReport, outdir) -> list[Path]:
    """Write rows, aggregates, plot data, config snapshot and round logs."""
    if not report.rows:
        raise ConfigError("report has no rows")
    outdir = Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    written = [outdir / "rows.csv"]
    write_rows_csv(written[0], report.rows)
    written += write_aggregate_csvs(outdir, report.rows, report.config.alpha)
    snap = outdir / "config.yaml"
    snap.write_text(yaml.safe_dump(report.config.to_dict(), sort_keys=True))
    written.append(snap)
    if report.round_logs:
        logdir = outdir / "rounds"
        logdir.mkdir(exist_ok=True)
        for (method, trial), logs in sorted(report.round_logs.items()):
            path = logdir / f"{method}_trial{trial:03d}.csv"
            write_round_log_csv(path, logs)
            written.append(path)
    if report.sets:
        path = outdir / "sets.csv"
        by_trial = [(f"{m}:{t}", c, i, y, s) for t, m, c, i, y, s in report.sets]
        _write_sets(path, by_trial)
        written.append(path)
    return written


def _write_sets(path, records) -> None:
    """Prediction-set CSV with a leading method:trial key column."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(("method_trial", "client_id", "point_id", "y_true", "measure", "covered",
                         "accepted_intervals"))
        for key, client, point, y, ps in records:
            spans = ";".join(f"{a!r}:{b!r}" for a, b in ps.intervals())
            writer.writerow([key, client, point, repr(y), repr(ps.measure), int(ps.contains(y)), spans])


def run_trial(config: ExperimentConfig, trial: int):
    clients = build_clients(config, trial)
    trained = train_models(config, clients, trial)
    rows, sets = evaluate_models(config, clients, trained, trial)
    return rows, sets, trained


def run_experiment(config: ExperimentConfig) -> MetricsReport:
    """Run every trial; stage failures mark rows failed instead of aborting."""
    config.validate()
    report = MetricsReport(config, [])
    for trial in range(config.trials):
        try:
            rows, sets, trained = run_trial(config, trial)
        except FedCCPError as exc:
            log.warning("trial %d failed: %s", trial, exc)
            rows = [MetricRow(m, -1, trial, math.nan, math.nan, 0, math.nan, 0, 0, math.nan, "failed")
                    for m in config.methods]
            sets, trained = [], TrainedModels()
        report.rows.extend(rows)
        for method, logs in trained.round_logs.items():
            report.round_logs[(method, trial)] = logs
        if config.export_sets:
            report.sets.extend((trial, *s) for s in sets)
        log.info("trial %d done", trial)
    return report
