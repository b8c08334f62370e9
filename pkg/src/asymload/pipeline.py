"""End-to-end experiment runner: data -> cleaning -> training -> evaluation.

A run is described by a flat :class:`ExperimentConfig`. :func:`run_pipeline`
executes the stages in order and writes every artifact under the output
directory together with a ``manifest.json`` of SHA-256 checksums;
:func:`run_matrix` sweeps the Cartesian product of a few config axes and
tabulates the season-averaged results.
"""

from __future__ import annotations

import contextlib
import dataclasses
import hashlib
import itertools
import json
import logging
import shutil
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import anomaly, lstm, synth
from .evaluation import (
    Comparison,
    EvalReport,
    average_report,
    compare_experiments,
    error_histogram,
    split_rmse,
    write_histogram_csv,
)
from .losses import LossSpec
from .timeseries import (
    ALL,
    SEASONS,
    DataError,
    RobustScalerParams,
    SeasonalDataset,
    Windows,
    apply_scaler,
    fill_missing,
    fit_robust_scaler,
    ingest_csv,
    invert_scaler,
    make_windows,
    merge_calendar,
    read_holidays,
    split_seasons,
    split_train_test,
    whole_dataset,
    write_dataset_csv,
)

logger = logging.getLogger(__name__)

SEASONALITY_MODES = ("split", "whole")
ANOMALY_MODES = ("off", "detect_substitute")
MATRIX_PAIRS = (
    ("anomaly", "off", "detect_substitute"),
    ("loss", "mse", "al1"),
    ("loss", "mse", "al2"),
    ("seasonality", "whole", "split"),
)


class ConfigError(ValueError):
    pass


class StageError(RuntimeError):
    def __init__(self, stage: str, cause: BaseException):
        super().__init__(f"stage {stage!r} failed: {cause}")
        self.stage = stage
        self.cause = cause


@dataclass
class ExperimentConfig:
    """Every knob of one run; keys mirror the JSON config file and CLI flags."""

    csv: str | None = None
    holidays: str | None = None
    synth: dict | None = None
    seasonality: str = "split"
    seasons: list = field(default_factory=lambda: list(SEASONS))
    anomaly: str = "detect_substitute"
    inject_rate: float | None = None
    inject_seed: int = 0
    inject_weather_share: float = 0.5
    inject_magnitude: float = 6.0
    eps: float = 0.11
    min_samples: int = 3
    loss: str = "mse"
    a: float = 5.0
    b: float = 2.0
    eps1: float = 0.005
    eps2: float = 0.01
    epochs: int = 100
    batch_size: int = 64
    learning_rate: float = 1e-3
    clip_norm: float | None = None
    hidden1: int = 64
    hidden2: int = 32
    dropout: float = 0.2
    activation: str = "identity"
    window: int = 4
    test_year: int = 2019
    bin_width: float = 0.02
    raw_units: bool = False
    seed: int = 0
    output_dir: str = "runs/default"
    workers: int = 1

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(d) - names)
        if unknown:
            raise ConfigError(f"unknown config key(s): {', '.join(unknown)}")
        cfg = cls(**d)
        cfg.validate()
        return cfg

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def replace(self, **changes) -> "ExperimentConfig":
        return ExperimentConfig.from_dict(self.to_dict() | changes)

    def validate(self, check_paths: bool = False) -> None:
        if (self.csv is None) == (self.synth is None):
            raise ConfigError("exactly one data source is required: 'csv' or 'synth'")
        if self.seasonality not in SEASONALITY_MODES:
            raise ConfigError(f"seasonality must be one of {SEASONALITY_MODES}")
        if self.anomaly not in ANOMALY_MODES:
            raise ConfigError(f"anomaly must be one of {ANOMALY_MODES}")
        bad = [s for s in self.seasons if s not in SEASONS]
        if bad or not self.seasons:
            raise ConfigError(f"seasons must be a non-empty subset of {SEASONS}")
        try:
            self.loss_spec()
            self.dbscan_params()
            self.synth_spec()
            self.injection(0)
            lstm.TrainConfig(self.epochs, self.batch_size)
        except (ValueError, TypeError) as exc:
            raise ConfigError(str(exc)) from None
        if not 0 <= self.dropout < 1:
            raise ConfigError("dropout must lie in [0, 1)")
        if self.window < 1 or self.hidden1 < 1 or self.hidden2 < 1:
            raise ConfigError("window and hidden sizes must be positive")
        if not self.bin_width > 0:
            raise ConfigError("bin_width must be positive")
        if check_paths:
            for p in (self.csv, self.holidays):
                if p is not None and not Path(p).exists():
                    raise ConfigError(f"no such file: {p}")

    def loss_spec(self) -> LossSpec:
        return LossSpec(self.loss, self.a, self.b, self.eps1, self.eps2)

    def dbscan_params(self) -> anomaly.DbscanParams:
        return anomaly.DbscanParams(self.eps, self.min_samples)

    def synth_spec(self) -> synth.SynthSpec | None:
        if self.synth is None:
            return None
        return synth.SynthSpec(**self.synth)

    def injection(self, offset: int) -> anomaly.InjectionSpec | None:
        if self.inject_rate is None:
            return None
        return anomaly.InjectionSpec(
            self.inject_rate, self.inject_seed + offset, self.inject_weather_share, self.inject_magnitude
        )

    def train_config(self) -> lstm.TrainConfig:
        return lstm.TrainConfig(
            self.epochs, self.batch_size, self.seed + 1, self.loss_spec(), self.learning_rate, self.clip_norm
        )

    def seeds(self) -> dict:
        return {"model": self.seed, "shuffle": self.seed + 1, "inject": self.inject_seed, "synth": (self.synth or {}).get("seed", 0)}


def load_config(path: str | Path) -> dict:
    try:
        d = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    if not isinstance(d, dict):
        raise ConfigError(f"{path}: config must be a JSON object")
    return d


def plan(config: ExperimentConfig) -> list[str]:
    """Human-readable stage list for ``--dry-run``."""
    src = f"csv {config.csv}" if config.csv else f"synthetic {config.synth_spec()}"
    seasons = config.seasons if config.seasonality == "split" else [ALL]
    steps = [
        f"load: {src}" + (f" + holidays {config.holidays}" if config.holidays else ""),
        "fill: interpolate gaps <= 6h, week-back copy otherwise",
        f"scale: robust scaler fitted on years <= {config.test_year - 1}",
        f"split: {config.seasonality} -> {', '.join(seasons)}",
    ]
    if config.inject_rate is not None:
        steps.append(f"inject: rate {config.inject_rate}, seed {config.inject_seed}+season index")
    if config.anomaly == "detect_substitute":
        steps.append(f"detect: DBSCAN eps={config.eps} min_samples={config.min_samples}, week-back substitution")
    steps += [
        f"window: width {config.window}, test year {config.test_year}",
        f"train: {config.loss_spec()}, {config.epochs} epochs, batch {config.batch_size}, seed {config.seed}",
        f"evaluate: bin width {config.bin_width}, {'raw' if config.raw_units else 'scaled'} units",
        f"output: {config.output_dir}",
    ]
    return steps


# ---------------------------------------------------------------------------
# stage building blocks (also used by the CLI stage commands)


def load_series(config: ExperimentConfig):
    if config.csv is not None:
        series = ingest_csv(config.csv)
        holidays = read_holidays(config.holidays) if config.holidays else frozenset()
    else:
        spec = config.synth_spec()
        series = synth.generate(spec)
        holidays = read_holidays(config.holidays) if config.holidays else series.holidays
    return merge_calendar(series, holidays)


def prepare(config: ExperimentConfig, series=None) -> tuple[dict[str, SeasonalDataset], RobustScalerParams]:
    """Fill, scale and split; returns datasets keyed by season id."""
    series = fill_missing(series if series is not None else load_series(config))
    scaler = fit_robust_scaler(series, config.test_year - 1)
    scaled = apply_scaler(series, scaler)
    if config.seasonality == "whole":
        return {ALL: whole_dataset(scaled, scaler)}, scaler
    parts = split_seasons(scaled, scaler)
    return {s: parts[s] for s in SEASONS if s in config.seasons}, scaler


def season_offset(season_id: str) -> int:
    return SEASONS.index(season_id) if season_id in SEASONS else 0


def clean_dataset(dataset: SeasonalDataset, config: ExperimentConfig) -> tuple[SeasonalDataset, np.ndarray]:
    return anomaly.detect_and_substitute(dataset, config.dbscan_params(), config.test_year - 1)


def windows_for(dataset: SeasonalDataset, config: ExperimentConfig) -> tuple[Windows, Windows]:
    return split_train_test(make_windows(dataset, config.window), config.test_year)


def fit_model(train: Windows, config: ExperimentConfig) -> tuple[lstm.LstmModel, list[float]]:
    model = lstm.init_model(
        train.inputs.shape[2], config.hidden1, config.hidden2, config.dropout, config.activation, config.seed
    )
    return lstm.train(model, train.inputs, train.targets, config.train_config())


def evaluate_model(
    model: lstm.LstmModel,
    test: Windows,
    scaler: RobustScalerParams,
    bin_width: float,
    raw_units: bool = False,
    metadata: dict | None = None,
) -> EvalReport:
    pred = lstm.predict(model, test.inputs)
    target = test.targets
    if raw_units:
        pred, target = invert_scaler(pred, scaler), invert_scaler(target, scaler)
    report = split_rmse(pred, target)
    report.histogram = error_histogram(pred - target, bin_width)
    report.metadata = dict(metadata or {}) | {"units": "raw" if raw_units else "scaled", "n_test": len(test)}
    return report


def report_metadata(config: ExperimentConfig, season: str) -> dict:
    return {
        "loss": config.loss,
        "anomaly": config.anomaly,
        "seasonality": config.seasonality,
        "inject_rate": config.inject_rate,
        "season": season,
        "seeds": config.seeds(),
    }


def sha256_file(path: Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


# ---------------------------------------------------------------------------
# run_pipeline


@dataclass
class PipelineResult:
    output_dir: Path
    reports: dict
    average: EvalReport | None
    manifest: dict
    detection: dict = field(default_factory=dict)


class _Run:
    def __init__(self, out: Path):
        self.out = out
        self.stages: list[dict] = []

    @contextlib.contextmanager
    def stage(self, name: str):
        record = {"name": name, "outputs": []}
        self.stages.append(record)
        try:
            yield record["outputs"]
        except Exception as exc:
            failed = self.out / "failed"
            failed.mkdir(parents=True, exist_ok=True)
            write_json(failed / "reason.json", {"stage": name, "error": f"{type(exc).__name__}: {exc}"})
            raise StageError(name, exc) from exc

    def path(self, rel: str) -> Path:
        p = self.out / rel
        p.parent.mkdir(parents=True, exist_ok=True)
        return p


def run_pipeline(config: ExperimentConfig) -> PipelineResult:
    config.validate(check_paths=True)
    out = Path(config.output_dir)
    if (out / "failed").exists():
        shutil.rmtree(out / "failed")
    out.mkdir(parents=True, exist_ok=True)
    run = _Run(out)
    tc = config.train_config()

    with run.stage("load") as outs:
        series = load_series(config)
    with run.stage("prepare") as outs:
        datasets, scaler = prepare(config, series)
        write_json(run.path("data/scaler.json"), scaler.to_dict() | {"holidays": sorted(d.isoformat() for d in series.holidays), "test_year": config.test_year})
        outs.append("data/scaler.json")

    truths: dict[str, frozenset] = {}
    if config.inject_rate is not None:
        with run.stage("inject") as outs:
            for sid, ds in datasets.items():
                datasets[sid], truths[sid] = anomaly.inject_outliers(ds, config.injection(season_offset(sid)))
                rel = f"data/truth_{sid}.json"
                write_json(run.path(rel), sorted(truths[sid]))
                outs.append(rel)

    detection = {}
    if config.anomaly == "detect_substitute":
        with run.stage("detect") as outs:
            for sid, ds in datasets.items():
                datasets[sid], flagged = clean_dataset(ds, config)
                info = {"season": sid, "flagged": flagged.tolist()}
                if sid in truths:
                    info |= anomaly.detection_scores(flagged, truths[sid])
                detection[sid] = info
                rel = f"detection/{sid}.json"
                write_json(run.path(rel), info)
                outs.append(rel)

    with run.stage("write-datasets") as outs:
        write_dataset_csv(run.path("data/datasets.csv"), list(datasets.values()))
        outs.append("data/datasets.csv")

    reports: dict[str, EvalReport] = {}
    for sid, ds in datasets.items():
        with run.stage(f"window:{sid}"):
            train_w, test_w = windows_for(ds, config)
        with run.stage(f"train:{sid}") as outs:
            model, trace = fit_model(train_w, config)
            rel = f"checkpoints/{sid}.ckpt"
            lstm.save_checkpoint(run.path(rel), model, checkpoint_metadata(config, sid, tc, len(train_w)))
            outs.append(rel)
        with run.stage(f"evaluate:{sid}") as outs:
            report = evaluate_model(model, test_w, scaler, config.bin_width, config.raw_units, report_metadata(config, sid))
            report.metadata["n_train"] = len(train_w)
            reports[sid] = report
            report.write_json(run.path(f"reports/{sid}.json"), {"loss_trace": trace, "config": config.to_dict()})
            write_histogram_csv(run.path(f"histograms/{sid}.csv"), report.histogram)
            outs += [f"reports/{sid}.json", f"histograms/{sid}.csv"]

    average = None
    if config.seasonality == "split":
        with run.stage("average") as outs:
            meta = report_metadata(config, "average") | {"seasons": list(reports)}
            average = average_report(list(reports.values()), meta)
            average.write_json(run.path("reports/average.json"))
            outs.append("reports/average.json")

    manifest = write_manifest(run, config)
    return PipelineResult(out, reports, average, manifest, detection)


def checkpoint_metadata(config: ExperimentConfig, season: str, tc: lstm.TrainConfig, n_train: int) -> dict:
    return {
        "season": season,
        "seasonality": config.seasonality,
        "anomaly": config.anomaly,
        "window": config.window,
        "test_year": config.test_year,
        "eps": config.eps,
        "min_samples": config.min_samples,
        "loss": tc.loss.to_dict(),
        "epochs": tc.epochs,
        "batch_size": tc.batch_size,
        "learning_rate": tc.learning_rate,
        "shuffle_seed": tc.shuffle_seed,
        "n_train": n_train,
    }


def write_manifest(run: _Run, config: ExperimentConfig) -> dict:
    files = {}
    for p in sorted(run.out.rglob("*")):
        rel = p.relative_to(run.out).as_posix()
        if p.is_file() and rel != "manifest.json" and not rel.startswith(("failed/", "cells/")):
            files[rel] = sha256_file(p)
    stages = [
        {"name": s["name"], "outputs": {rel: files[rel] for rel in s["outputs"] if rel in files}} for s in run.stages
    ]
    manifest = {"config": config.to_dict(), "seeds": config.seeds(), "stages": stages, "files": files}
    write_json(run.out / "manifest.json", manifest)
    return manifest


# ---------------------------------------------------------------------------
# run_matrix


@dataclass
class MatrixResult:
    cells: list
    reports: list
    comparison: Comparison
    failures: dict


def cell_name(cfg: ExperimentConfig) -> str:
    rate = "none" if cfg.inject_rate is None else f"{cfg.inject_rate:g}"
    return f"{cfg.loss}__{cfg.anomaly}__{cfg.seasonality}__inject-{rate}"


def _run_cell(cfg_dict: dict) -> tuple[str, list[dict] | None, str | None]:
    cfg = ExperimentConfig.from_dict(cfg_dict)
    name = cell_name(cfg)
    try:
        res = run_pipeline(cfg)
    except Exception as exc:  # one cell failing must not abort the sweep
        return name, None, f"{type(exc).__name__}: {exc}"
    return name, [r.to_dict() for r in res.reports.values()], None


def run_matrix(
    base: ExperimentConfig,
    losses=None,
    anomaly_modes=None,
    seasonality_modes=None,
    inject_rates=None,
    workers: int | None = None,
) -> MatrixResult:
    """Run the Cartesian product of the given axes and compare the results.

    An axis left as ``None`` keeps the base config's value.
    """
    axes = {
        "loss": list(losses) if losses is not None else [base.loss],
        "anomaly": list(anomaly_modes) if anomaly_modes is not None else [base.anomaly],
        "seasonality": list(seasonality_modes) if seasonality_modes is not None else [base.seasonality],
        "inject_rate": list(inject_rates) if inject_rates is not None else [base.inject_rate],
    }
    for k, v in axes.items():
        if not v:
            raise ConfigError(f"matrix axis {k!r} is empty")
    root = Path(base.output_dir)
    cells = []
    for values in itertools.product(*axes.values()):
        cfg = base.replace(**dict(zip(axes, values)))
        cfg = cfg.replace(output_dir=str(root / "cells" / cell_name(cfg)))
        cells.append(cfg)

    workers = workers or base.workers
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_run_cell, [c.to_dict() for c in cells]))
    else:
        results = [_run_cell(c.to_dict()) for c in cells]

    reports, failures = [], {}
    for name, rep, err in results:
        if err is not None:
            failures[name] = err
            logger.error("cell %s failed: %s", name, err)
        else:
            reports += [EvalReport.from_dict(r) for r in rep]
    comparison = compare_experiments(reports, pairs=MATRIX_PAIRS)
    root.mkdir(parents=True, exist_ok=True)
    write_json(root / "matrix_summary.json", comparison.to_dict() | {"failures": failures, "cells": [cell_name(c) for c in cells]})
    comparison.write_csv(root / "matrix_table.csv")
    comparison.write_deltas_csv(root / "matrix_deltas.csv")
    return MatrixResult(cells, reports, comparison, failures)


def read_scaler_sidecar(dataset_path: str | Path) -> tuple[RobustScalerParams, frozenset, int]:
    """Scaler, holidays and test year stored next to a prepared dataset CSV."""
    from datetime import date

    side = Path(str(dataset_path) + ".scaler.json")
    if not side.exists():
        side = Path(dataset_path).with_name("scaler.json")
    if not side.exists():
        raise DataError(f"no scaler sidecar found for {dataset_path}")
    d = json.loads(side.read_text())
    holidays = frozenset(date.fromisoformat(x) for x in d.get("holidays", []))
    return RobustScalerParams.from_dict(d), holidays, int(d.get("test_year", 2019))


def write_scaler_sidecar(dataset_path: str | Path, scaler: RobustScalerParams, holidays, test_year: int) -> Path:
    side = Path(str(dataset_path) + ".scaler.json")
    write_json(side, scaler.to_dict() | {"holidays": sorted(d.isoformat() for d in holidays), "test_year": test_year})
    return side
