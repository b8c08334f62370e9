"""Command-line entry point: ``asymload <subcommand> ...``.

Exit status is 0 on success, 1 for invalid configuration or input data and
2 when a pipeline stage fails.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path

from . import anomaly, lstm, synth
from .evaluation import write_histogram_csv
from .pipeline import (
    ConfigError,
    ExperimentConfig,
    StageError,
    checkpoint_metadata,
    clean_dataset,
    evaluate_model,
    fit_model,
    load_config,
    plan,
    read_scaler_sidecar,
    run_matrix,
    run_pipeline,
    season_offset,
    windows_for,
    write_scaler_sidecar,
)
from .timeseries import (
    ALL,
    DataError,
    apply_scaler,
    combine,
    fill_missing,
    fit_robust_scaler,
    ingest_csv,
    merge_calendar,
    read_dataset_csv,
    read_holidays,
    split_seasons,
    whole_dataset,
    write_dataset_csv,
    write_holidays,
    write_series_csv,
)

logger = logging.getLogger("asymload")

EXIT_OK, EXIT_INVALID, EXIT_STAGE = 0, 1, 2


def _csv_list(conv):
    def parse(text):
        return [None if x.strip().lower() in ("none", "null", "") else conv(x.strip()) for x in text.split(",")]

    return parse


def _bool(text: str) -> bool:
    if text.lower() in ("1", "true", "yes", "on"):
        return True
    if text.lower() in ("0", "false", "no", "off"):
        return False
    raise argparse.ArgumentTypeError(f"not a boolean: {text!r}")


def _optional(conv):
    def parse(text):
        return None if text.lower() in ("none", "null") else conv(text)

    return parse


_FIELD_TYPES = {
    "synth": json.loads,
    "seasons": lambda s: [x.strip() for x in s.split(",") if x.strip()],
    "raw_units": _bool,
    "inject_rate": _optional(float),
    "clip_norm": _optional(float),
    "csv": _optional(str),
    "holidays": _optional(str),
}


def add_config_flags(p: argparse.ArgumentParser) -> None:
    """One ``--key`` override per :class:`ExperimentConfig` field."""
    p.add_argument("--config", help="JSON config file")
    p.add_argument("--dry-run", action="store_true", help="print the resolved plan and exit")
    g = p.add_argument_group("config overrides")
    for f in dataclasses.fields(ExperimentConfig):
        conv = _FIELD_TYPES.get(f.name) or {"int": int, "float": float, "str": str}.get(str(f.type).split(" ")[0], str)
        g.add_argument("--" + f.name.replace("_", "-"), dest="cfg_" + f.name, type=conv, default=argparse.SUPPRESS)


def resolve_config(args) -> ExperimentConfig:
    d = load_config(args.config) if getattr(args, "config", None) else {}
    overrides = {k[4:]: v for k, v in vars(args).items() if k.startswith("cfg_")}
    d = d | overrides
    if "csv" in overrides and "synth" not in overrides:
        d.pop("synth", None)
    if d.get("csv") is None and d.get("synth") is None:
        d["synth"] = {}
    return ExperimentConfig.from_dict(d)


# ---------------------------------------------------------------------------
# subcommands


def cmd_run(args) -> int:
    cfg = resolve_config(args)
    if args.dry_run:
        print("\n".join(plan(cfg)))
        return EXIT_OK
    res = run_pipeline(cfg)
    for sid, r in res.reports.items():
        print(f"{sid}\tunder_rmse={_f(r.under_rmse)}\tover_rmse={_f(r.over_rmse)}")
    if res.average is not None:
        print(f"average\tunder_rmse={_f(res.average.under_rmse)}\tover_rmse={_f(res.average.over_rmse)}")
    print(f"wrote {res.output_dir / 'manifest.json'}")
    return EXIT_OK


def cmd_matrix(args) -> int:
    cfg = resolve_config(args)
    axes = dict(
        losses=args.losses,
        anomaly_modes=args.anomaly_modes,
        seasonality_modes=args.seasonality_modes,
        inject_rates=args.inject_rates,
    )
    if args.dry_run:
        for k, v in axes.items():
            print(f"{k}: {v if v is not None else 'base'}")
        print("\n".join(plan(cfg)))
        return EXIT_OK
    res = run_matrix(cfg, workers=args.workers, **axes)
    for row in res.comparison.rows:
        key = " ".join(f"{k}={v}" for k, v in row.key.items())
        print(f"{key}\tunder_rmse={_f(row.under_rmse)}\tover_rmse={_f(row.over_rmse)}")
    for name, err in res.failures.items():
        print(f"FAILED {name}: {err}", file=sys.stderr)
    return EXIT_STAGE if res.failures else EXIT_OK


def cmd_synth(args) -> int:
    settings = json.loads(args.spec) if args.spec else {}
    for key in ("start_year", "end_year", "seed"):
        if getattr(args, key) is not None:
            settings[key] = getattr(args, key)
    spec = synth.SynthSpec(**settings)
    series = synth.generate(spec)
    write_series_csv(args.out_csv, series)
    write_holidays(args.holidays_out, series.holidays)
    print(f"wrote {len(series)} rows to {args.out_csv} and {len(series.holidays)} holidays to {args.holidays_out}")
    return EXIT_OK


def cmd_ingest(args) -> int:
    series = ingest_csv(args.csv)
    holidays = read_holidays(args.holidays) if args.holidays else frozenset()
    series = fill_missing(merge_calendar(series, holidays))
    scaler = fit_robust_scaler(series, args.test_year - 1)
    scaled = apply_scaler(series, scaler)
    if args.no_season_split:
        datasets = [whole_dataset(scaled, scaler)]
    else:
        datasets = list(split_seasons(scaled, scaler).values())
    write_dataset_csv(args.out, datasets)
    side = write_scaler_sidecar(args.out, scaler, holidays, args.test_year)
    print(f"wrote {sum(len(d) for d in datasets)} rows to {args.out} (scaler: {side})")
    return EXIT_OK


def _load_prepared(path):
    scaler, holidays, test_year = read_scaler_sidecar(path)
    return read_dataset_csv(path, scaler, holidays), scaler, holidays, test_year


def cmd_inject(args) -> int:
    datasets, scaler, holidays, test_year = _load_prepared(args.dataset)
    truth = {}
    for sid, ds in datasets.items():
        spec = anomaly.InjectionSpec(args.rate, args.seed + season_offset(sid), args.weather_share, args.magnitude)
        datasets[sid], t = anomaly.inject_outliers(ds, spec)
        truth[sid] = sorted(t)
    write_dataset_csv(args.out, list(datasets.values()))
    write_scaler_sidecar(args.out, scaler, holidays, test_year)
    if args.truth:
        Path(args.truth).write_text(json.dumps(truth, indent=2, sort_keys=True) + "\n")
    print(f"injected {sum(map(len, truth.values()))} outliers into {args.out}")
    return EXIT_OK


def cmd_detect(args) -> int:
    datasets, scaler, holidays, test_year = _load_prepared(args.dataset)
    truth = json.loads(Path(args.truth).read_text()) if args.truth else {}
    params = anomaly.DbscanParams(args.eps, args.min_samples)
    report = {"eps": args.eps, "min_samples": args.min_samples, "seasons": {}}
    for sid, ds in datasets.items():
        if args.inject_rate is not None:
            spec = anomaly.InjectionSpec(args.inject_rate, args.inject_seed + season_offset(sid))
            ds, t = anomaly.inject_outliers(ds, spec)
            truth[sid] = sorted(t)
        datasets[sid], flagged = anomaly.detect_and_substitute(ds, params, test_year - 1)
        entry = {"flagged": flagged.tolist()}
        if sid in truth:
            entry |= anomaly.detection_scores(flagged, truth[sid])
        report["seasons"][sid] = entry
        print(f"{sid}\tflagged={len(flagged)}" + (f"\trecall={_f(entry['recall'])}\tprecision={_f(entry['precision'])}" if sid in truth else ""))
    if args.report:
        Path(args.report).write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")
    if args.out:
        write_dataset_csv(args.out, list(datasets.values()))
        write_scaler_sidecar(args.out, scaler, holidays, test_year)
    return EXIT_OK


def _select(datasets, season, no_split):
    if no_split:
        return {ALL: combine(datasets) if ALL not in datasets else datasets[ALL]}
    if season:
        if season not in datasets:
            raise DataError(f"season {season} not present in dataset (have {', '.join(sorted(datasets))})")
        return {season: datasets[season]}
    return datasets


def cmd_train(args) -> int:
    cfg = resolve_config(args)
    datasets, scaler, holidays, test_year = _load_prepared(args.dataset)
    cfg = cfg.replace(test_year=test_year, anomaly="off" if args.skip_anomaly_removal else "detect_substitute")
    chosen = _select(datasets, args.season, args.no_season_split)
    out = Path(args.checkpoint_out)
    many = len(chosen) > 1
    if many:
        out.mkdir(parents=True, exist_ok=True)
    for sid, ds in chosen.items():
        if not args.skip_anomaly_removal:
            ds, _ = clean_dataset(ds, cfg)
        train_w, _ = windows_for(ds, cfg)
        model, trace = fit_model(train_w, cfg)
        path = out / f"{sid}.ckpt" if many else out
        meta = checkpoint_metadata(cfg, sid, cfg.train_config(), len(train_w)) | {"loss_trace": trace}
        lstm.save_checkpoint(path, model, meta)
        print(f"{sid}\tfinal_loss={trace[-1]:.6g}\t{path}")
    return EXIT_OK


def cmd_evaluate(args) -> int:
    model, meta = lstm.load_checkpoint(args.checkpoint)
    datasets, scaler, holidays, _ = _load_prepared(args.dataset)
    season = meta.get("season", ALL)
    ds = _select(datasets, None if season == ALL else season, season == ALL)[season]
    cfg = ExperimentConfig(
        synth={},
        eps=meta.get("eps", 0.11),
        min_samples=meta.get("min_samples", 3),
        window=meta.get("window", 4),
        test_year=meta.get("test_year", 2019),
    )
    if meta.get("anomaly") == "detect_substitute":
        ds, _ = clean_dataset(ds, cfg)
    _, test_w = windows_for(ds, cfg)
    metadata = {
        "loss": meta.get("loss", {}).get("kind"),
        "anomaly": meta.get("anomaly"),
        "seasonality": meta.get("seasonality"),
        "season": season,
        "checkpoint": str(args.checkpoint),
    }
    report = evaluate_model(model, test_w, scaler, args.bin_width, args.raw_units, metadata)
    report_path = Path(args.report or Path(args.checkpoint).with_suffix(".report.json"))
    report.write_json(report_path)
    hist_path = Path(args.histogram or report_path.with_suffix(".hist.csv"))
    write_histogram_csv(hist_path, report.histogram)
    print(f"{season}\tunder_rmse={_f(report.under_rmse)}\tover_rmse={_f(report.over_rmse)}\t{report_path}")
    return EXIT_OK


def _f(x) -> str:
    return "absent" if x is None else f"{x:.6g}"


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="asymload", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="run the full pipeline from a config")
    add_config_flags(p)
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("matrix", help="sweep losses / anomaly modes / seasonality / injection rates")
    add_config_flags(p)
    p.add_argument("--losses", type=_csv_list(str))
    p.add_argument("--anomaly-modes", type=_csv_list(str))
    p.add_argument("--seasonality-modes", type=_csv_list(str))
    p.add_argument("--inject-rates", type=_csv_list(float))
    p.set_defaults(func=cmd_matrix)

    p = sub.add_parser("synth", help="write a synthetic input CSV and holiday file")
    p.add_argument("--out-csv", required=True)
    p.add_argument("--holidays-out", required=True)
    p.add_argument("--start-year", type=int)
    p.add_argument("--end-year", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--spec", help="JSON object of generator settings")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("ingest", help="ingest, fill, scale and season-split a CSV")
    p.add_argument("--csv", required=True)
    p.add_argument("--holidays")
    p.add_argument("--out", required=True)
    p.add_argument("--test-year", type=int, default=2019)
    p.add_argument("--no-season-split", action="store_true")
    p.set_defaults(func=cmd_ingest)

    p = sub.add_parser("inject-outliers", help="inject synthetic outliers into a prepared dataset")
    p.add_argument("--dataset", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--rate", type=float, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--weather-share", type=float, default=0.5)
    p.add_argument("--magnitude", type=float, default=6.0)
    p.add_argument("--truth", help="write injected indices per season (JSON)")
    p.set_defaults(func=cmd_inject)

    p = sub.add_parser("detect", help="DBSCAN detection and week-back substitution")
    p.add_argument("--dataset", required=True)
    p.add_argument("--eps", type=float, default=0.11)
    p.add_argument("--min-samples", type=int, default=3)
    p.add_argument("--inject-rate", type=float)
    p.add_argument("--inject-seed", type=int, default=0)
    p.add_argument("--truth", help="ground-truth JSON from inject-outliers")
    p.add_argument("--report")
    p.add_argument("--out", help="write the cleaned dataset")
    p.set_defaults(func=cmd_detect)

    p = sub.add_parser("train", help="train an LSTM on a prepared dataset")
    p.add_argument("--dataset", required=True)
    p.add_argument("--season")
    p.add_argument("--no-season-split", action="store_true")
    p.add_argument("--skip-anomaly-removal", action="store_true")
    p.add_argument("--checkpoint-out", required=True)
    add_config_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", help="evaluate a checkpoint on the test year")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--dataset", required=True)
    p.add_argument("--bin-width", type=float, default=0.02)
    p.add_argument("--raw-units", action="store_true")
    p.add_argument("--report")
    p.add_argument("--histogram")
    p.set_defaults(func=cmd_evaluate)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ConfigError, DataError, ValueError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except StageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_STAGE
    except Exception as exc:  # noqa: BLE001
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_STAGE


if __name__ == "__main__":
    sys.exit(main())
