"""Hourly series data model, CSV I/O, gap filling, robust scaling and windowing.

Timestamps are held as ``numpy.datetime64[h]`` (naive UTC). The four
continuous features are stored in one float matrix so scaling and gap
filling stay vectorised; the two calendar flags live in a separate int8
matrix and are always recomputed from the holiday set, never interpolated.
"""

from __future__ import annotations

import csv
import logging
import warnings
from dataclasses import dataclass, field, replace
from datetime import date, datetime, timezone
from pathlib import Path
from typing import Iterator, Mapping

import numpy as np

logger = logging.getLogger(__name__)

CONTINUOUS = ("consumption", "temperature", "radiation_direct", "radiation_diffuse")
FLAGS = ("is_weekend_or_holiday", "is_holiday")
FEATURES = CONTINUOUS + FLAGS
CSV_HEADER = ("timestamp",) + CONTINUOUS
DATASET_EXTRA = ("season_id",) + FLAGS + ("anomaly_flag", "substituted")

SEASONS = ("S1", "S2", "S3")
ALL = "ALL"
# (month, day) at which each season starts; a season runs until the next start.
SEASON_STARTS = {"S1": (1, 1), "S2": (4, 15), "S3": (10, 15)}

HOUR = np.timedelta64(1, "h")
WEEK = np.timedelta64(168, "h")
MAX_INTERPOLATED_GAP = 6
DEFAULT_TEST_YEAR = 2019


class DataError(ValueError):
    """Malformed or inconsistent input data."""


class UnfillableGapError(DataError):
    pass


# ---------------------------------------------------------------------------
# calendar helpers


def years(ts: np.ndarray) -> np.ndarray:
    return ts.astype("datetime64[Y]").astype(np.int64) + 1970


def months(ts: np.ndarray) -> np.ndarray:
    return ts.astype("datetime64[M]").astype(np.int64) % 12 + 1


def days_of_month(ts: np.ndarray) -> np.ndarray:
    return (ts.astype("datetime64[D]") - ts.astype("datetime64[M]")).astype(np.int64) + 1


def hours_of_day(ts: np.ndarray) -> np.ndarray:
    return ts.astype(np.int64) % 24


def weekdays(ts: np.ndarray) -> np.ndarray:
    """Monday = 0 ... Sunday = 6."""
    # 1970-01-01 was a Thursday.
    return (ts.astype("datetime64[D]").astype(np.int64) + 3) % 7


def to_hour(value: datetime | date | str) -> np.datetime64:
    if isinstance(value, str):
        value = datetime.fromisoformat(value)
    if isinstance(value, datetime) and value.tzinfo is not None:
        value = value.astimezone(timezone.utc).replace(tzinfo=None)
    return np.datetime64(value, "h")


def format_hour(ts: np.datetime64) -> str:
    return str(np.datetime_as_string(ts, unit="m"))


# ---------------------------------------------------------------------------
# data model


@dataclass(frozen=True)
class HourlyRecord:
    timestamp: datetime
    consumption: float
    temperature: float
    radiation_direct: float
    radiation_diffuse: float
    is_weekend_or_holiday: int
    is_holiday: int


@dataclass
class MultiSeries:
    """An hourly multivariate series.

    ``values`` has one column per name in :data:`CONTINUOUS` (NaN marks a
    missing reading); ``flags`` has one column per name in :data:`FLAGS`.
    """

    timestamps: np.ndarray
    values: np.ndarray
    flags: np.ndarray
    origin: str = "unknown"
    holidays: frozenset = field(default_factory=frozenset)

    def __post_init__(self) -> None:
        self.timestamps = np.asarray(self.timestamps, dtype="datetime64[h]")
        self.values = np.asarray(self.values, dtype=np.float64).reshape(len(self.timestamps), len(CONTINUOUS))
        self.flags = np.asarray(self.flags, dtype=np.int8).reshape(len(self.timestamps), len(FLAGS))

    def __len__(self) -> int:
        return len(self.timestamps)

    def __getitem__(self, i: int) -> HourlyRecord:
        v, f = self.values[i], self.flags[i]
        return HourlyRecord(self.timestamps[i].astype(datetime), *map(float, v), *map(int, f))

    def records(self) -> Iterator[HourlyRecord]:
        for i in range(len(self)):
            yield self[i]

    @property
    def consumption(self) -> np.ndarray:
        return self.values[:, 0]

    @property
    def temperature(self) -> np.ndarray:
        return self.values[:, 1]

    @property
    def is_holiday(self) -> np.ndarray:
        return self.flags[:, 1]

    def features(self) -> np.ndarray:
        """(N, 6) feature matrix in :data:`FEATURES` order."""
        return np.hstack([self.values, self.flags.astype(np.float64)])

    def take(self, index: np.ndarray) -> "MultiSeries":
        return replace(self, timestamps=self.timestamps[index], values=self.values[index], flags=self.flags[index])

    def copy(self) -> "MultiSeries":
        return replace(self, timestamps=self.timestamps.copy(), values=self.values.copy(), flags=self.flags.copy())

    def check(self) -> None:
        """Raise :class:`DataError` if a series invariant is broken."""
        d = np.diff(self.timestamps)
        if np.any(d <= np.timedelta64(0, "h")):
            raise DataError("timestamps are not strictly increasing")
        if np.any(self.flags[:, 1] > self.flags[:, 0]):
            raise DataError("holiday hour without weekend-or-holiday flag")
        rad = self.values[:, 2:4]
        if np.any(rad[~np.isnan(rad)] < 0):
            raise DataError("negative radiation value")


@dataclass
class RobustScalerParams:
    median: np.ndarray
    iqr: np.ndarray
    features: tuple = CONTINUOUS
    degenerate: tuple = ()

    def transform(self, values: np.ndarray) -> np.ndarray:
        return (values - self.median) / self.iqr

    def inverse(self, values: np.ndarray) -> np.ndarray:
        return values * self.iqr + self.median

    def to_dict(self) -> dict:
        return {
            "features": list(self.features),
            "median": [float(x) for x in self.median],
            "iqr": [float(x) for x in self.iqr],
            "degenerate": list(self.degenerate),
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "RobustScalerParams":
        return cls(
            median=np.asarray(d["median"], dtype=np.float64),
            iqr=np.asarray(d["iqr"], dtype=np.float64),
            features=tuple(d.get("features", CONTINUOUS)),
            degenerate=tuple(d.get("degenerate", ())),
        )


@dataclass
class SeasonalDataset:
    """A season-filtered, scaled series plus per-record anomaly markers."""

    season_id: str
    series: MultiSeries
    scaler: RobustScalerParams
    anomaly_flags: np.ndarray | None = None
    substituted: np.ndarray | None = None

    def __post_init__(self) -> None:
        n = len(self.series)
        if self.anomaly_flags is None:
            self.anomaly_flags = np.zeros(n, dtype=bool)
        if self.substituted is None:
            self.substituted = np.zeros(n, dtype=bool)
        self.anomaly_flags = np.asarray(self.anomaly_flags, dtype=bool)
        self.substituted = np.asarray(self.substituted, dtype=bool)

    def __len__(self) -> int:
        return len(self.series)

    def copy(self) -> "SeasonalDataset":
        return SeasonalDataset(
            self.season_id, self.series.copy(), self.scaler, self.anomaly_flags.copy(), self.substituted.copy()
        )


@dataclass(frozen=True)
class WindowedSample:
    inputs: np.ndarray
    target: float
    target_time: np.datetime64


@dataclass
class Windows:
    """A batch of windowed samples stored as stacked arrays.

    ``inputs`` is (n, w, F); ``targets`` and ``target_times`` are (n,).
    ``target_index`` points back into the source dataset.
    """

    inputs: np.ndarray
    targets: np.ndarray
    target_times: np.ndarray
    target_index: np.ndarray

    def __len__(self) -> int:
        return len(self.targets)

    def __getitem__(self, i: int) -> WindowedSample:
        return WindowedSample(self.inputs[i], float(self.targets[i]), self.target_times[i])

    def take(self, index: np.ndarray) -> "Windows":
        return Windows(self.inputs[index], self.targets[index], self.target_times[index], self.target_index[index])


# ---------------------------------------------------------------------------
# ingestion


def _parse_float(text: str) -> float:
    text = text.strip()
    if text == "":
        return np.nan
    return float(text)


def _parse_timestamp(text: str) -> np.datetime64:
    dt = datetime.fromisoformat(text.strip())
    if dt.tzinfo is not None:
        dt = dt.astimezone(timezone.utc).replace(tzinfo=None)
    if dt.minute or dt.second or dt.microsecond:
        raise ValueError(f"timestamp {text!r} is not on the hour")
    return np.datetime64(dt, "h")


def ingest_csv(path: str | Path, schema: Mapping[str, str] | None = None, origin: str | None = None) -> MultiSeries:
    """Read an hourly CSV into a :class:`MultiSeries` sorted by time.

    ``schema`` maps field names (``timestamp`` and the names in
    :data:`CONTINUOUS`) to column headers in the file; unmapped fields use
    their own name. Empty fields are read as missing values.
    """
    schema = {name: name for name in CSV_HEADER} | dict(schema or {})
    path = Path(path)
    with path.open(newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise DataError(f"{path}: empty file") from None
        missing = [schema[n] for n in CSV_HEADER if schema[n] not in header]
        if missing:
            raise DataError(f"{path}: header lacks column(s) {', '.join(missing)}")
        cols = [header.index(schema[n]) for n in CSV_HEADER]
        stamps, rows = [], []
        for row in reader:
            line = reader.line_num
            if not row or all(not c.strip() for c in row):
                continue
            try:
                if len(row) < len(header):
                    raise ValueError(f"expected {len(header)} fields, got {len(row)}")
                stamps.append(_parse_timestamp(row[cols[0]]))
                rows.append([_parse_float(row[c]) for c in cols[1:]])
            except ValueError as exc:
                raise DataError(f"{path}: line {line}: {exc}") from None

    ts = np.array(stamps, dtype="datetime64[h]")
    values = np.array(rows, dtype=np.float64).reshape(len(ts), len(CONTINUOUS))
    order = np.argsort(ts, kind="stable")
    ts, values = ts[order], values[order]
    dup = np.flatnonzero(np.diff(ts) == np.timedelta64(0, "h"))
    if dup.size:
        raise DataError(f"{path}: duplicate timestamp {format_hour(ts[dup[0]])}")
    flags = np.zeros((len(ts), len(FLAGS)), dtype=np.int8)
    return MultiSeries(ts, values, flags, origin=origin or path.stem)


def read_holidays(path: str | Path) -> frozenset:
    out = set()
    for n, line in enumerate(Path(path).read_text().splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        try:
            out.add(date.fromisoformat(line))
        except ValueError:
            raise DataError(f"{path}: line {n}: bad date {line!r}") from None
    return frozenset(out)


def write_holidays(path: str | Path, holidays) -> None:
    lines = [d.isoformat() for d in sorted(holidays)]
    Path(path).write_text("# one ISO-8601 date per line\n" + "\n".join(lines) + "\n")


def write_series_csv(path: str | Path, series: MultiSeries) -> None:
    """Write a series in the plain input schema (raw units)."""
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CSV_HEADER)
        for t, v in zip(series.timestamps, series.values):
            w.writerow([format_hour(t)] + ["" if np.isnan(x) else repr(float(x)) for x in v])


# ---------------------------------------------------------------------------
# calendar and gaps


def calendar_flags(ts: np.ndarray, holidays) -> np.ndarray:
    days = ts.astype("datetime64[D]")
    hol_days = np.array(sorted(holidays), dtype="datetime64[D]") if holidays else np.array([], dtype="datetime64[D]")
    is_hol = np.isin(days, hol_days)
    weekend = weekdays(ts) >= 5
    return np.column_stack([weekend | is_hol, is_hol]).astype(np.int8)


def merge_calendar(series: MultiSeries, holidays) -> MultiSeries:
    holidays = frozenset(holidays)
    return replace(series, flags=calendar_flags(series.timestamps, holidays), holidays=holidays)


def _nan_runs(col: np.ndarray) -> list[tuple[int, int]]:
    """Half-open (start, stop) index ranges of consecutive NaNs."""
    isnan = np.concatenate([[False], np.isnan(col), [False]])
    d = np.diff(isnan.astype(np.int8))
    return list(zip(np.flatnonzero(d == 1), np.flatnonzero(d == -1)))


def _fill_column(col: np.ndarray, name: str) -> np.ndarray:
    col = col.copy()
    n = len(col)
    long_gaps = []
    for start, stop in _nan_runs(col):
        if stop - start <= MAX_INTERPOLATED_GAP and start > 0 and stop < n:
            left, right = col[start - 1], col[stop]
            frac = np.arange(1, stop - start + 1) / (stop - start + 1)
            col[start:stop] = left + frac * (right - left)
        else:
            long_gaps.append((start, stop))
    if not long_gaps:
        return col
    pending = np.concatenate([np.arange(a, b) for a, b in long_gaps])
    lag = 168
    while pending.size:
        before = pending.size
        for i in pending:
            if i >= lag and not np.isnan(col[i - lag]):
                col[i] = col[i - lag]
        for i in pending[::-1]:
            if np.isnan(col[i]) and i + lag < n and not np.isnan(col[i + lag]):
                col[i] = col[i + lag]
        pending = pending[np.isnan(col[pending])]
        if pending.size == before:
            raise UnfillableGapError(f"cannot fill {pending.size} missing {name} value(s)")
    return col


def fill_missing(series: MultiSeries) -> MultiSeries:
    """Complete the hourly grid and fill missing readings.

    Gaps of at most six hours are linearly interpolated; longer gaps copy
    the reading from one week earlier (or one week later when earlier data
    is unavailable).
    """
    if len(series) == 0:
        raise UnfillableGapError("empty series")
    ts0 = series.timestamps[0]
    n = int((series.timestamps[-1] - ts0) / HOUR) + 1
    grid = ts0 + np.arange(n) * HOUR
    values = np.full((n, len(CONTINUOUS)), np.nan)
    values[((series.timestamps - ts0) / HOUR).astype(np.int64)] = series.values
    if np.count_nonzero(~np.isnan(values[:, 0])) < 2:
        raise UnfillableGapError("fewer than two consumption readings")
    for j, name in enumerate(CONTINUOUS):
        if np.all(np.isnan(values[:, j])):
            raise UnfillableGapError(f"{name} is missing for the entire series")
        values[:, j] = _fill_column(values[:, j], name)
    return replace(series, timestamps=grid, values=values, flags=calendar_flags(grid, series.holidays))


# ---------------------------------------------------------------------------
# scaling


def fit_robust_scaler(series: MultiSeries, train_cutoff_year: int = DEFAULT_TEST_YEAR - 1) -> RobustScalerParams:
    """Per-feature median and IQR over records in years <= ``train_cutoff_year``.

    Quartiles interpolate linearly between order statistics. A feature with
    zero IQR gets an IQR of 1.0 and a warning.
    """
    train = series.values[years(series.timestamps) <= train_cutoff_year]
    if len(train) < 4:
        raise DataError(f"need at least 4 records up to {train_cutoff_year}, found {len(train)}")
    q1, med, q3 = np.nanpercentile(train, [25, 50, 75], axis=0, method="linear")
    iqr = q3 - q1
    degenerate = tuple(name for name, v in zip(CONTINUOUS, iqr) if not v > 0)
    if degenerate:
        warnings.warn(f"zero interquartile range for {', '.join(degenerate)}; using 1.0", stacklevel=2)
        iqr = np.where(iqr > 0, iqr, 1.0)
    return RobustScalerParams(median=med, iqr=iqr, degenerate=degenerate)


def apply_scaler(series: MultiSeries, params: RobustScalerParams) -> MultiSeries:
    return replace(series, values=params.transform(series.values))


def invert_scaler(value, params: RobustScalerParams):
    """Map scaled consumption back to raw units."""
    out = np.asarray(value, dtype=np.float64) * params.iqr[0] + params.median[0]
    return float(out) if out.ndim == 0 else out


# ---------------------------------------------------------------------------
# seasons, windows, splits


def season_of(ts: np.ndarray) -> np.ndarray:
    md = months(ts) * 100 + days_of_month(ts)
    s2 = SEASON_STARTS["S2"][0] * 100 + SEASON_STARTS["S2"][1]
    s3 = SEASON_STARTS["S3"][0] * 100 + SEASON_STARTS["S3"][1]
    return np.where(md < s2, "S1", np.where(md < s3, "S2", "S3"))


def split_seasons(series: MultiSeries, scaler: RobustScalerParams) -> dict[str, SeasonalDataset]:
    """Partition a (scaled) series into the three seasonal datasets."""
    labels = season_of(series.timestamps)
    return {s: SeasonalDataset(s, series.take(np.flatnonzero(labels == s)), scaler) for s in SEASONS}


def whole_dataset(series: MultiSeries, scaler: RobustScalerParams) -> SeasonalDataset:
    return SeasonalDataset(ALL, series.copy(), scaler)


def segments(ts: np.ndarray) -> list[tuple[int, int]]:
    """Half-open index ranges of hour-contiguous runs."""
    if len(ts) == 0:
        return []
    breaks = np.flatnonzero(np.diff(ts) != HOUR) + 1
    starts = np.concatenate([[0], breaks])
    stops = np.concatenate([breaks, [len(ts)]])
    return list(zip(starts.tolist(), stops.tolist()))


def make_windows(dataset: SeasonalDataset, w: int = 4) -> Windows:
    """Sliding windows of ``w`` hours with the following hour's consumption as target.

    Windows never cross a gap between contiguous segments.
    """
    if w < 1:
        raise ValueError("window width must be >= 1")
    feats = dataset.series.features()
    ts = dataset.series.timestamps
    idx = [np.arange(a, b - w) for a, b in segments(ts) if b - a > w]
    starts = np.concatenate(idx) if idx else np.zeros(0, dtype=np.int64)
    offsets = starts[:, None] + np.arange(w)[None, :]
    target_index = starts + w
    return Windows(
        inputs=feats[offsets].reshape(len(starts), w, feats.shape[1]),
        targets=feats[target_index, 0],
        target_times=ts[target_index],
        target_index=target_index,
    )


def split_train_test(samples: Windows, test_year: int = DEFAULT_TEST_YEAR) -> tuple[Windows, Windows]:
    is_test = years(samples.target_times) == test_year
    train, test = samples.take(np.flatnonzero(~is_test)), samples.take(np.flatnonzero(is_test))
    if len(train) == 0:
        warnings.warn("training set is empty", stacklevel=2)
    if len(test) == 0:
        warnings.warn(f"test set is empty (no targets in {test_year})", stacklevel=2)
    return train, test


# ---------------------------------------------------------------------------
# prepared-dataset files


def write_dataset_csv(path: str | Path, datasets) -> None:
    """Write one or more seasonal datasets (scaled values) to a single CSV."""
    if isinstance(datasets, SeasonalDataset):
        datasets = [datasets]
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CSV_HEADER + DATASET_EXTRA)
        for ds in datasets:
            s = ds.series
            for i in range(len(s)):
                w.writerow(
                    [format_hour(s.timestamps[i])]
                    + [repr(float(x)) for x in s.values[i]]
                    + [ds.season_id, int(s.flags[i, 0]), int(s.flags[i, 1])]
                    + [int(ds.anomaly_flags[i]), int(ds.substituted[i])]
                )


def read_dataset_csv(path: str | Path, scaler: RobustScalerParams, holidays=frozenset()) -> dict[str, SeasonalDataset]:
    """Inverse of :func:`write_dataset_csv`; returns datasets keyed by season id."""
    path = Path(path)
    groups: dict[str, list] = {}
    with path.open(newline="") as fh:
        reader = csv.DictReader(fh)
        need = set(CSV_HEADER) | {"season_id", "anomaly_flag"} | set(FLAGS)
        if not need <= set(reader.fieldnames or ()):
            raise DataError(f"{path}: not a prepared dataset (missing {sorted(need - set(reader.fieldnames or ()))})")
        for row in reader:
            try:
                groups.setdefault(row["season_id"], []).append(
                    (
                        _parse_timestamp(row["timestamp"]),
                        [float(row[c]) for c in CONTINUOUS],
                        [int(row[c]) for c in FLAGS],
                        int(row["anomaly_flag"]),
                        int(row.get("substituted") or 0),
                    )
                )
            except (ValueError, TypeError) as exc:
                raise DataError(f"{path}: line {reader.line_num}: {exc}") from None
    out = {}
    for sid, rows in groups.items():
        ts = np.array([r[0] for r in rows], dtype="datetime64[h]")
        series = MultiSeries(ts, [r[1] for r in rows], [r[2] for r in rows], origin=path.stem, holidays=holidays)
        out[sid] = SeasonalDataset(sid, series, scaler, [r[3] for r in rows], [r[4] for r in rows])
    return out


def combine(datasets: Mapping[str, SeasonalDataset]) -> SeasonalDataset:
    """Merge seasonal datasets back into one time-ordered ``ALL`` dataset."""
    parts = list(datasets.values())
    ts = np.concatenate([d.series.timestamps for d in parts])
    order = np.argsort(ts, kind="stable")
    first = parts[0].series
    series = MultiSeries(
        ts[order],
        np.concatenate([d.series.values for d in parts])[order],
        np.concatenate([d.series.flags for d in parts])[order],
        origin=first.origin,
        holidays=first.holidays,
    )
    return SeasonalDataset(
        ALL,
        series,
        parts[0].scaler,
        np.concatenate([d.anomaly_flags for d in parts])[order],
        np.concatenate([d.substituted for d in parts])[order],
    )
