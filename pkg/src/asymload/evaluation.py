"""Under/overestimation RMSE, error histograms and experiment comparisons."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

DEFAULT_GROUPING = ("loss", "anomaly", "seasonality", "inject_rate")


@dataclass
class EvalReport:
    """Error summary of one model on one test set.

    ``under_rmse``/``over_rmse`` are ``None`` when no sample fell on that side.
    """

    under_rmse: float | None
    over_rmse: float | None
    n_under: int
    n_over: int
    n_exact: int
    histogram: list = field(default_factory=list)
    metadata: dict = field(default_factory=dict)

    @property
    def n_total(self) -> int:
        return self.n_under + self.n_over + self.n_exact

    def to_dict(self) -> dict:
        d = asdict(self)
        d["histogram"] = [list(b) for b in self.histogram]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "EvalReport":
        return cls(
            d["under_rmse"],
            d["over_rmse"],
            d["n_under"],
            d["n_over"],
            d["n_exact"],
            [tuple(b) for b in d.get("histogram", [])],
            dict(d.get("metadata", {})),
        )

    def write_json(self, path: str | Path, extra: dict | None = None) -> None:
        d = self.to_dict() | (extra or {})
        Path(path).write_text(json.dumps(d, indent=2, sort_keys=True) + "\n")


def split_rmse(predictions, targets) -> EvalReport:
    p = np.asarray(predictions, dtype=np.float64).ravel()
    t = np.asarray(targets, dtype=np.float64).ravel()
    if p.size != t.size:
        raise ValueError(f"{p.size} predictions for {t.size} targets")
    if p.size == 0:
        raise ValueError("no predictions to evaluate")
    e = p - t
    under, over = e[e < 0], e[e > 0]

    def rmse(x):
        return float(np.sqrt(np.mean(x * x))) if x.size else None

    return EvalReport(rmse(under), rmse(over), int(under.size), int(over.size), int(np.sum(e == 0)))


def _bin_index(e: float, width: float) -> int:
    k = math.floor(e / width)
    # Guard against rounding in e / width so every error sits in [k*w, (k+1)*w).
    if (k + 1) * width <= e:
        k += 1
    elif k * width > e:
        k -= 1
    return k


def error_histogram(errors, bin_width: float) -> list[tuple[float, float, int]]:
    """Uniform bins with an edge at zero, spanning the lowest to highest occupied bin."""
    if not bin_width > 0:
        raise ValueError("bin_width must be positive")
    e = np.asarray(errors, dtype=np.float64).ravel()
    if e.size == 0:
        return []
    ks = np.array([_bin_index(float(x), bin_width) for x in e])
    lo, hi = int(ks.min()), int(ks.max())
    counts = np.bincount(ks - lo, minlength=hi - lo + 1)
    return [(k * bin_width, (k + 1) * bin_width, int(c)) for k, c in zip(range(lo, hi + 1), counts)]


def write_histogram_csv(path: str | Path, histogram) -> None:
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["bin_lower", "bin_upper", "count"])
        for lo, hi, c in histogram:
            w.writerow([repr(float(lo)), repr(float(hi)), int(c)])


def percent_decrease(old: float, new: float) -> float:
    """``(old - new) / old`` as a percentage."""
    return 100.0 * (old - new) / old


def _mean(values) -> float | None:
    vals = [v for v in values if v is not None]
    return float(np.mean(vals)) if vals else None


@dataclass
class GroupRow:
    key: dict
    under_rmse: float | None
    over_rmse: float | None
    seasons: list


@dataclass
class Delta:
    axis: str
    old: object
    new: object
    key: dict
    under_pct: float | None
    over_pct: float | None


@dataclass
class Comparison:
    grouping: tuple
    rows: list
    deltas: list
    notices: list

    def row(self, **key) -> GroupRow:
        for r in self.rows:
            if all(r.key.get(k) == v for k, v in key.items()):
                return r
        raise KeyError(key)

    def to_dict(self) -> dict:
        return {
            "grouping": list(self.grouping),
            "rows": [asdict(r) for r in self.rows],
            "deltas": [asdict(d) for d in self.deltas],
            "notices": list(self.notices),
        }

    def write_csv(self, path: str | Path) -> None:
        with Path(path).open("w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(list(self.grouping) + ["under_rmse", "over_rmse", "seasons"])
            for r in self.rows:
                w.writerow(
                    [r.key.get(k) for k in self.grouping]
                    + [_fmt(r.under_rmse), _fmt(r.over_rmse), ";".join(r.seasons)]
                )

    def write_deltas_csv(self, path: str | Path) -> None:
        with Path(path).open("w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            others = [k for k in self.grouping]
            w.writerow(["axis", "old", "new"] + others + ["under_decrease_pct", "over_decrease_pct"])
            for d in self.deltas:
                w.writerow(
                    [d.axis, d.old, d.new] + [d.key.get(k) for k in others] + [_fmt(d.under_pct), _fmt(d.over_pct)]
                )


def _fmt(x) -> str:
    return "" if x is None else f"{x:.6g}"


def _pct(old, new):
    if old is None or new is None or old == 0:
        return None
    return percent_decrease(old, new)


def compare_experiments(
    reports: Iterable[EvalReport],
    grouping: Sequence[str] = DEFAULT_GROUPING,
    pairs: Sequence[tuple[str, object, object]] = (),
) -> Comparison:
    """Average per-season RMSEs within groups and compute paired decreases.

    ``pairs`` holds ``(axis, old_value, new_value)`` triples; for each group
    whose ``axis`` equals ``old_value`` the group with ``new_value`` and the
    same remaining keys is looked up and ``(old - new) / old`` reported.
    """
    grouping = tuple(grouping)
    groups: dict[tuple, list[EvalReport]] = {}
    for r in reports:
        key = tuple(r.metadata.get(k) for k in grouping)
        groups.setdefault(key, []).append(r)
    rows = [
        GroupRow(
            dict(zip(grouping, key)),
            _mean(r.under_rmse for r in rs),
            _mean(r.over_rmse for r in rs),
            [str(r.metadata.get("season", "?")) for r in rs],
        )
        for key, rs in groups.items()
    ]
    index = {tuple(r.key[k] for k in grouping): r for r in rows}
    deltas, notices = [], []
    for axis, old, new in pairs:
        if axis not in grouping:
            notices.append(f"delta axis {axis!r} is not a grouping key")
            continue
        pos = grouping.index(axis)
        for key, row in index.items():
            if key[pos] != old:
                continue
            partner_key = key[:pos] + (new,) + key[pos + 1 :]
            partner = index.get(partner_key)
            if partner is None:
                notices.append(f"no {axis}={new!r} group to pair with {dict(zip(grouping, key))}; delta omitted")
                continue
            deltas.append(
                Delta(
                    axis,
                    old,
                    new,
                    {k: v for k, v in zip(grouping, key) if k != axis},
                    _pct(row.under_rmse, partner.under_rmse),
                    _pct(row.over_rmse, partner.over_rmse),
                )
            )
    return Comparison(grouping, rows, deltas, notices)


def average_report(reports: Sequence[EvalReport], metadata: dict | None = None) -> EvalReport:
    """Season-averaged RMSEs with summed counts and merged histograms."""
    merged: dict[tuple, int] = {}
    for r in reports:
        for lo, hi, c in r.histogram:
            merged[(lo, hi)] = merged.get((lo, hi), 0) + c
    return EvalReport(
        _mean(r.under_rmse for r in reports),
        _mean(r.over_rmse for r in reports),
        sum(r.n_under for r in reports),
        sum(r.n_over for r in reports),
        sum(r.n_exact for r in reports),
        [(lo, hi, c) for (lo, hi), c in sorted(merged.items())],
        dict(metadata or {}),
    )
