"""DBSCAN-based anomaly detection and week-back substitution on scaled consumption."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .timeseries import WEEK, SeasonalDataset, hours_of_day, years

NOISE = -1


class UnresolvableSubstitutionError(RuntimeError):
    pass


@dataclass(frozen=True)
class DbscanParams:
    eps: float = 0.11
    min_samples: int = 3

    def __post_init__(self) -> None:
        if not self.eps > 0:
            raise ValueError("eps must be positive")
        if self.min_samples < 1:
            raise ValueError("min_samples must be >= 1")


@dataclass
class ClusterLabeling:
    labels: np.ndarray
    main_cluster: int | None

    @property
    def n_clusters(self) -> int:
        return int(self.labels.max()) + 1 if self.labels.size else 0


@dataclass(frozen=True)
class InjectionSpec:
    rate: float
    seed: int = 0
    weather_share: float = 0.5
    magnitude: float = 6.0

    def __post_init__(self) -> None:
        if not 0 < self.rate < 1:
            raise ValueError("injection rate must lie in (0, 1)")
        if not 0 <= self.weather_share <= 1:
            raise ValueError("weather_share must lie in [0, 1]")


def dbscan(points, params: DbscanParams = DbscanParams()) -> ClusterLabeling:
    """Cluster 1-D values with DBSCAN.

    A point is core when at least ``min_samples`` points (itself included)
    lie within ``eps``. Core points closer than ``eps`` share a cluster. A
    non-core point within ``eps`` of a core joins the cluster of its
    nearest core (the lower-valued core on a tie), which keeps the partition
    independent of input order. Cluster ids follow the input position of
    each cluster's first core point.
    """
    x = np.asarray(points, dtype=np.float64).ravel()
    n = x.size
    labels = np.full(n, NOISE, dtype=np.int64)
    if n == 0:
        return ClusterLabeling(labels, None)

    order = np.argsort(x, kind="stable")
    xs = x[order]
    lo = np.searchsorted(xs, xs - params.eps, side="left")
    hi = np.searchsorted(xs, xs + params.eps, side="right")
    core = (hi - lo) >= params.min_samples
    core_pos = np.flatnonzero(core)
    if core_pos.size == 0:
        return ClusterLabeling(labels, None)

    # In 1-D, sorted core points split into clusters wherever the gap exceeds eps.
    core_vals = xs[core_pos]
    comp = np.concatenate([[0], np.cumsum(np.diff(core_vals) > params.eps)])

    sorted_comp = np.full(n, -1, dtype=np.int64)
    sorted_comp[core_pos] = comp
    border = np.flatnonzero(~core)
    if border.size:
        bv = xs[border]
        right = np.searchsorted(core_vals, bv, side="left")
        left = right - 1
        dl = np.where(left >= 0, bv - core_vals[np.clip(left, 0, None)], np.inf)
        dr = np.where(right < core_vals.size, core_vals[np.clip(right, None, core_vals.size - 1)] - bv, np.inf)
        pick_left = dl <= dr
        nearest = np.where(pick_left, left, right)
        dist = np.where(pick_left, dl, dr)
        ok = dist <= params.eps
        sorted_comp[border[ok]] = comp[nearest[ok]]

    raw = np.empty(n, dtype=np.int64)
    raw[order] = sorted_comp
    is_core = np.empty(n, dtype=bool)
    is_core[order] = core

    # Renumber components by first core occurrence in input order.
    first_core = {}
    for i in np.flatnonzero(is_core):
        first_core.setdefault(int(raw[i]), len(first_core))
    mapping = np.full(comp.max() + 1, NOISE, dtype=np.int64)
    for c, new in first_core.items():
        mapping[c] = new
    labels = np.where(raw >= 0, mapping[np.clip(raw, 0, None)], NOISE)

    sizes = np.bincount(labels[labels >= 0], minlength=len(first_core))
    return ClusterLabeling(labels, int(np.argmax(sizes)))


def flag_anomalies(dataset: SeasonalDataset, labeling: ClusterLabeling) -> SeasonalDataset:
    """Flag records outside the main cluster unless they fall on a holiday."""
    if len(labeling.labels) != len(dataset):
        raise ValueError(f"labeling has {len(labeling.labels)} entries for {len(dataset)} records")
    out = dataset.copy()
    outside = labeling.labels != labeling.main_cluster if labeling.main_cluster is not None else np.ones(len(dataset), bool)
    out.anomaly_flags = outside & (dataset.series.is_holiday == 0)
    return out


def detect(dataset: SeasonalDataset, params: DbscanParams = DbscanParams()) -> SeasonalDataset:
    return flag_anomalies(dataset, dbscan(dataset.series.consumption, params))


def substitute(dataset: SeasonalDataset, train_cutoff_year: int = 2018) -> SeasonalDataset:
    """Replace flagged consumption with the same hour one week earlier.

    The search steps back a week at a time past flagged, holiday or absent
    hours. When it runs off the start of the dataset the hour-of-day median
    of clean training records is used instead.
    """
    out = dataset.copy()
    ts = dataset.series.timestamps
    cons = dataset.series.consumption
    flagged = dataset.anomaly_flags
    clean = ~flagged & (dataset.series.is_holiday == 0)
    index = {int(t): i for i, t in enumerate(ts.astype(np.int64))}
    step = int(WEEK / np.timedelta64(1, "h"))
    earliest = int(ts[0].astype(np.int64)) if len(ts) else 0
    hod = hours_of_day(ts)
    train_clean = clean & (years(ts) <= train_cutoff_year)
    fallback: dict[int, float] = {}

    new_cons = out.series.values[:, 0]
    for i in np.flatnonzero(flagged):
        t = int(ts[i].astype(np.int64)) - step
        src = None
        while t >= earliest:
            j = index.get(t)
            if j is not None and clean[j]:
                src = j
                break
            t -= step
        if src is not None:
            new_cons[i] = cons[src]
        else:
            h = int(hod[i])
            if h not in fallback:
                pool = cons[train_clean & (hod == h)]
                if pool.size == 0:
                    raise UnresolvableSubstitutionError(f"no clean training record at hour {h:02d}")
                fallback[h] = float(np.median(pool))
            new_cons[i] = fallback[h]
        out.substituted[i] = True
        out.anomaly_flags[i] = False
    return out


def detect_and_substitute(
    dataset: SeasonalDataset, params: DbscanParams = DbscanParams(), train_cutoff_year: int = 2018
) -> tuple[SeasonalDataset, np.ndarray]:
    """Run detection then substitution; also return the indices that were flagged."""
    flagged = detect(dataset, params)
    idx = np.flatnonzero(flagged.anomaly_flags)
    return substitute(flagged, train_cutoff_year), idx


def inject_outliers(dataset: SeasonalDataset, spec: InjectionSpec) -> tuple[SeasonalDataset, frozenset]:
    """Offset ``floor(rate * N)`` scaled consumption values by +/- ``magnitude``.

    A ``weather_share`` fraction goes to the coldest hours, the rest to
    uniformly drawn hours. Holiday hours are never chosen, since the
    detector exempts them. Returns the modified copy and the injected indices.
    """
    n = len(dataset)
    k = int(np.floor(spec.rate * n))
    if k < 1:
        raise ValueError(f"rate {spec.rate} injects no outliers into {n} records")
    rng = np.random.default_rng(spec.seed)
    n_cold = int(round(spec.weather_share * k))
    eligible = np.flatnonzero(dataset.series.is_holiday == 0)
    if eligible.size < k:
        raise ValueError(f"only {eligible.size} non-holiday records for {k} injections")
    by_temp = eligible[np.argsort(dataset.series.temperature[eligible], kind="stable")]
    coldest = by_temp[:n_cold]
    rest = np.setdiff1d(eligible, coldest)
    random_part = rng.choice(rest, size=k - n_cold, replace=False)
    chosen = np.concatenate([coldest, random_part]).astype(np.int64)
    signs = rng.choice([-1.0, 1.0], size=k)

    out = dataset.copy()
    out.series.values[chosen, 0] += signs * spec.magnitude
    return out, frozenset(int(i) for i in chosen)


def detection_scores(flagged, truth) -> dict:
    flagged, truth = set(int(i) for i in flagged), set(int(i) for i in truth)
    hit = len(flagged & truth)
    return {
        "n_flagged": len(flagged),
        "n_injected": len(truth),
        "true_positives": hit,
        "precision": hit / len(flagged) if flagged else None,
        "recall": hit / len(truth) if truth else None,
    }
