import warnings
from datetime import date

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from asymload import timeseries as tsm
from oracles import order_statistic_quantile


def _series(start, values, holidays=frozenset()):
    values = np.asarray(values, dtype=float)
    if values.ndim == 1:
        values = np.column_stack([values, np.full_like(values, 5.0), np.zeros_like(values), np.zeros_like(values)])
    ts = np.datetime64(start, "h") + np.arange(len(values)) * tsm.HOUR
    s = tsm.MultiSeries(ts, values, np.zeros((len(values), 2)), holidays=frozenset(holidays))
    return tsm.merge_calendar(s, holidays)


def _write(tmp_path, body, name="in.csv"):
    p = tmp_path / name
    p.write_text("timestamp,consumption,temperature,radiation_direct,radiation_diffuse\n" + body)
    return p


# --- ingestion ---------------------------------------------------------------


def test_ingest_three_rows(tmp_path):
    p = _write(tmp_path, "2016-01-01T02:00,3,1,0,0\n2016-01-01T00:00,1,1,0,0\n2016-01-01T01:00,2,1,0,0\n")
    s = tsm.ingest_csv(p)
    assert len(s) == 3
    assert s.consumption.tolist() == [1.0, 2.0, 3.0]
    assert s[0].timestamp.isoformat() == "2016-01-01T00:00:00"


def test_ingest_duplicate_timestamp(tmp_path):
    p = _write(tmp_path, "2016-01-01T00:00,1,1,0,0\n2016-01-01T00:00,2,1,0,0\n")
    with pytest.raises(tsm.DataError, match="duplicate timestamp 2016-01-01T00:00"):
        tsm.ingest_csv(p)


def test_ingest_bad_value_names_line(tmp_path):
    p = _write(tmp_path, "2015-12-31T23:00,1,1,0,0\n2016-01-01T00:00,abc,1,0,0\n")
    with pytest.raises(tsm.DataError, match="line 3"):
        tsm.ingest_csv(p)


def test_ingest_empty_field_is_missing(tmp_path):
    p = _write(tmp_path, "2016-01-01T00:00,,1,0,0\n")
    assert np.isnan(tsm.ingest_csv(p).consumption[0])


def test_ingest_schema_mapping(tmp_path):
    p = tmp_path / "x.csv"
    p.write_text("time,load,t2m,dir,dif\n2016-01-01T00:00,7,1,0,0\n")
    s = tsm.ingest_csv(
        p,
        {"timestamp": "time", "consumption": "load", "temperature": "t2m", "radiation_direct": "dir", "radiation_diffuse": "dif"},
    )
    assert s.consumption[0] == 7.0


def test_ingest_header_mismatch(tmp_path):
    p = tmp_path / "x.csv"
    p.write_text("timestamp,load\n2016-01-01T00:00,7\n")
    with pytest.raises(tsm.DataError, match="header"):
        tsm.ingest_csv(p)


def test_holiday_file(tmp_path):
    p = tmp_path / "h.txt"
    p.write_text("# holidays\n2019-01-01\n\n2019-12-25  # christmas\n")
    assert tsm.read_holidays(p) == {date(2019, 1, 1), date(2019, 12, 25)}


# --- calendar ----------------------------------------------------------------


@pytest.mark.parametrize(
    "day, hol, expected",
    [("2019-01-01", True, (1, 1)), ("2019-01-05", False, (1, 0)), ("2019-01-02", False, (0, 0))],
)
def test_merge_calendar(day, hol, expected):
    holidays = {date.fromisoformat(day)} if hol else set()
    s = _series(day + "T00", [1.0] * 24, holidays)
    assert {tuple(r) for r in s.flags.tolist()} == {expected}


# --- missing values ----------------------------------------------------------


def test_fill_short_gap_linear():
    s = _series("2016-01-01T00", [10.0, np.nan, 14.0])
    assert tsm.fill_missing(s).consumption.tolist() == [10.0, 12.0, 14.0]


def test_fill_missing_rows_on_grid():
    s = _series("2016-01-01T00", [10.0, 11.0, 14.0]).take(np.array([0, 2]))
    out = tsm.fill_missing(s)
    assert len(out) == 3 and out.consumption[1] == 12.0


def test_fill_no_gaps_identity():
    s = _series("2016-01-04T00", np.arange(50.0))
    out = tsm.fill_missing(s)
    np.testing.assert_array_equal(out.values, s.values)
    np.testing.assert_array_equal(out.timestamps, s.timestamps)


def test_fill_long_gap_copies_week_back():
    vals = np.arange(400.0)
    vals[200:210] = np.nan
    out = tsm.fill_missing(_series("2016-01-04T00", vals))
    np.testing.assert_array_equal(out.consumption[200:210], np.arange(200.0 - 168, 210.0 - 168))


def test_fill_long_gap_at_start_copies_week_forward():
    vals = np.arange(400.0)
    vals[:10] = np.nan
    out = tsm.fill_missing(_series("2016-01-04T00", vals))
    np.testing.assert_array_equal(out.consumption[:10], np.arange(168.0, 178.0))


def test_fill_unfillable():
    with pytest.raises(tsm.UnfillableGapError):
        tsm.fill_missing(_series("2016-01-01T00", [np.nan, np.nan, 1.0]))


def test_fill_recomputes_flags():
    s = _series("2019-01-04T00", np.arange(400.0), {date(2019, 1, 7)}).take(np.r_[0:50, 60:400])
    out = tsm.fill_missing(s)
    np.testing.assert_array_equal(out.flags, tsm.calendar_flags(out.timestamps, out.holidays))


# --- scaling -----------------------------------------------------------------


@pytest.mark.filterwarnings("ignore:zero interquartile")
def test_quartile_oracle_on_example():
    vals = [1, 2, 3, 4, 5]
    assert order_statistic_quantile(vals, 0.25) == 2.0
    assert order_statistic_quantile(vals, 0.75) == 4.0
    s = _series("2016-01-01T00", vals)
    p = tsm.fit_robust_scaler(s, 2018)
    assert p.median[0] == 3.0
    assert p.iqr[0] == 2.0


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-1e3, 1e3), min_size=4, max_size=40))
def test_quartiles_match_order_statistics(vals):
    s = _series("2016-01-01T00", vals)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        p = tsm.fit_robust_scaler(s, 2018)
    q1, q3 = order_statistic_quantile(vals, 0.25), order_statistic_quantile(vals, 0.75)
    assert p.median[0] == pytest.approx(order_statistic_quantile(vals, 0.5), abs=1e-9)
    if q3 - q1 > 1e-9:
        assert p.iqr[0] == pytest.approx(q3 - q1, rel=1e-9, abs=1e-9)


def test_constant_feature_iqr_substituted():
    s = _series("2016-01-01T00", [7.0, 7.0, 7.0, 7.0])
    with pytest.warns(UserWarning, match="consumption"):
        p = tsm.fit_robust_scaler(s, 2018)
    assert p.median[0] == 7.0 and p.iqr[0] == 1.0
    assert "consumption" in p.degenerate


def test_scaler_fits_training_years_only():
    ts = np.array(["2018-06-01T00", "2018-06-01T01", "2018-06-01T02", "2018-06-01T03", "2019-01-01T00"], dtype="datetime64[h]")
    vals = np.column_stack([[1.0, 2.0, 3.0, 4.0, 1000.0], [1.0, 2, 3, 4, 5], [1.0, 2, 3, 4, 5], [1.0, 2, 3, 4, 5]])
    s = tsm.MultiSeries(ts, vals, np.zeros((5, 2)))
    p = tsm.fit_robust_scaler(s, 2018)
    assert p.median[0] == 2.5


def test_too_few_training_records():
    with pytest.raises(tsm.DataError):
        tsm.fit_robust_scaler(_series("2019-01-01T00", [1.0, 2.0, 3.0, 4.0]), 2018)


def test_scaler_examples():
    p = tsm.RobustScalerParams(np.array([3.0, 0, 0, 0]), np.array([2.0, 1, 1, 1]))
    s = _series("2016-01-01T00", [5.0, 3.0, 0.0])
    scaled = tsm.apply_scaler(s, p)
    assert scaled.consumption.tolist() == [1.0, 0.0, -1.5]
    assert tsm.invert_scaler(0.0, p) == 3.0
    np.testing.assert_array_equal(tsm.invert_scaler(scaled.consumption, p), [5.0, 3.0, 0.0])
    np.testing.assert_array_equal(scaled.flags, s.flags)


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**31 - 1), st.integers(8, 200))
def test_scaler_round_trip(seed, n):
    rng = np.random.default_rng(seed)
    vals = rng.normal(rng.uniform(-100, 100, 4), rng.uniform(0.1, 50, 4), size=(n, 4))
    ts = np.datetime64("2017-01-01T00", "h") + np.arange(n) * tsm.HOUR
    s = tsm.MultiSeries(ts, vals, np.zeros((n, 2)))
    p = tsm.fit_robust_scaler(s, 2018)
    back = p.inverse(tsm.apply_scaler(s, p).values)
    scale = np.maximum(np.abs(vals), np.abs(p.median))
    assert np.all(np.abs(back - vals) <= 1e-9 * scale)


# --- seasons -----------------------------------------------------------------


@pytest.mark.parametrize(
    "stamp, season",
    [("2016-04-14T23", "S1"), ("2016-04-15T00", "S2"), ("2016-12-31T23", "S3"), ("2016-01-01T00", "S1"),
     ("2016-10-14T23", "S2"), ("2016-10-15T00", "S3")],
)
def test_season_boundaries(stamp, season):
    assert tsm.season_of(np.array([stamp], dtype="datetime64[h]"))[0] == season


@settings(max_examples=20, deadline=None)
@given(st.integers(2015, 2020), st.integers(1, 3), st.integers(0, 5000))
def test_season_partition(start_year, n_years, offset):
    start = np.datetime64(f"{start_year}-01-01T00", "h") + offset * tsm.HOUR
    n = n_years * 8760
    s = _series(str(start), np.ones(n))
    parts = tsm.split_seasons(s, tsm.RobustScalerParams(np.zeros(4), np.ones(4)))
    assert sum(len(p) for p in parts.values()) == len(s)
    stamps = [set(p.series.timestamps.astype(np.int64).tolist()) for p in parts.values()]
    assert not (stamps[0] & stamps[1]) and not (stamps[1] & stamps[2]) and not (stamps[0] & stamps[2])
    for sid, p in parts.items():
        assert set(tsm.season_of(p.series.timestamps)) <= {sid}


# --- windows -----------------------------------------------------------------


def _dataset(start, n):
    s = _series(start, np.arange(float(n)))
    return tsm.SeasonalDataset("S1", s, tsm.RobustScalerParams(np.zeros(4), np.ones(4)))


def test_window_count_and_content():
    w = tsm.make_windows(_dataset("2016-01-01T00", 10), 4)
    assert len(w) == 6
    assert w.inputs.shape == (6, 4, 6)
    assert w.inputs[0, :, 0].tolist() == [0.0, 1.0, 2.0, 3.0]
    assert w.targets[0] == 4.0
    assert w[0].target == 4.0


def test_window_short_segment():
    assert len(tsm.make_windows(_dataset("2016-01-01T00", 4), 4)) == 0


def test_windows_do_not_cross_segments():
    ds = _dataset("2016-01-01T00", 20)
    ds.series = ds.series.take(np.r_[0:10, 12:20])
    w = tsm.make_windows(ds, 4)
    assert len(w) == (10 - 4) + (8 - 4)
    assert np.all(np.diff(w.inputs[:, :, 0], axis=1) == 1.0)


@settings(max_examples=100, deadline=None)
@given(st.lists(st.integers(0, 40), min_size=1, max_size=6), st.integers(1, 8))
def test_window_count_property(lengths, w):
    idx, pos = [], 0
    for L in lengths:
        idx.extend(range(pos, pos + L))
        pos += L + 3
    ds = _dataset("2016-01-01T00", pos + 1)
    ds.series = ds.series.take(np.array(idx, dtype=np.int64))
    assert len(tsm.make_windows(ds, w)) == sum(max(0, L - w) for L in lengths)


def test_train_test_split():
    ts = np.array(["2018-12-31T23", "2019-01-01T00"], dtype="datetime64[h]")
    w = tsm.Windows(np.zeros((2, 4, 6)), np.zeros(2), ts, np.arange(2))
    train, test = tsm.split_train_test(w)
    assert train.target_times.tolist() == [ts[0].astype(object)]
    assert test.target_times.tolist() == [ts[1].astype(object)]


def test_train_test_split_warns_on_empty_test():
    w = tsm.make_windows(_dataset("2016-03-01T00", 30), 4)
    with pytest.warns(UserWarning, match="test set is empty"):
        train, test = tsm.split_train_test(w)
    assert len(test) == 0 and len(train) == 26


@pytest.mark.filterwarnings("ignore:zero interquartile")
def test_calendar_flags_in_scaled_output_are_binary():
    s = _series("2019-01-01T00", np.arange(500.0), {date(2019, 1, 1)})
    p = tsm.fit_robust_scaler(s, 2019)
    feats = tsm.apply_scaler(s, p).features()
    assert set(np.unique(feats[:, 4:])) <= {0.0, 1.0}


def test_dataset_csv_round_trip(tmp_path):
    ds = _dataset("2016-04-10T00", 200)
    ds.series = tsm.merge_calendar(ds.series, {date(2016, 4, 11)})
    parts = tsm.split_seasons(ds.series, ds.scaler)
    parts["S1"].anomaly_flags[3] = True
    path = tmp_path / "d.csv"
    tsm.write_dataset_csv(path, list(parts.values()))
    back = tsm.read_dataset_csv(path, ds.scaler)
    for sid in ("S1", "S2"):
        np.testing.assert_array_equal(back[sid].series.values, parts[sid].series.values)
        np.testing.assert_array_equal(back[sid].series.flags, parts[sid].series.flags)
        np.testing.assert_array_equal(back[sid].anomaly_flags, parts[sid].anomaly_flags)
    whole = tsm.combine(back)
    np.testing.assert_array_equal(whole.series.timestamps, ds.series.timestamps)
