"""Deterministic synthetic hourly load, weather and calendar data."""

from __future__ import annotations

from dataclasses import asdict, dataclass
from datetime import date

import numpy as np

from .timeseries import HOUR, MultiSeries, calendar_flags, hours_of_day

# Fixed-date public holidays (month, day) used for the synthetic calendar.
FIXED_HOLIDAYS = ((1, 1), (5, 1), (5, 8), (7, 14), (8, 15), (11, 1), (11, 11), (12, 25), (12, 26))


@dataclass(frozen=True)
class SynthSpec:
    start_year: int = 2015
    end_year: int = 2019
    base_load: float = 1000.0
    daily_amp: float = 120.0
    weekly_amp: float = 30.0
    seasonal_amp: float = 100.0
    temp_coupling: float = 6.0
    comfort_threshold: float = 15.0
    noise_std: float = 15.0
    holiday_damping: float = 0.95
    temp_mean: float = 11.0
    temp_amp: float = 9.0
    temp_noise_std: float = 1.5
    seed: int = 0

    def __post_init__(self) -> None:
        if self.end_year < self.start_year:
            raise ValueError("end_year precedes start_year")
        for name in ("daily_amp", "weekly_amp", "seasonal_amp", "noise_std", "temp_noise_std"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")
        if not 0 < self.holiday_damping <= 1:
            raise ValueError("holiday_damping must lie in (0, 1]")

    def to_dict(self) -> dict:
        return asdict(self)


def default_holidays(start_year: int, end_year: int) -> frozenset:
    return frozenset(date(y, m, d) for y in range(start_year, end_year + 1) for m, d in FIXED_HOLIDAYS)


def sun_proxy(ts: np.ndarray) -> np.ndarray:
    """Crude solar-elevation proxy: positive by day, longer days in summer."""
    hour = hours_of_day(ts)
    doy = (ts.astype("datetime64[D]") - ts.astype("datetime64[Y]")).astype(np.int64)
    return np.cos(2 * np.pi * (hour - 12) / 24) + 0.3 * np.cos(2 * np.pi * (doy - 172) / 365.25)


def generate(spec: SynthSpec = SynthSpec(), holidays=None) -> MultiSeries:
    """Build a complete hourly series covering ``start_year``..``end_year``.

    Consumption is base + daily, weekly and annual sinusoids + a heating
    term below the comfort threshold + Gaussian noise, damped on weekends
    and holidays. Temperature is an annual sinusoid (coldest in late
    January) plus AR(1) noise. Radiation is zero whenever the sun proxy is
    non-positive.
    """
    rng = np.random.default_rng(spec.seed)
    start = np.datetime64(f"{spec.start_year}-01-01T00", "h")
    stop = np.datetime64(f"{spec.end_year + 1}-01-01T00", "h")
    n = int((stop - start) / HOUR)
    ts = start + np.arange(n) * HOUR
    t = np.arange(n, dtype=np.float64)
    if holidays is None:
        holidays = default_holidays(spec.start_year, spec.end_year)
    flags = calendar_flags(ts, holidays)

    # AR(1) weather noise with stationary std temp_noise_std.
    phi = 0.97
    shocks = rng.normal(0.0, spec.temp_noise_std * np.sqrt(1 - phi**2), n)
    ar = np.empty(n)
    acc = rng.normal(0.0, spec.temp_noise_std)
    for i in range(n):
        acc = phi * acc + shocks[i]
        ar[i] = acc
    temperature = spec.temp_mean - spec.temp_amp * np.cos(2 * np.pi * (t - 24 * 25) / 8766) + ar

    sun = sun_proxy(ts)
    day = np.clip(sun, 0.0, None)
    clouds = rng.uniform(0.4, 1.0, n)
    direct = 600.0 * day * clouds
    diffuse = 150.0 * day * (1.4 - clouds)

    consumption = (
        spec.base_load
        + spec.daily_amp * np.sin(2 * np.pi * (t - 9) / 24)
        + spec.weekly_amp * np.sin(2 * np.pi * t / 168)
        + spec.seasonal_amp * np.cos(2 * np.pi * (t - 24 * 20) / 8760)
        + spec.temp_coupling * np.maximum(0.0, spec.comfort_threshold - temperature)
        + rng.normal(0.0, 1.0, n) * spec.noise_std
    )
    consumption = np.where(flags[:, 0] == 1, consumption * spec.holiday_damping, consumption)
    values = np.column_stack([consumption, temperature, direct, diffuse])
    return MultiSeries(ts, values, flags, origin="synthetic", holidays=frozenset(holidays))
