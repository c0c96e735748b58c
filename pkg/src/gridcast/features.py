"""Training-sample assembly: lagged frame stacks plus an external feature vector.

Each sample pairs the target frame at slot t with three stacks of earlier
frames: "nearby" at hourly spacing, "period" at daily spacing and "trend" at
weekly spacing. Channels within a stack are ordered most-recent-first.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from datetime import date, datetime, timezone
from typing import Optional

import numpy as np

from .regularize import RegularizedGrid

SLOTS_PER_DAY = 24
SLOTS_PER_WEEK = 168


@dataclass(frozen=True)
class DependencyConfig:
    """Stack depths for the three lag families; strides are fixed."""

    len_nearby: int = 3
    len_period: int = 3
    len_trend: int = 3
    stride_nearby: int = 1
    stride_period: int = SLOTS_PER_DAY
    stride_trend: int = SLOTS_PER_WEEK

    def __post_init__(self):
        if min(self.len_nearby, self.len_period, self.len_trend) < 0:
            raise ValueError("stack lengths must be non-negative")
        if (self.stride_nearby, self.stride_period, self.stride_trend) != (
                1, SLOTS_PER_DAY, SLOTS_PER_WEEK):
            raise ValueError("strides are fixed at hourly/daily/weekly spacing")

    @property
    def min_slot(self) -> int:
        """First slot index with a full lag history."""
        return max(self.len_nearby * self.stride_nearby,
                   self.len_period * self.stride_period,
                   self.len_trend * self.stride_trend)

    def lags(self, t: int) -> tuple[list[int], list[int], list[int]]:
        near = [t - k * self.stride_nearby for k in range(1, self.len_nearby + 1)]
        per = [t - k * self.stride_period for k in range(1, self.len_period + 1)]
        trend = [t - k * self.stride_trend for k in range(1, self.len_trend + 1)]
        return near, per, trend


class WeatherTable:
    """Hourly weather columns keyed by epoch timestamp, pre-joined offline."""

    def __init__(self, rows: dict[float, tuple[float, ...]], n_cols: int):
        self.rows = rows
        self.n_cols = n_cols

    @classmethod
    def from_csv(cls, path: str) -> "WeatherTable":
        from .ingest import parse_timestamp

        rows: dict[float, tuple[float, ...]] = {}
        n_cols = 0
        with open(path, "r", encoding="utf-8", newline="") as fh:
            reader = csv.reader(fh)
            header = next(reader, None)
            if not header or header[0] != "time":
                raise ValueError("weather file must start with a 'time' column")
            n_cols = len(header) - 1
            for row in reader:
                rows[parse_timestamp(row[0])] = tuple(float(x) for x in row[1:])
        return cls(rows, n_cols)

    def lookup(self, when: float) -> tuple[float, ...]:
        try:
            return self.rows[when]
        except KeyError:
            from .ingest import format_timestamp
            raise ValueError(f"weather file has no row for {format_timestamp(when)}")


@dataclass
class ExternalSpec:
    """Configuration of the deterministic external-feature encoding.

    Vector layout: [holiday flag] + hour-of-day one-hot (24, optional) +
    day-of-week one-hot (7, Monday first, optional) + weather columns verbatim.
    """

    holiday_dates: frozenset[date] = frozenset()
    use_hour_of_day: bool = True
    use_day_of_week: bool = True
    weather: Optional[WeatherTable] = None

    @classmethod
    def from_config(cls, holidays=(), use_hour_of_day=True, use_day_of_week=True,
                    weather_file=None) -> "ExternalSpec":
        dates = frozenset(
            d if isinstance(d, date) else date.fromisoformat(d) for d in holidays)
        table = WeatherTable.from_csv(weather_file) if weather_file else None
        return cls(dates, use_hour_of_day, use_day_of_week, table)

    @property
    def vector_length(self) -> int:
        n = 1
        if self.use_hour_of_day:
            n += 24
        if self.use_day_of_week:
            n += 7
        if self.weather is not None:
            n += self.weather.n_cols
        return n


def us_federal_holidays(year: int) -> set[date]:
    """Actual (non-observed) dates of the ten US federal holidays."""

    def nth_weekday(month: int, weekday: int, n: int) -> date:
        d = date(year, month, 1)
        offset = (weekday - d.weekday()) % 7 + (n - 1) * 7
        return date(year, month, 1 + offset)

    def last_weekday(month: int, weekday: int) -> date:
        d = date(year, month + 1, 1) if month < 12 else date(year + 1, 1, 1)
        d = d.replace(day=1)
        back = (d.weekday() - weekday - 1) % 7 + 1
        return date.fromordinal(d.toordinal() - back)

    return {
        date(year, 1, 1),
        nth_weekday(1, 0, 3),    # MLK day
        nth_weekday(2, 0, 3),    # Washington's birthday
        last_weekday(5, 0),      # Memorial day
        date(year, 7, 4),
        nth_weekday(9, 0, 1),    # Labor day
        nth_weekday(10, 0, 2),   # Columbus day
        date(year, 11, 11),
        nth_weekday(11, 3, 4),   # Thanksgiving
        date(year, 12, 25),
    }


def external_vector(when: float, ext: ExternalSpec) -> np.ndarray:
    """Encode the wall-clock time `when` (epoch seconds) per the spec layout."""
    dt = datetime.fromtimestamp(when, tz=timezone.utc)
    parts = [np.array([1.0 if dt.date() in ext.holiday_dates else 0.0])]
    if ext.use_hour_of_day:
        hour = np.zeros(24)
        hour[dt.hour] = 1.0
        parts.append(hour)
    if ext.use_day_of_week:
        dow = np.zeros(7)
        dow[dt.weekday()] = 1.0
        parts.append(dow)
    if ext.weather is not None:
        parts.append(np.asarray(ext.weather.lookup(when), dtype=np.float64))
    return np.concatenate(parts)


@dataclass
class FeatureSample:
    """One supervised sample: lag stacks, external vector and target frame."""

    target_time: float
    target_index: int
    nearby: np.ndarray    # (len_nearby, H, W)
    period: np.ndarray    # (len_period, H, W)
    trend: np.ndarray     # (len_trend, H, W)
    external: np.ndarray  # (E,)
    target: np.ndarray    # (H, W)


def build_sample(series: RegularizedGrid, t: int, cfg: DependencyConfig,
                 ext: ExternalSpec) -> FeatureSample:
    """Assemble the sample whose target is the frame at slot index t."""
    if t < cfg.min_slot:
        raise ValueError(
            f"slot {t} has incomplete lag history; first valid slot is {cfg.min_slot}")
    if t >= series.n_slots:
        raise ValueError(f"slot {t} is beyond the series (T={series.n_slots})")
    near, per, trend = cfg.lags(t)
    h, w = series.frame_shape
    frames = series.frames

    def stack(idx: list[int]) -> np.ndarray:
        if not idx:
            return np.empty((0, h, w))
        return frames[idx].copy()

    return FeatureSample(
        target_time=series.slot_time(t),
        target_index=t,
        nearby=stack(near),
        period=stack(per),
        trend=stack(trend),
        external=external_vector(series.slot_time(t), ext),
        target=frames[t].copy(),
    )


def build_dataset(series: RegularizedGrid, cfg: DependencyConfig, ext: ExternalSpec,
                  slot_range: tuple[int, int]) -> list[FeatureSample]:
    """One sample per slot in [start, stop), chronologically ordered."""
    start, stop = slot_range
    if stop <= start:
        raise ValueError(f"empty slot range [{start}, {stop})")
    if start < cfg.min_slot:
        raise ValueError(
            f"range starts at {start} but lag history begins at slot {cfg.min_slot}")
    if stop > series.n_slots:
        raise ValueError(f"range ends at {stop}, beyond the series (T={series.n_slots})")
    return [build_sample(series, t, cfg, ext) for t in range(start, stop)]


@dataclass
class SampleBatch:
    """Dense arrays for a list of samples, in list order."""

    nearby: np.ndarray    # (n, len_nearby, H, W)
    period: np.ndarray
    trend: np.ndarray
    external: np.ndarray  # (n, E)
    target: np.ndarray    # (n, H, W)
    target_index: np.ndarray

    @classmethod
    def from_samples(cls, samples: list[FeatureSample], dtype=np.float64) -> "SampleBatch":
        if not samples:
            raise ValueError("no samples to batch")
        return cls(
            nearby=np.stack([s.nearby for s in samples]).astype(dtype),
            period=np.stack([s.period for s in samples]).astype(dtype),
            trend=np.stack([s.trend for s in samples]).astype(dtype),
            external=np.stack([s.external for s in samples]).astype(dtype),
            target=np.stack([s.target for s in samples]).astype(dtype),
            target_index=np.array([s.target_index for s in samples]),
        )

    def __len__(self) -> int:
        return self.target.shape[0]

    def take(self, idx) -> "SampleBatch":
        return SampleBatch(self.nearby[idx], self.period[idx], self.trend[idx],
                           self.external[idx], self.target[idx], self.target_index[idx])
