import numpy as np
import pytest

from gridcast.features import (DependencyConfig, ExternalSpec, SampleBatch,
                               build_dataset, build_sample, external_vector,
                               us_federal_holidays)
from gridcast.ingest import parse_timestamp
from gridcast.regularize import RegularizedGrid

T0 = parse_timestamp("2015-07-01T00:00:00Z")


def series(n_slots=600, h=4, w=4):
    # frame value encodes its slot index, so lag checks are direct
    frames = np.arange(n_slots, dtype=float)[:, None, None] * np.ones((h, w))
    return RegularizedGrid(frames, period_slots=24, origin_time=T0,
                           slot_seconds=3600)


class TestDependencyConfig:
    def test_min_slot_default(self):
        assert DependencyConfig().min_slot == 504

    def test_lags_at_504(self):
        near, per, trend = DependencyConfig().lags(504)
        assert near == [503, 502, 501]
        assert per == [480, 456, 432]
        assert trend == [336, 168, 0]

    def test_strides_fixed(self):
        with pytest.raises(ValueError):
            DependencyConfig(stride_period=12)

    def test_negative_length_rejected(self):
        with pytest.raises(ValueError):
            DependencyConfig(len_nearby=-1)


class TestBuildSample:
    def test_stack_contents_most_recent_first(self):
        s = build_sample(series(), 504, DependencyConfig(), ExternalSpec())
        assert s.nearby[:, 0, 0].tolist() == [503.0, 502.0, 501.0]
        assert s.period[:, 0, 0].tolist() == [480.0, 456.0, 432.0]
        assert s.trend[:, 0, 0].tolist() == [336.0, 168.0, 0.0]
        assert s.target[0, 0] == 504.0
        assert s.target_time == T0 + 504 * 3600

    def test_degenerate_config_empty_stacks(self):
        cfg = DependencyConfig(len_nearby=0, len_period=0, len_trend=0)
        s = build_sample(series(), 100, cfg, ExternalSpec())
        assert s.nearby.shape == (0, 4, 4)
        assert s.period.shape == (0, 4, 4)
        assert s.trend.shape == (0, 4, 4)
        assert s.target[0, 0] == 100.0

    def test_insufficient_history_names_first_valid(self):
        with pytest.raises(ValueError, match="504"):
            build_sample(series(), 100, DependencyConfig(), ExternalSpec())

    def test_random_lag_correctness(self):
        rng = np.random.default_rng(0)
        cfg = DependencyConfig()
        ser = series()
        for t in rng.integers(504, 600, 10):
            s = build_sample(ser, int(t), cfg, ExternalSpec())
            for k in range(3):
                assert np.array_equal(s.nearby[k], ser.frames[t - 1 - k])
                assert np.array_equal(s.period[k], ser.frames[t - 24 * (k + 1)])
                assert np.array_equal(s.trend[k], ser.frames[t - 168 * (k + 1)])


class TestExternalVector:
    def test_christmas_afternoon(self):
        ext = ExternalSpec(holiday_dates=frozenset(us_federal_holidays(2015)))
        when = parse_timestamp("2015-12-25T13:00:00Z")
        v = external_vector(when, ext)
        assert v.shape == (32,)
        assert v[0] == 1.0                      # holiday flag
        assert v[1:25].argmax() == 13 and v[1:25].sum() == 1.0
        # 2015-12-25 is a Friday: index 4 with Monday first
        assert v[25:32].argmax() == 4 and v[25:32].sum() == 1.0

    def test_hour_only_midnight(self):
        ext = ExternalSpec(use_hour_of_day=True, use_day_of_week=False)
        v = external_vector(T0, ext)
        assert v.shape == (25,)
        assert v[0] == 0.0
        assert v[1] == 1.0 and v[1:].sum() == 1.0

    def test_minimal_config(self):
        ext = ExternalSpec(use_hour_of_day=False, use_day_of_week=False)
        v = external_vector(T0, ext)
        assert v.shape == (1,)

    def test_vector_length_formula_all_toggles(self):
        for hour in (False, True):
            for day in (False, True):
                ext = ExternalSpec(use_hour_of_day=hour, use_day_of_week=day)
                expected = 1 + 24 * hour + 7 * day
                assert ext.vector_length == expected
                assert external_vector(T0, ext).shape == (expected,)

    def test_weather_columns_appended(self, tmp_path):
        path = tmp_path / "weather.csv"
        path.write_text("time,temp,rain\n2015-07-01T00:00:00Z,21.5,0.0\n"
                        "2015-07-01T01:00:00Z,20.0,1.5\n")
        ext = ExternalSpec.from_config(use_hour_of_day=False, use_day_of_week=False,
                                       weather_file=str(path))
        assert ext.vector_length == 3
        v = external_vector(T0 + 3600, ext)
        assert v.tolist() == [0.0, 20.0, 1.5]

    def test_missing_weather_row_names_timestamp(self, tmp_path):
        path = tmp_path / "weather.csv"
        path.write_text("time,temp\n2015-07-01T00:00:00Z,21.5\n")
        ext = ExternalSpec.from_config(weather_file=str(path))
        with pytest.raises(ValueError, match="2015-07-01T05"):
            external_vector(T0 + 5 * 3600, ext)


class TestUsFederalHolidays:
    def test_2015_dates(self):
        days = {d.isoformat() for d in us_federal_holidays(2015)}
        assert days == {"2015-01-01", "2015-01-19", "2015-02-16", "2015-05-25",
                        "2015-07-04", "2015-09-07", "2015-10-12", "2015-11-11",
                        "2015-11-26", "2015-12-25"}


class TestBuildDataset:
    def test_single_slot(self):
        samples = build_dataset(series(), DependencyConfig(), ExternalSpec(),
                                (504, 505))
        assert len(samples) == 1

    def test_count_equals_range_length(self):
        samples = build_dataset(series(), DependencyConfig(), ExternalSpec(),
                                (504, 600))
        assert len(samples) == 96
        assert [s.target_index for s in samples] == list(range(504, 600))

    def test_half_year_test_split_counts(self):
        # half year from July 1: 184 days of hourly slots, last two weeks held out
        ser = series(n_slots=184 * 24)
        cfg = DependencyConfig()
        samples = build_dataset(ser, cfg, ExternalSpec(), (504, ser.n_slots))
        test = [s for s in samples if s.target_index >= ser.n_slots - 336]
        train = [s for s in samples if s.target_index < ser.n_slots - 336]
        assert len(test) == 336
        assert len(train) == 184 * 24 - 336 - 504

    def test_empty_range_errors(self):
        with pytest.raises(ValueError, match="empty"):
            build_dataset(series(), DependencyConfig(), ExternalSpec(), (504, 504))

    def test_no_leakage(self):
        # no sample reads a frame at or beyond its own target index
        ser = series()
        cfg = DependencyConfig()
        for s in build_dataset(ser, cfg, ExternalSpec(), (504, 600)):
            deepest = max(
                [s.nearby.max(), s.period.max(), s.trend.max()])
            assert deepest < s.target_index  # frame values encode slot indices


class TestSampleBatch:
    def test_stacking_and_take(self):
        samples = build_dataset(series(), DependencyConfig(), ExternalSpec(),
                                (504, 520))
        batch = SampleBatch.from_samples(samples, dtype=np.float32)
        assert batch.nearby.shape == (16, 3, 4, 4)
        assert batch.nearby.dtype == np.float32
        sub = batch.take(slice(4, 8))
        assert len(sub) == 4
        assert sub.target_index.tolist() == [508, 509, 510, 511]
