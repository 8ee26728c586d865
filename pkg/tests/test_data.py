import io

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from loadcast.data import (
    ColumnSchema,
    MachineSeries,
    aggregate_machine_usage,
    apply_scaler,
    fit_scaler,
    interpolate_missing,
    invert_scaler,
    make_windows,
    parse_trace,
    read_series_csv,
    split_dataset,
    write_series_csv,
)
from loadcast.errors import (
    ConfigError,
    DataError,
    EmptySeriesError,
    EmptyInputError,
    InsufficientDataError,
    ShapeError,
    UnrecoverableFeatureError,
)

# compact schema used by most fixtures here:
# window_start, machine_id, cpu, memory, disk_io, disk_space
SCHEMA = ColumnSchema(window_start=0, machine_id=1, cpu_rate=2, memory=3,
                      disk_io_time=4, disk_space=5)


def series_of(values, interval=300, start=0, names=None):
    values = np.asarray(values, dtype=float)
    if values.ndim == 1:
        values = values[:, None]
    names = names or tuple(f"f{j}" for j in range(values.shape[1]))
    return MachineSeries(machine_id="m", interval_seconds=interval, start_time=start,
                         values=values, feature_names=names)


class TestParseTrace:
    def test_empty_stream(self):
        result = parse_trace(io.StringIO(""), SCHEMA)
        assert result.records == []
        assert result.skipped == 0

    def test_missing_disk_io_is_absent(self):
        result = parse_trace(io.StringIO("300,m1,0.1,0.02,,0.001\n"), SCHEMA)
        assert result.skipped == 0
        (rec,) = result.records
        assert rec.window_start == 300
        assert rec.machine_id == "m1"
        assert rec.cpu_rate == 0.1
        assert rec.disk_io_time is None
        assert rec.disk_space == 0.001

    def test_bad_mandatory_field_skipped(self):
        text = "0,m1,0.1,0.2,0.001,0.3\n300,m1,oops,0.2,0.001,0.3\n600,m1,0.2,0.2,0.001,0.3\n"
        result = parse_trace(io.StringIO(text), SCHEMA)
        assert len(result.records) == 2
        assert result.skipped == 1

    def test_negative_value_skipped(self):
        result = parse_trace(io.StringIO("0,m1,-0.1,0.2,,0.3\n"), SCHEMA)
        assert result.records == []
        assert result.skipped == 1

    def test_header_row_skipped(self):
        text = "start,machine,cpu,mem,dio,dsk\n0,m1,0.1,0.2,,0.3\n"
        result = parse_trace(io.StringIO(text), SCHEMA, header=True)
        assert len(result.records) == 1
        assert result.skipped == 0

    def test_alternate_delimiter(self):
        result = parse_trace(io.StringIO("0;m1;0.1;0.2;;0.3\n"), SCHEMA, delimiter=";")
        assert len(result.records) == 1

    def test_bytes_input(self):
        result = parse_trace(b"0,m1,0.1,0.2,0.004,0.3\n", SCHEMA)
        assert result.records[0].disk_io_time == 0.004

    def test_schema_beyond_every_row_is_config_error(self):
        wide = ColumnSchema(window_start=0, machine_id=1, cpu_rate=2, memory=3,
                            disk_io_time=4, disk_space=40)
        with pytest.raises(ConfigError):
            parse_trace(io.StringIO("0,m1,0.1,0.2,,0.3\n"), wide)

    def test_duplicate_schema_columns_rejected(self):
        with pytest.raises(ConfigError):
            ColumnSchema(window_start=0, machine_id=0, cpu_rate=2, memory=3,
                         disk_io_time=4, disk_space=5)


class TestAggregate:
    def rec(self, ts, machine="m1", cpu=0.1, mem=0.2, dio=0.001, dsk=0.3):
        text = f"{ts},{machine},{cpu},{mem},{'' if dio is None else dio},{dsk}\n"
        return parse_trace(io.StringIO(text), SCHEMA).records[0]

    def test_same_bucket_sums(self):
        series = aggregate_machine_usage([self.rec(0, cpu=0.1), self.rec(10, cpu=0.3)], "m1", 300)
        assert len(series) == 1
        assert series.values[0, 0] == pytest.approx(0.4)

    def test_one_record_per_bucket_identity(self):
        recs = [self.rec(0, cpu=0.1), self.rec(300, cpu=0.2), self.rec(600, cpu=0.3)]
        series = aggregate_machine_usage(recs, "m1", 300)
        assert len(series) == 3
        np.testing.assert_allclose(series.values[:, 0], [0.1, 0.2, 0.3])

    def test_gap_bucket_is_missing(self):
        series = aggregate_machine_usage([self.rec(0), self.rec(600)], "m1", 300)
        assert len(series) == 3
        assert np.isnan(series.values[1]).all()
        assert not np.isnan(series.values[0]).any()

    def test_unknown_machine(self):
        with pytest.raises(EmptySeriesError):
            aggregate_machine_usage([self.rec(0)], "nope", 300)

    def test_other_machines_ignored(self):
        recs = [self.rec(0, machine="m1", cpu=0.1), self.rec(0, machine="m2", cpu=9.0)]
        series = aggregate_machine_usage(recs, "m1", 300)
        assert series.values[0, 0] == pytest.approx(0.1)

    def test_permutation_invariance(self):
        recs = [self.rec(ts, cpu=0.01 * ts) for ts in (0, 0, 300, 900, 900, 1200)]
        forward = aggregate_machine_usage(recs, "m1", 300)
        backward = aggregate_machine_usage(list(reversed(recs)), "m1", 300)
        np.testing.assert_array_equal(forward.values, backward.values)

    def test_all_disk_io_absent_in_bucket_is_missing(self):
        series = aggregate_machine_usage([self.rec(0, dio=None)], "m1", 300)
        assert np.isnan(series.values[0, 2])
        assert series.values[0, 0] == pytest.approx(0.1)

    def test_half_open_bucket_boundaries(self):
        series = aggregate_machine_usage([self.rec(299), self.rec(300)], "m1", 300)
        assert len(series) == 2  # 299 -> bucket 0, 300 -> bucket 1


class TestInterpolate:
    def test_interior_linear(self):
        out = interpolate_missing(series_of([1.0, np.nan, 3.0]))
        np.testing.assert_allclose(out.values[:, 0], [1.0, 2.0, 3.0])

    def test_no_missing_identity(self):
        src = series_of([1.0, 2.0, 3.0])
        out = interpolate_missing(src)
        np.testing.assert_array_equal(out.values, src.values)

    def test_edge_extension(self):
        out = interpolate_missing(series_of([np.nan, np.nan, 5.0, np.nan]))
        np.testing.assert_allclose(out.values[:, 0], [5.0, 5.0, 5.0, 5.0])

    def test_idempotent(self):
        src = series_of([np.nan, 1.0, np.nan, np.nan, 7.0])
        once = interpolate_missing(src)
        twice = interpolate_missing(once)
        np.testing.assert_array_equal(once.values, twice.values)

    def test_fully_missing_feature(self):
        src = series_of(np.column_stack([[1.0, 2.0], [np.nan, np.nan]]),
                        names=("good", "bad"))
        with pytest.raises(UnrecoverableFeatureError) as err:
            interpolate_missing(src)
        assert "bad" in str(err.value)


class TestScaler:
    def test_fit_single_feature(self):
        params = fit_scaler(series_of([2.0, 4.0, 6.0]))
        assert params.minimum[0] == 2.0
        assert params.maximum[0] == 6.0
        assert not params.degenerate_mask[0]

    def test_fit_constant_feature_degenerate(self):
        params = fit_scaler(series_of([5.0, 5.0]))
        assert params.minimum[0] == params.maximum[0] == 5.0
        assert params.degenerate_mask[0]

    def test_fit_two_features(self):
        params = fit_scaler(np.array([[0.0, 10.0], [4.0, 20.0], [2.0, 30.0]]))
        np.testing.assert_array_equal(params.minimum, [0.0, 10.0])
        np.testing.assert_array_equal(params.maximum, [4.0, 30.0])

    def test_fit_range_only(self):
        params = fit_scaler(np.array([[0.0], [1.0], [100.0]]), (0, 2))
        assert params.maximum[0] == 1.0

    def test_empty_fit_range(self):
        with pytest.raises(ConfigError):
            fit_scaler(np.array([[1.0], [2.0]]), (1, 1))

    def test_apply_endpoints_and_midpoint(self):
        params = fit_scaler(series_of([2.0, 4.0, 6.0]))
        np.testing.assert_allclose(
            apply_scaler(np.array([[2.0], [4.0], [6.0]]), params).ravel(), [0.0, 0.5, 1.0]
        )

    def test_apply_degenerate_maps_to_zero(self):
        params = fit_scaler(series_of([5.0, 5.0]))
        assert apply_scaler(np.array([[5.0]]), params)[0, 0] == 0.0

    def test_no_clipping(self):
        params = fit_scaler(series_of([2.0, 4.0, 6.0]))
        assert apply_scaler(np.array([[8.0]]), params)[0, 0] == pytest.approx(1.5)

    def test_invert_round_trip_values(self):
        params = fit_scaler(series_of([2.0, 4.0, 6.0]))
        np.testing.assert_allclose(
            invert_scaler(np.array([[0.0], [0.5], [1.0]]), params).ravel(), [2.0, 4.0, 6.0]
        )

    def test_invert_degenerate_restores_constant(self):
        params = fit_scaler(series_of([5.0, 5.0]))
        assert invert_scaler(np.array([[0.0]]), params)[0, 0] == 5.0

    def test_round_trip_random_matrix(self):
        rng = np.random.default_rng(0)
        matrix = rng.uniform(-3.0, 7.0, size=(10, 4))
        params = fit_scaler(matrix)
        back = invert_scaler(apply_scaler(matrix, params), params)
        assert np.max(np.abs(back - matrix) / np.maximum(np.abs(matrix), 1e-300)) < 1e-12

    def test_shape_mismatch(self):
        params = fit_scaler(np.zeros((3, 2)) + [[1.0, 2.0]] * 3)
        with pytest.raises(ShapeError):
            apply_scaler(np.zeros((3, 5)), params)
        with pytest.raises(ShapeError):
            invert_scaler(np.zeros((3, 5)), params)

    @settings(max_examples=50, deadline=None)
    @given(
        st.integers(2, 12),
        st.integers(1, 5),
        st.integers(0, 2**32 - 1),
    )
    def test_round_trip_property(self, rows, cols, seed):
        rng = np.random.default_rng(seed)
        matrix = rng.uniform(-100.0, 100.0, size=(rows, cols))
        # force non-degenerate columns
        matrix[0] = matrix[1] + 1.0
        params = fit_scaler(matrix)
        back = invert_scaler(apply_scaler(matrix, params), params)
        rel = np.abs(back - matrix) / np.maximum(np.abs(matrix), 1.0)
        assert np.max(rel) < 1e-12


class TestWindows:
    def test_counts(self):
        assert len(make_windows(series_of(np.arange(6.0)), 2, 3)) == 2

    def test_single_window_rows(self):
        ds = make_windows(series_of(np.arange(5.0)), 4, 1)
        assert len(ds) == 1
        np.testing.assert_array_equal(ds.inputs[0].ravel(), [0, 1, 2, 3])
        np.testing.assert_array_equal(ds.targets[0].ravel(), [4])

    def test_insufficient_data(self):
        with pytest.raises(InsufficientDataError):
            make_windows(series_of(np.arange(4.0)), 4, 1)

    def test_input_rows_immediately_precede_targets(self):
        matrix = np.arange(14.0).reshape(7, 2)
        ds = make_windows(matrix, 3, 2)
        for j in range(len(ds)):
            np.testing.assert_array_equal(ds.inputs[j], matrix[j : j + 3])
            np.testing.assert_array_equal(ds.targets[j], matrix[j + 3 : j + 5])

    @settings(max_examples=80, deadline=None)
    @given(st.integers(1, 8), st.integers(1, 8), st.integers(0, 20))
    def test_count_closed_form(self, k, m, extra):
        T = k + m + extra
        ds = make_windows(np.zeros((T, 2)), k, m)
        assert len(ds) == T - k - m + 1


class TestSplit:
    def make(self, n):
        return make_windows(np.arange(float(n + 3))[:, None], 2, 2)

    def test_eighty_twenty(self):
        train, test = split_dataset(self.make(10), 0.8)
        assert (len(train), len(test)) == (8, 2)

    def test_floor_rule_single_sample(self):
        train, test = split_dataset(self.make(1), 0.8)
        assert (len(train), len(test)) == (0, 1)

    def test_floor_rule_half(self):
        ds = self.make(5)
        train, test = split_dataset(ds, 0.5)
        assert (len(train), len(test)) == (2, 3)
        np.testing.assert_array_equal(train.inputs, ds.inputs[:2])
        np.testing.assert_array_equal(test.inputs, ds.inputs[2:])

    def test_fraction_bounds(self):
        for bad in (0.0, 1.0, -0.2, 1.5):
            with pytest.raises(ConfigError):
                split_dataset(self.make(5), bad)

    def test_empty_dataset(self):
        ds = self.make(5).take(0, 0)
        with pytest.raises(EmptyInputError):
            split_dataset(ds, 0.5)

    @settings(max_examples=50, deadline=None)
    @given(st.integers(1, 40), st.floats(0.01, 0.99))
    def test_counts_preserved_and_ordered(self, n, fraction):
        ds = self.make(n)
        train, test = split_dataset(ds, fraction)
        assert len(train) + len(test) == len(ds)
        merged = np.concatenate([train.inputs, test.inputs]) if len(train) else test.inputs
        np.testing.assert_array_equal(merged, ds.inputs)


class TestSeriesCsv:
    def test_round_trip(self, tmp_path):
        src = series_of(np.random.default_rng(3).uniform(size=(7, 3)),
                        interval=300, start=600, names=("a", "b", "c"))
        path = tmp_path / "series.csv"
        write_series_csv(src, path)
        back = read_series_csv(path)
        assert back.feature_names == ("a", "b", "c")
        assert back.interval_seconds == 300
        assert back.start_time == 600
        np.testing.assert_array_equal(back.values, src.values)

    def test_bad_header(self, tmp_path):
        path = tmp_path / "bad.csv"
        path.write_text("time,a\n0,1\n")
        with pytest.raises(DataError):
            read_series_csv(path)

    def test_non_uniform_timestamps(self, tmp_path):
        path = tmp_path / "bad.csv"
        path.write_text("timestamp,a\n0,1\n300,2\n500,3\n")
        with pytest.raises(DataError):
            read_series_csv(path)
