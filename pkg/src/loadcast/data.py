"""Trace ingestion and dataset preparation.

Raw per-task usage records are aggregated into one uniformly spaced
multivariate series per machine, gaps are repaired by interpolation,
features are min-max scaled, and the series is cut into lookback/horizon
windows for supervised training.

All functions are pure: inputs are never mutated and every returned
object is safe to share between threads.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from typing import IO, Iterable, Iterator, Sequence

import numpy as np

from .errors import (
    ConfigError,
    DataError,
    EmptyInputError,
    EmptySeriesError,
    InsufficientDataError,
    ShapeError,
    UnrecoverableFeatureError,
)

#: Feature order used everywhere downstream of aggregation.
FEATURE_NAMES = ("cpu_rate", "memory", "disk_io_time", "disk_space")

#: Default aggregation bucket width in seconds (five-minute reporting period).
DEFAULT_INTERVAL = 300


@dataclass(frozen=True)
class ColumnSchema:
    """0-based column positions of the trace fields in a delimited file.

    Defaults match the public cluster task-usage table layout:
    start time, end time, job id, task index, machine id, CPU rate,
    canonical memory, ..., disk I/O time (col 11), disk space (col 12).
    """

    window_start: int = 0
    machine_id: int = 4
    cpu_rate: int = 5
    memory: int = 6
    disk_io_time: int = 11
    disk_space: int = 12

    def __post_init__(self):
        cols = {
            "window_start": self.window_start,
            "machine_id": self.machine_id,
            "cpu_rate": self.cpu_rate,
            "memory": self.memory,
            "disk_io_time": self.disk_io_time,
            "disk_space": self.disk_space,
        }
        for name, col in cols.items():
            if not isinstance(col, int) or col < 0:
                raise ConfigError(f"schema column for {name!r} must be a non-negative integer, got {col!r}")
        positions = list(cols.values())
        if len(set(positions)) != len(positions):
            raise ConfigError(f"schema maps two fields to the same column: {cols}")

    @property
    def mandatory_columns(self) -> tuple[int, ...]:
        return (self.window_start, self.machine_id, self.cpu_rate, self.memory, self.disk_space)

    @property
    def max_column(self) -> int:
        return max(self.mandatory_columns)


@dataclass(frozen=True)
class TraceRecord:
    """One raw usage measurement for one task on one machine."""

    window_start: int
    machine_id: str
    cpu_rate: float
    memory: float
    disk_io_time: float | None
    disk_space: float


@dataclass
class ParseResult:
    records: list[TraceRecord]
    skipped: int


@dataclass(frozen=True)
class MachineSeries:
    """Uniformly spaced multivariate usage series for a single machine.

    Row t holds the feature vector observed at
    ``start_time + t * interval_seconds``.  Missing buckets are NaN until
    :func:`interpolate_missing` repairs them.
    """

    machine_id: str
    interval_seconds: int
    start_time: int
    values: np.ndarray
    feature_names: tuple[str, ...]

    def __post_init__(self):
        if self.interval_seconds <= 0:
            raise ConfigError(f"interval_seconds must be > 0, got {self.interval_seconds}")
        values = np.asarray(self.values, dtype=np.float64)
        if values.ndim != 2:
            raise ShapeError(f"series values must be a T x N matrix, got shape {values.shape}")
        if values.shape[1] != len(self.feature_names):
            raise ShapeError(
                f"{values.shape[1]} value columns but {len(self.feature_names)} feature names"
            )
        if len(set(self.feature_names)) != len(self.feature_names):
            raise ConfigError(f"duplicate feature names: {self.feature_names}")
        if len(self.feature_names) < 1:
            raise ConfigError("a series needs at least one feature")
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "feature_names", tuple(self.feature_names))

    def __len__(self) -> int:
        return self.values.shape[0]

    @property
    def n_features(self) -> int:
        return self.values.shape[1]

    @property
    def timestamps(self) -> np.ndarray:
        return self.start_time + np.arange(len(self)) * self.interval_seconds

    def has_missing(self) -> bool:
        return bool(np.isnan(self.values).any())

    def with_values(self, values: np.ndarray) -> "MachineSeries":
        return MachineSeries(
            machine_id=self.machine_id,
            interval_seconds=self.interval_seconds,
            start_time=self.start_time,
            values=values,
            feature_names=self.feature_names,
        )


@dataclass(frozen=True)
class ScalerParams:
    """Per-feature min/max of the fitted range plus degenerate flags."""

    minimum: np.ndarray
    maximum: np.ndarray
    degenerate_mask: np.ndarray

    def __post_init__(self):
        minimum = np.asarray(self.minimum, dtype=np.float64)
        maximum = np.asarray(self.maximum, dtype=np.float64)
        mask = np.asarray(self.degenerate_mask, dtype=bool)
        if not (minimum.shape == maximum.shape == mask.shape) or minimum.ndim != 1:
            raise ShapeError("scaler minimum/maximum/degenerate_mask must be equal-length vectors")
        if np.any(maximum < minimum):
            raise DataError("scaler maximum < minimum for some feature")
        object.__setattr__(self, "minimum", minimum)
        object.__setattr__(self, "maximum", maximum)
        object.__setattr__(self, "degenerate_mask", mask)

    @property
    def n_features(self) -> int:
        return self.minimum.shape[0]


@dataclass(frozen=True)
class WindowedDataset:
    """Supervised samples: k observed rows in, the next m rows out."""

    lookback_k: int
    horizon_m: int
    inputs: np.ndarray  # (S, k, N)
    targets: np.ndarray  # (S, m, N)
    feature_names: tuple[str, ...]

    def __post_init__(self):
        inputs = np.asarray(self.inputs, dtype=np.float64)
        targets = np.asarray(self.targets, dtype=np.float64)
        if inputs.ndim != 3 or targets.ndim != 3:
            raise ShapeError("inputs/targets must be (S, steps, N) arrays")
        if inputs.shape[0] != targets.shape[0]:
            raise ShapeError("inputs and targets disagree on sample count")
        if inputs.shape[1] != self.lookback_k or targets.shape[1] != self.horizon_m:
            raise ShapeError("window shapes disagree with lookback/horizon")
        if inputs.shape[2] != targets.shape[2] or inputs.shape[2] != len(self.feature_names):
            raise ShapeError("feature dimension mismatch in windowed dataset")
        object.__setattr__(self, "inputs", inputs)
        object.__setattr__(self, "targets", targets)
        object.__setattr__(self, "feature_names", tuple(self.feature_names))

    def __len__(self) -> int:
        return self.inputs.shape[0]

    def __getitem__(self, j: int) -> tuple[np.ndarray, np.ndarray]:
        return self.inputs[j], self.targets[j]

    @property
    def samples(self) -> list[tuple[np.ndarray, np.ndarray]]:
        return [(self.inputs[j], self.targets[j]) for j in range(len(self))]

    def take(self, start: int, stop: int) -> "WindowedDataset":
        return WindowedDataset(
            lookback_k=self.lookback_k,
            horizon_m=self.horizon_m,
            inputs=self.inputs[start:stop],
            targets=self.targets[start:stop],
            feature_names=self.feature_names,
        )


def _text_lines(source) -> Iterable[str]:
    if isinstance(source, (bytes, bytearray)):
        return io.StringIO(source.decode("utf-8"))
    if isinstance(source, str):
        return io.StringIO(source)
    if isinstance(source, io.TextIOBase):
        return source
    if hasattr(source, "read"):
        return io.TextIOWrapper(source, encoding="utf-8")
    return source  # already an iterable of lines


def _parse_float_field(text: str) -> float:
    value = float(text)
    if not math.isfinite(value) or value < 0.0:
        raise ValueError(f"resource value must be finite and non-negative, got {text!r}")
    return value


def parse_trace(
    source,
    schema: ColumnSchema | None = None,
    *,
    delimiter: str = ",",
    header: bool = False,
) -> ParseResult:
    """Stream raw trace rows into :class:`TraceRecord` objects.

    Rows whose mandatory fields are absent or unparseable are counted and
    skipped.  An empty ``disk_io_time`` field yields ``None`` (missing).
    If every data row lacks a mandatory column the schema is presumed
    wrong and a :class:`ConfigError` is raised.
    """
    schema = schema or ColumnSchema()
    records: list[TraceRecord] = []
    skipped = 0
    saw_rows = False
    saw_wide_enough_row = False

    reader = csv.reader(_text_lines(source), delimiter=delimiter)
    for i, row in enumerate(reader):
        if header and i == 0:
            continue
        if not row or all(not cell.strip() for cell in row):
            continue
        saw_rows = True
        if len(row) <= schema.max_column:
            skipped += 1
            continue
        saw_wide_enough_row = True
        try:
            window_start = int(float(row[schema.window_start]))
            machine_id = row[schema.machine_id].strip()
            if not machine_id:
                raise ValueError("empty machine id")
            cpu_rate = _parse_float_field(row[schema.cpu_rate])
            memory = _parse_float_field(row[schema.memory])
            disk_space = _parse_float_field(row[schema.disk_space])
            disk_io_raw = row[schema.disk_io_time].strip() if schema.disk_io_time < len(row) else ""
            disk_io_time = _parse_float_field(disk_io_raw) if disk_io_raw else None
        except ValueError:
            skipped += 1
            continue
        records.append(
            TraceRecord(
                window_start=window_start,
                machine_id=machine_id,
                cpu_rate=cpu_rate,
                memory=memory,
                disk_io_time=disk_io_time,
                disk_space=disk_space,
            )
        )

    if saw_rows and not saw_wide_enough_row:
        raise ConfigError(
            f"schema references column {schema.max_column} but no input row is that wide"
        )
    return ParseResult(records=records, skipped=skipped)


def aggregate_machine_usage(
    records: Sequence[TraceRecord],
    machine: str,
    interval: int = DEFAULT_INTERVAL,
) -> MachineSeries:
    """Sum concurrent task usage into per-bucket machine totals.

    Buckets are half-open ``[start, start + interval)`` intervals.  A
    bucket with no contributing value for a feature is NaN; repair those
    with :func:`interpolate_missing`.
    """
    if interval <= 0:
        raise ConfigError(f"aggregation interval must be > 0, got {interval}")
    mine = [r for r in records if r.machine_id == machine]
    if not mine:
        raise EmptySeriesError(f"no trace records for machine {machine!r}")

    buckets = [r.window_start // interval for r in mine]
    first, last = min(buckets), max(buckets)
    n_buckets = last - first + 1
    n_feat = len(FEATURE_NAMES)

    sums = np.zeros((n_buckets, n_feat))
    counts = np.zeros((n_buckets, n_feat), dtype=np.int64)
    for r, b in zip(mine, buckets):
        row = b - first
        contributions = (r.cpu_rate, r.memory, r.disk_io_time, r.disk_space)
        for j, value in enumerate(contributions):
            if value is None:
                continue
            sums[row, j] += value
            counts[row, j] += 1

    values = np.where(counts > 0, sums, np.nan)
    return MachineSeries(
        machine_id=machine,
        interval_seconds=interval,
        start_time=first * interval,
        values=values,
        feature_names=FEATURE_NAMES,
    )


def interpolate_missing(series: MachineSeries) -> MachineSeries:
    """Fill NaN gaps: linear between neighbours, nearest value at the edges."""
    values = series.values.copy()
    t = np.arange(values.shape[0])
    for j, name in enumerate(series.feature_names):
        col = values[:, j]
        known = np.flatnonzero(np.isfinite(col))
        if known.size == 0:
            raise UnrecoverableFeatureError(name)
        if known.size == len(col):
            continue
        # np.interp clamps outside the known range, which is exactly the
        # nearest-value edge extension we want.
        values[:, j] = np.interp(t, known, col[known])
    return series.with_values(values)


def _as_matrix(data) -> np.ndarray:
    if isinstance(data, MachineSeries):
        return data.values
    return np.asarray(data, dtype=np.float64)


def _resolve_fit_rows(n_rows: int, fit_rows) -> slice:
    if fit_rows is None:
        return slice(0, n_rows)
    if isinstance(fit_rows, slice):
        return fit_rows
    if isinstance(fit_rows, tuple) and len(fit_rows) == 2:
        return slice(fit_rows[0], fit_rows[1])
    raise ConfigError(f"fit_rows must be None, a slice, or a (start, stop) pair, got {fit_rows!r}")


def fit_scaler(data, fit_rows=None) -> ScalerParams:
    """Compute per-feature min/max over ``fit_rows`` (default: all rows)."""
    matrix = _as_matrix(data)
    if matrix.ndim != 2:
        raise ShapeError(f"expected a T x N matrix, got shape {matrix.shape}")
    window = matrix[_resolve_fit_rows(matrix.shape[0], fit_rows)]
    if window.shape[0] == 0:
        raise ConfigError("scaler fit range is empty")
    minimum = window.min(axis=0)
    maximum = window.max(axis=0)
    return ScalerParams(
        minimum=minimum,
        maximum=maximum,
        degenerate_mask=(maximum == minimum),
    )


def _check_scaler_shape(matrix: np.ndarray, params: ScalerParams):
    if matrix.shape[-1] != params.n_features:
        raise ShapeError(
            f"data has {matrix.shape[-1]} features but scaler was fitted on {params.n_features}"
        )


def apply_scaler(data, params: ScalerParams):
    """Map each feature through (x - min) / (max - min); no clipping.

    Degenerate (constant) features map to 0.0.  Values outside the fitted
    range deliberately land outside [0, 1] so drift stays visible.
    """
    matrix = _as_matrix(data)
    _check_scaler_shape(matrix, params)
    span = np.where(params.degenerate_mask, 1.0, params.maximum - params.minimum)
    scaled = (matrix - params.minimum) / span
    scaled = np.where(params.degenerate_mask, 0.0, scaled)
    if isinstance(data, MachineSeries):
        return data.with_values(scaled)
    return scaled


def invert_scaler(data, params: ScalerParams):
    """Inverse of :func:`apply_scaler`; degenerate features restore their constant."""
    matrix = _as_matrix(data)
    _check_scaler_shape(matrix, params)
    span = np.where(params.degenerate_mask, 0.0, params.maximum - params.minimum)
    restored = matrix * span + params.minimum
    if isinstance(data, MachineSeries):
        return data.with_values(restored)
    return restored


def make_windows(data, k: int, m: int) -> WindowedDataset:
    """Cut a length-T series into T - k - m + 1 (lookback, horizon) samples."""
    if k < 1 or m < 1:
        raise ConfigError(f"lookback and horizon must be >= 1, got k={k}, m={m}")
    matrix = _as_matrix(data)
    if matrix.ndim != 2:
        raise ShapeError(f"expected a T x N matrix, got shape {matrix.shape}")
    T = matrix.shape[0]
    if T < k + m:
        raise InsufficientDataError(f"series length {T} < lookback {k} + horizon {m}")
    n_samples = T - k - m + 1
    starts = np.arange(n_samples)[:, None]
    inputs = matrix[starts + np.arange(k)[None, :]]
    targets = matrix[starts + k + np.arange(m)[None, :]]
    feature_names = (
        data.feature_names
        if isinstance(data, MachineSeries)
        else tuple(f"f{j}" for j in range(matrix.shape[1]))
    )
    return WindowedDataset(
        lookback_k=k, horizon_m=m, inputs=inputs, targets=targets, feature_names=feature_names
    )


def split_dataset(
    dataset: WindowedDataset, train_fraction: float
) -> tuple[WindowedDataset, WindowedDataset]:
    """Chronological split: first floor(fraction * S) samples train, rest test."""
    if not 0.0 < train_fraction < 1.0:
        raise ConfigError(f"train_fraction must lie in (0, 1), got {train_fraction}")
    if len(dataset) == 0:
        raise EmptyInputError("cannot split an empty dataset")
    n_train = math.floor(train_fraction * len(dataset))
    return dataset.take(0, n_train), dataset.take(n_train, len(dataset))


def write_series_csv(series: MachineSeries, target) -> None:
    """Write the canonical series file: ``timestamp,<feature...>`` rows."""

    def _write(fh: IO[str]):
        writer = csv.writer(fh)
        writer.writerow(("timestamp", *series.feature_names))
        for ts, row in zip(series.timestamps, series.values):
            writer.writerow((int(ts), *(repr(float(v)) for v in row)))

    if hasattr(target, "write"):
        _write(target)
    else:
        with open(target, "w", newline="") as fh:
            _write(fh)


def read_series_csv(source, machine_id: str = "") -> MachineSeries:
    """Read a canonical series file back into a :class:`MachineSeries`."""

    def _read(fh) -> MachineSeries:
        reader = csv.reader(fh)
        try:
            head = next(reader)
        except StopIteration:
            raise DataError("series file is empty") from None
        if not head or head[0] != "timestamp":
            raise DataError(f"series file must start with a 'timestamp' header, got {head!r}")
        feature_names = tuple(head[1:])
        timestamps: list[int] = []
        rows: list[list[float]] = []
        for row in reader:
            if not row:
                continue
            if len(row) != len(head):
                raise DataError(f"series row has {len(row)} fields, expected {len(head)}")
            timestamps.append(int(row[0]))
            rows.append([float(v) for v in row[1:]])
        if not rows:
            raise DataError("series file has a header but no rows")
        if len(timestamps) > 1:
            steps = np.diff(timestamps)
            if np.any(steps != steps[0]) or steps[0] <= 0:
                raise DataError("series timestamps are not uniformly increasing")
            interval = int(steps[0])
        else:
            interval = DEFAULT_INTERVAL
        return MachineSeries(
            machine_id=machine_id,
            interval_seconds=interval,
            start_time=timestamps[0],
            values=np.asarray(rows, dtype=np.float64),
            feature_names=feature_names,
        )

    if hasattr(source, "read"):
        return _read(source)
    with open(source, newline="") as fh:
        return _read(fh)
