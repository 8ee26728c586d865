"""Error metrics, latency benchmarking, and cost accounting.

MAE and RMSE are the accuracy surface; the deterministic multiply count
from :func:`loadcast.model.flop_count_per_forecast` is the reproducible
speed surface, with wall-clock latency reported as advisory context.
"""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from .data import WindowedDataset
from .errors import ConfigError, EmptyInputError, InvariantError, ShapeError
from .model import Network, flop_count_per_forecast, network_forward, network_forward_batch


def _check_pair(actual, predicted) -> tuple[np.ndarray, np.ndarray]:
    actual = np.asarray(actual, dtype=np.float64).ravel()
    predicted = np.asarray(predicted, dtype=np.float64).ravel()
    if actual.shape != predicted.shape:
        raise ShapeError(f"actual has {actual.size} entries, predicted has {predicted.size}")
    if actual.size == 0:
        raise EmptyInputError("cannot compute an error metric on zero samples")
    return actual, predicted


def mae(actual, predicted) -> float:
    """Mean absolute error."""
    actual, predicted = _check_pair(actual, predicted)
    return float(np.mean(np.abs(actual - predicted)))


def rmse(actual, predicted) -> float:
    """Root mean squared error; always >= mae on the same pair."""
    actual, predicted = _check_pair(actual, predicted)
    diff = actual - predicted
    return float(np.sqrt(np.mean(diff * diff)))


@dataclass
class EvalReport:
    """Accuracy, size, and speed of one model on one dataset."""

    mae: float
    rmse: float
    n: int
    target_feature: str
    params: int
    flops: int
    latency_mean_us: float
    latency_median_us: float
    latency_p95_us: float
    repetitions: int
    mae_normalized: float | None = None
    rmse_normalized: float | None = None

    def __post_init__(self):
        if self.mae < 0 or self.rmse < 0:
            raise InvariantError("error metrics cannot be negative")
        # Quadratic mean dominates arithmetic mean of |errors|.
        if self.rmse < self.mae - 1e-12:
            raise InvariantError(f"rmse {self.rmse} < mae {self.mae}")

    def to_dict(self) -> dict:
        return {
            "mae": self.mae,
            "rmse": self.rmse,
            "n": self.n,
            "target_feature": self.target_feature,
            "params": self.params,
            "flops": self.flops,
            "latency_mean_us": self.latency_mean_us,
            "latency_median_us": self.latency_median_us,
            "latency_p95_us": self.latency_p95_us,
            "repetitions": self.repetitions,
            "mae_normalized": self.mae_normalized,
            "rmse_normalized": self.rmse_normalized,
        }


def evaluate_next_step(
    net: Network, dataset: WindowedDataset, feature_index: int = 0
) -> tuple[float, float]:
    """(MAE, RMSE) of single-step predictions on one feature column."""
    if len(dataset) == 0:
        raise EmptyInputError("cannot evaluate on an empty dataset")
    pred, _ = network_forward_batch(net, dataset.inputs)
    actual = dataset.targets[:, 0, feature_index]
    predicted = pred[:, feature_index]
    return mae(actual, predicted), rmse(actual, predicted)


@dataclass
class LatencyStats:
    mean_us: float
    median_us: float
    p95_us: float
    repetitions: int
    flops: int


def bench_forecast(net: Network, windows, repetitions: int, warmup: int = 3) -> LatencyStats:
    """Wall-clock per single-window forecast plus the deterministic flop count.

    Runs ``warmup`` untimed passes first, then times
    ``repetitions * len(windows)`` individual forecasts on a monotonic
    clock.  Median is the robust headline; flops are exact.
    """
    if repetitions < 1:
        raise ConfigError(f"repetitions must be >= 1, got {repetitions}")
    windows = np.asarray(windows, dtype=np.float64)
    if windows.ndim == 2:
        windows = windows[None]
    if windows.shape[0] == 0:
        raise EmptyInputError("no windows to benchmark")

    for _ in range(max(warmup, 0)):
        for w in windows:
            network_forward(net, w)

    samples_us = np.empty(repetitions * windows.shape[0])
    pos = 0
    for _ in range(repetitions):
        for w in windows:
            t0 = time.perf_counter()
            network_forward(net, w)
            samples_us[pos] = (time.perf_counter() - t0) * 1e6
            pos += 1
    return LatencyStats(
        mean_us=float(np.mean(samples_us)),
        median_us=float(np.median(samples_us)),
        p95_us=float(np.percentile(samples_us, 95)),
        repetitions=repetitions,
        flops=flop_count_per_forecast(net),
    )
