"""Prequential (predict-then-adapt) streaming evaluation.

Each batch of B fresh observations is first forecast with the current
model and scored on the target feature; only then does the model adapt
on that batch.  Batch errors therefore always measure generalization to
data the model has never trained on, and the model state carries forward
from batch to batch.
"""

from __future__ import annotations

import copy
import math
import time
from dataclasses import dataclass, field, replace

import numpy as np

from .data import MachineSeries
from .errors import ConfigError, InsufficientDataError, NumericError, OptimizationStall
from .model import Network, network_forward_batch, network_from_vector, network_to_vector
from .train import GD, LBFGS, backprop, clip_gradients, gd_step, lbfgs_minimize


@dataclass(frozen=True)
class OnlineConfig:
    batch_size: int = 128
    optimizer: str = GD
    adapt_epochs: int = 1  # 0 disables adaptation (static baseline)
    learning_rate: float = 1e-3
    lbfgs_memory: int = 10
    lbfgs_max_iters: int = 20
    convergence_tol: float = 1e-8
    clip_norm: float | None = 5.0

    def __post_init__(self):
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.optimizer not in (GD, LBFGS):
            raise ConfigError(f"optimizer must be {GD!r} or {LBFGS!r}, got {self.optimizer!r}")
        if self.adapt_epochs < 0:
            raise ConfigError(f"adapt_epochs must be >= 0, got {self.adapt_epochs}")
        if self.learning_rate <= 0:
            raise ConfigError(f"learning_rate must be > 0, got {self.learning_rate}")


@dataclass
class BatchRecord:
    index: int
    start_row: int  # first stream row forecast by this batch
    end_row: int  # one past the last forecast row
    mae: float
    rmse: float
    cumulative_mae: float
    cumulative_rmse: float
    adapt_seconds: float


@dataclass
class OnlineRunReport:
    batch_size: int
    lookback_k: int
    target_feature: int
    batches: list[BatchRecord]
    cumulative_mae: float
    cumulative_rmse: float
    failed_batch_index: int | None = None
    failure: str | None = None
    final_network: Network | None = field(default=None, repr=False)

    @property
    def batch_count(self) -> int:
        return len(self.batches)

    def to_dict(self) -> dict:
        return {
            "batch_size": self.batch_size,
            "lookback_k": self.lookback_k,
            "target_feature": self.target_feature,
            "batch_count": self.batch_count,
            "cumulative_mae": self.cumulative_mae,
            "cumulative_rmse": self.cumulative_rmse,
            "final_batch_mae": self.batches[-1].mae if self.batches else None,
            "final_batch_rmse": self.batches[-1].rmse if self.batches else None,
            "failed_batch_index": self.failed_batch_index,
            "failure": self.failure,
            "batches": [
                {
                    "batch_index": b.index,
                    "mae": b.mae,
                    "rmse": b.rmse,
                    "cumulative_mae": b.cumulative_mae,
                    "cumulative_rmse": b.cumulative_rmse,
                    "adapt_seconds": b.adapt_seconds,
                }
                for b in self.batches
            ],
        }


def _stream_matrix(stream) -> np.ndarray:
    if isinstance(stream, MachineSeries):
        return stream.values
    return np.asarray(stream, dtype=np.float64)


def _adapt(net: Network, inputs: np.ndarray, targets: np.ndarray, config: OnlineConfig) -> Network:
    batch = (inputs, targets)
    if config.optimizer == GD:
        for _ in range(config.adapt_epochs):
            _, grads = backprop(net, batch)
            grads, _ = clip_gradients(grads, config.clip_norm)
            net = gd_step(net, grads, config.learning_rate)
        return net

    # L-BFGS: one bounded minimisation per batch; curvature history starts
    # fresh each time since pairs straddling a distribution shift are stale.
    def objective(vec: np.ndarray):
        candidate = network_from_vector(net, vec)
        loss, grads = backprop(candidate, batch)
        return loss, grads.to_vector()

    try:
        result = lbfgs_minimize(
            objective,
            network_to_vector(net),
            memory=config.lbfgs_memory,
            max_iters=config.lbfgs_max_iters,
            tol=config.convergence_tol,
        )
        return network_from_vector(net, result.x)
    except OptimizationStall as stall:
        return network_from_vector(net, stall.best_x)


def prequential_run(
    net: Network,
    stream,
    config: OnlineConfig,
    target_feature: int = 0,
    on_batch=None,
) -> OnlineRunReport:
    """Stream unseen observations batch by batch: forecast, score, adapt.

    The stream must already be in the model's normalized units.  Exactly
    floor((len(stream) - k) / B) batches are processed.  ``on_batch``,
    when given, receives each finished :class:`BatchRecord` so long runs
    are observable mid-flight.  On a numeric failure during adaptation
    the report is returned partially filled with ``failed_batch_index``
    set instead of raising.
    """
    matrix = _stream_matrix(stream)
    k = net.lookback_k
    B = config.batch_size
    eligible = matrix.shape[0] - k
    n_batches = eligible // B if eligible > 0 else 0
    if n_batches < 1:
        raise InsufficientDataError(
            f"stream of length {matrix.shape[0]} has no complete batch "
            f"(lookback {k}, batch size {B})"
        )

    records: list[BatchRecord] = []
    abs_sum = 0.0
    sq_sum = 0.0
    n_points = 0
    failed_at: int | None = None
    failure: str | None = None

    for b in range(n_batches):
        t0 = k + b * B
        t1 = t0 + B
        starts = np.arange(t0 - k, t1 - k)[:, None] + np.arange(k)[None, :]
        inputs = matrix[starts]
        actual_rows = matrix[t0:t1]

        pred, _ = network_forward_batch(net, inputs)
        err = actual_rows[:, target_feature] - pred[:, target_feature]
        batch_abs = float(np.sum(np.abs(err)))
        batch_sq = float(np.sum(err * err))
        abs_sum += batch_abs
        sq_sum += batch_sq
        n_points += B

        adapt_seconds = 0.0
        if config.adapt_epochs > 0:
            started = time.perf_counter()
            try:
                net = _adapt(net, inputs, actual_rows[:, None, :], config)
            except NumericError as exc:
                failed_at = b
                failure = str(exc)
            adapt_seconds = time.perf_counter() - started

        record = BatchRecord(
            index=b,
            start_row=t0,
            end_row=t1,
            mae=batch_abs / B,
            rmse=math.sqrt(batch_sq / B),
            cumulative_mae=abs_sum / n_points,
            cumulative_rmse=math.sqrt(sq_sum / n_points),
            adapt_seconds=adapt_seconds,
        )
        records.append(record)
        if on_batch is not None:
            on_batch(record)
        if failed_at is not None:
            break

    return OnlineRunReport(
        batch_size=B,
        lookback_k=k,
        target_feature=target_feature,
        batches=records,
        cumulative_mae=abs_sum / n_points,
        cumulative_rmse=math.sqrt(sq_sum / n_points),
        failed_batch_index=failed_at,
        failure=failure,
        final_network=net,
    )


def segment_errors(report: OnlineRunReport, from_row: int) -> tuple[float, float]:
    """(MAE, RMSE) over the batches whose forecasts start at or after a row.

    Used to isolate post-drift behaviour without re-running the stream.
    """
    abs_sum = sq_sum = 0.0
    n = 0
    for rec in report.batches:
        if rec.start_row >= from_row:
            count = rec.end_row - rec.start_row
            abs_sum += rec.mae * count
            sq_sum += rec.rmse * rec.rmse * count
            n += count
    if n == 0:
        raise InsufficientDataError(f"no batches start at or after row {from_row}")
    return abs_sum / n, math.sqrt(sq_sum / n)


@dataclass
class BatchSizeRow:
    batch_size: int
    cumulative_mae: float
    cumulative_rmse: float
    batch_count: int
    error: str | None = None


def compare_batch_sizes(
    net: Network,
    stream,
    sizes,
    config: OnlineConfig,
    target_feature: int = 0,
) -> list[BatchSizeRow]:
    """Independent prequential runs, one per batch size, from clones of ``net``.

    Every run starts from an identical snapshot of the model; rows come
    back sorted by batch size.  A failing size is marked and the rest
    proceed.
    """
    rows: list[BatchSizeRow] = []
    for B in sorted(set(int(s) for s in sizes)):
        run_config = replace(config, batch_size=B)
        try:
            report = prequential_run(copy.deepcopy(net), stream, run_config, target_feature)
            if report.failed_batch_index is not None:
                rows.append(
                    BatchSizeRow(B, float("nan"), float("nan"), report.batch_count,
                                 error=f"numeric failure at batch {report.failed_batch_index}")
                )
            else:
                rows.append(
                    BatchSizeRow(B, report.cumulative_mae, report.cumulative_rmse,
                                 report.batch_count)
                )
        except (InsufficientDataError, NumericError, ConfigError) as exc:
            rows.append(BatchSizeRow(B, float("nan"), float("nan"), 0, error=str(exc)))
    return rows
