"""Loss, backpropagation through time, optimizers, and grid search.

Training minimises mean squared error of the single-next-step prediction
against the first target row of each window; multistep accuracy then
follows from recursive forecasting.  Gradients are exact reverse-mode
derivatives unrolled across all lookback steps and layers, and can be
cross-checked against the central-difference oracle in this module.
"""

from __future__ import annotations

import itertools
import math
import time
from dataclasses import dataclass, field, replace
from typing import Callable, Sequence

import numpy as np

from .data import WindowedDataset, make_windows, split_dataset
from .errors import (
    ConfigError,
    DataError,
    EmptyInputError,
    NumericError,
    OptimizationStall,
    SearchError,
    ShapeError,
)
from .model import (
    GRU,
    LSTM,
    Network,
    init_network,
    iter_param_blocks,
    network_forward_batch,
    network_from_vector,
    network_to_vector,
    network_with_blocks,
    param_count,
)

GD = "gd"
LBFGS = "lbfgs"


@dataclass
class GradientSet:
    """Partial derivatives of the loss, one block per network parameter block."""

    blocks: dict[str, np.ndarray]

    @classmethod
    def zeros_like(cls, net: Network) -> "GradientSet":
        return cls({name: np.zeros_like(block) for name, block in iter_param_blocks(net)})

    def __getitem__(self, name: str) -> np.ndarray:
        return self.blocks[name]

    def to_vector(self) -> np.ndarray:
        return np.concatenate([b.ravel() for b in self.blocks.values()])

    def global_norm(self) -> float:
        return float(np.sqrt(sum(float(np.sum(b * b)) for b in self.blocks.values())))

    def scaled(self, factor: float) -> "GradientSet":
        return GradientSet({name: b * factor for name, b in self.blocks.items()})

    def check_congruent(self, net: Network) -> None:
        for name, block in iter_param_blocks(net):
            if name not in self.blocks or self.blocks[name].shape != block.shape:
                raise ShapeError(f"gradient block {name!r} does not match the network")


@dataclass(frozen=True)
class TrainConfig:
    optimizer: str = GD
    learning_rate: float = 1e-3
    epochs: int = 100
    batch_size: int = 32
    seed: int = 42
    lbfgs_memory: int = 10
    lbfgs_max_iters: int = 100
    convergence_tol: float = 1e-8
    clip_norm: float | None = 5.0
    freeze_biases: bool = False

    def __post_init__(self):
        if self.optimizer not in (GD, LBFGS):
            raise ConfigError(f"optimizer must be {GD!r} or {LBFGS!r}, got {self.optimizer!r}")
        if self.learning_rate <= 0:
            raise ConfigError(f"learning_rate must be > 0, got {self.learning_rate}")
        if self.epochs < 0:
            raise ConfigError(f"epochs must be >= 0, got {self.epochs}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.lbfgs_memory < 1:
            raise ConfigError(f"lbfgs_memory must be >= 1, got {self.lbfgs_memory}")
        if self.lbfgs_max_iters < 1:
            raise ConfigError(f"lbfgs_max_iters must be >= 1, got {self.lbfgs_max_iters}")
        if self.convergence_tol <= 0:
            raise ConfigError(f"convergence_tol must be > 0, got {self.convergence_tol}")
        if self.clip_norm is not None and self.clip_norm <= 0:
            raise ConfigError(f"clip_norm must be > 0 or None, got {self.clip_norm}")


@dataclass(frozen=True)
class GridSpec:
    hidden_sizes: tuple[int, ...] = (32, 64)
    layer_counts: tuple[int, ...] = (1, 3, 5)
    lookbacks: tuple[int, ...] = (4, 8, 12)

    def __post_init__(self):
        for name in ("hidden_sizes", "layer_counts", "lookbacks"):
            values = tuple(sorted(set(getattr(self, name))))
            if not values:
                raise ConfigError(f"grid {name} must be non-empty")
            if any(v < 1 for v in values):
                raise ConfigError(f"grid {name} must contain positive integers")
            object.__setattr__(self, name, values)

    @property
    def candidate_count(self) -> int:
        return len(self.hidden_sizes) * len(self.layer_counts) * len(self.lookbacks)

    def candidates(self):
        return itertools.product(self.hidden_sizes, self.layer_counts, self.lookbacks)


@dataclass
class TrainReport:
    epoch_losses: list[float]
    val_mae: float
    val_rmse: float
    seconds: float
    seed: int
    config: TrainConfig


@dataclass
class GridCandidate:
    hidden: int
    layers: int
    lookback: int
    rmse: float
    mae: float
    params: int
    seconds: float
    error: str | None = None


@dataclass
class GridSearchResult:
    best: GridCandidate
    table: list[GridCandidate]


def _stack_batch(batch) -> tuple[np.ndarray, np.ndarray]:
    """Normalize a batch (WindowedDataset, pair of arrays, or sample list)."""
    if isinstance(batch, WindowedDataset):
        return batch.inputs, batch.targets
    if isinstance(batch, tuple) and len(batch) == 2 and not isinstance(batch[0], tuple):
        inputs, targets = np.asarray(batch[0], float), np.asarray(batch[1], float)
    else:
        pairs = list(batch)
        if not pairs:
            raise EmptyInputError("batch is empty")
        inputs = np.stack([np.asarray(x, float) for x, _ in pairs])
        targets = np.stack([np.asarray(y, float) for _, y in pairs])
    if inputs.ndim == 2:
        inputs = inputs[None]
    if targets.ndim == 2:
        targets = targets[None]
    if inputs.shape[0] == 0:
        raise EmptyInputError("batch is empty")
    return inputs, targets


def mse_loss(pred, target) -> float:
    """Mean over all entries of squared error."""
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape:
        raise ShapeError(f"pred shape {pred.shape} != target shape {target.shape}")
    diff = pred - target
    return float(np.mean(diff * diff))


def batch_loss(net: Network, batch) -> float:
    """Batch-mean single-step MSE, the training objective."""
    inputs, targets = _stack_batch(batch)
    pred, _ = network_forward_batch(net, inputs)
    return mse_loss(pred, targets[:, 0, :])


def _gru_cell_backward(params, cache, dh, acc):
    x, h_prev = cache["x"], cache["h_prev"]
    z, r, rh, h_tilde = cache["z"], cache["r"], cache["rh"], cache["h_tilde"]

    dz = dh * (h_tilde - h_prev)
    dh_tilde = dh * z
    dh_prev = dh * (1.0 - z)

    da_h = dh_tilde * (1.0 - h_tilde * h_tilde)
    acc["W_h"] += da_h.T @ x
    acc["U_h"] += da_h.T @ rh
    acc["b_h"] += da_h.sum(axis=0)
    drh = da_h @ params.U_h
    dh_prev += drh * r

    da_r = (drh * h_prev) * r * (1.0 - r)
    acc["W_r"] += da_r.T @ x
    acc["U_r"] += da_r.T @ h_prev
    acc["b_r"] += da_r.sum(axis=0)
    dh_prev += da_r @ params.U_r

    da_z = dz * z * (1.0 - z)
    acc["W_z"] += da_z.T @ x
    acc["U_z"] += da_z.T @ h_prev
    acc["b_z"] += da_z.sum(axis=0)
    dh_prev += da_z @ params.U_z

    dx = da_z @ params.W_z + da_r @ params.W_r + da_h @ params.W_h
    return dx, dh_prev


def _lstm_cell_backward(params, cache, dh, dc_in, acc):
    x, h_prev, c_prev = cache["x"], cache["h_prev"], cache["c_prev"]
    f, i, c_tilde, o = cache["f"], cache["i"], cache["c_tilde"], cache["o"]
    c, tanh_c = cache["c"], cache["tanh_c"]

    do = dh * tanh_c
    da_o = do * o * (1.0 - o)
    # The output gate peeks at c_t, so dc collects that path too.
    dc = dc_in + dh * o * (1.0 - tanh_c * tanh_c) + da_o * params.V_o
    acc["W_o"] += da_o.T @ x
    acc["U_o"] += da_o.T @ h_prev
    acc["V_o"] += (da_o * c).sum(axis=0)
    acc["b_o"] += da_o.sum(axis=0)

    dc_tilde = dc * i
    da_c = dc_tilde * (1.0 - c_tilde * c_tilde)
    acc["W_c"] += da_c.T @ x
    acc["U_c"] += da_c.T @ h_prev
    acc["b_c"] += da_c.sum(axis=0)

    da_i = (dc * c_tilde) * i * (1.0 - i)
    acc["W_i"] += da_i.T @ x
    acc["U_i"] += da_i.T @ h_prev
    acc["V_i"] += (da_i * c_prev).sum(axis=0)
    acc["b_i"] += da_i.sum(axis=0)

    da_f = (dc * c_prev) * f * (1.0 - f)
    acc["W_f"] += da_f.T @ x
    acc["U_f"] += da_f.T @ h_prev
    acc["V_f"] += (da_f * c_prev).sum(axis=0)
    acc["b_f"] += da_f.sum(axis=0)

    dc_prev = dc * f + da_f * params.V_f + da_i * params.V_i
    dh_prev = da_f @ params.U_f + da_i @ params.U_i + da_c @ params.U_c + da_o @ params.U_o
    dx = da_f @ params.W_f + da_i @ params.W_i + da_c @ params.W_c + da_o @ params.W_o
    return dx, dh_prev, dc_prev


def backprop(net: Network, batch) -> tuple[float, GradientSet]:
    """Exact loss gradients via reverse accumulation through time.

    Loss is the batch-mean MSE of single-step predictions against each
    sample's first target row; gradients are averaged over the batch.
    """
    inputs, targets = _stack_batch(batch)
    B, k, N = inputs.shape
    pred, caches = network_forward_batch(net, inputs)
    y = targets[:, 0, :]
    if y.shape != pred.shape:
        raise ShapeError(f"target row shape {y.shape} != prediction shape {pred.shape}")
    diff = pred - y
    loss = float(np.mean(diff * diff))
    if not math.isfinite(loss):
        raise NumericError("non-finite training loss")

    grads = GradientSet.zeros_like(net)
    dpred = 2.0 * diff / diff.size

    # Final top-layer hidden state, recomputed from the last cache.
    last = caches[-1][-1]
    if net.cell_kind == GRU:
        h_final = (1.0 - last["z"]) * last["h_prev"] + last["z"] * last["h_tilde"]
    else:
        h_final = last["o"] * last["tanh_c"]

    grads.blocks["head_W"] += dpred.T @ h_final
    grads.blocks["head_b"] += dpred.sum(axis=0)

    # incoming[t]: gradient wrt the current layer's hidden state at step t
    # arriving from outside the layer's own recurrence.
    incoming = [np.zeros((B, net.hidden_widths[-1])) for _ in range(k)]
    incoming[k - 1] = dpred @ net.head_W

    for l in range(net.layer_count - 1, -1, -1):
        params = net.layers[l]
        acc = {name: grads.blocks[f"layers.{l}.{name}"] for name in params.block_names}
        dh_carry = np.zeros((B, params.hidden_width))
        dc_carry = np.zeros((B, params.hidden_width))
        dx_out: list[np.ndarray] = [None] * k  # type: ignore[list-item]
        for t in range(k - 1, -1, -1):
            dh = incoming[t] + dh_carry
            if net.cell_kind == GRU:
                dx_out[t], dh_carry = _gru_cell_backward(params, caches[t][l], dh, acc)
            else:
                dx_out[t], dh_carry, dc_carry = _lstm_cell_backward(
                    params, caches[t][l], dh, dc_carry, acc
                )
        incoming = dx_out
    return loss, grads


def central_difference(objective: Callable[[np.ndarray], float], theta: np.ndarray,
                       epsilon: float) -> np.ndarray:
    """(J(t + e) - J(t - e)) / 2e per coordinate; exact for quadratics."""
    if epsilon <= 0:
        raise ConfigError(f"epsilon must be > 0, got {epsilon}")
    theta = np.asarray(theta, dtype=np.float64)
    grad = np.zeros_like(theta)
    probe = theta.copy()
    for j in range(theta.size):
        probe[j] = theta[j] + epsilon
        up = objective(probe)
        probe[j] = theta[j] - epsilon
        down = objective(probe)
        probe[j] = theta[j]
        grad[j] = (up - down) / (2.0 * epsilon)
    return grad


def finite_diff_grad(net: Network, batch, epsilon: float = 1e-5) -> GradientSet:
    """Central-difference gradient oracle; linear in parameter count.

    Meant for small verification networks only.
    """
    inputs, targets = _stack_batch(batch)
    theta = network_to_vector(net)

    def objective(vec: np.ndarray) -> float:
        return batch_loss(network_from_vector(net, vec), (inputs, targets))

    flat = central_difference(objective, theta, epsilon)
    zeros = GradientSet.zeros_like(net)
    offset = 0
    for name, block in zeros.blocks.items():
        block[...] = flat[offset : offset + block.size].reshape(block.shape)
        offset += block.size
    return zeros


def gd_step(params, grads, learning_rate: float):
    """One plain gradient-descent update: w <- w - lr * g.

    Works on a Network + GradientSet pair as well as on bare scalars and
    arrays (handy for unit checks).
    """
    if learning_rate <= 0:
        raise ConfigError(f"learning_rate must be > 0, got {learning_rate}")
    if isinstance(params, Network):
        blocks = {
            name: block - learning_rate * grads.blocks[name]
            for name, block in iter_param_blocks(params)
        }
        return network_with_blocks(params, blocks)
    return params - learning_rate * grads


def clip_gradients(grads: GradientSet, max_norm: float | None) -> tuple[GradientSet, float]:
    """Scale gradients so their global L2 norm is at most ``max_norm``."""
    norm = grads.global_norm()
    if not math.isfinite(norm):
        raise NumericError("non-finite gradient norm")
    if max_norm is not None and norm > max_norm:
        return grads.scaled(max_norm / norm), norm
    return grads, norm


@dataclass
class LbfgsResult:
    x: np.ndarray
    value: float
    trace: list[float]
    iterations: int
    converged: bool


def lbfgs_minimize(
    objective: Callable[[np.ndarray], tuple[float, np.ndarray]],
    start: np.ndarray,
    memory: int = 10,
    max_iters: int = 100,
    tol: float = 1e-8,
) -> LbfgsResult:
    """Limited-memory BFGS with two-loop recursion and Armijo backtracking.

    ``objective`` returns (value, gradient).  The inverse-Hessian action
    is rebuilt from the last ``memory`` (step, gradient-change) pairs.
    Stops when the gradient norm drops under ``tol`` or after
    ``max_iters`` iterations; the recorded objective trace never
    increases.  If backtracking cannot find a decrease the best iterate
    is surfaced inside an :class:`OptimizationStall`.
    """
    if memory < 1:
        raise ConfigError(f"memory must be >= 1, got {memory}")
    armijo_c = 1e-4
    backtrack_factor = 0.5
    max_backtracks = 60

    x = np.asarray(start, dtype=np.float64).copy()
    value, grad = objective(x)
    if not math.isfinite(value):
        raise NumericError("objective is non-finite at the starting point")
    trace = [float(value)]
    pairs: list[tuple[np.ndarray, np.ndarray, float]] = []  # (s, y, rho)

    converged = bool(np.linalg.norm(grad) < tol)
    iterations = 0
    for _ in range(max_iters):
        if converged:
            break
        direction = _two_loop_direction(grad, pairs)
        descent = float(direction @ grad)
        if descent >= 0.0:
            # Curvature info is unusable; restart from steepest descent.
            pairs.clear()
            direction = -grad
            descent = float(direction @ grad)
        if not pairs:
            # No curvature scale yet: normalize so the unit trial step is
            # sane and the first stored pair cannot poison the metric.
            scale = max(1.0, float(np.linalg.norm(direction)))
            direction = direction / scale
            descent /= scale

        step = 1.0
        accepted = False
        for _bt in range(max_backtracks + 1):
            candidate = x + step * direction
            if np.array_equal(candidate, x):
                break  # step underflowed; no progress is possible here
            new_value, new_grad = objective(candidate)
            if math.isfinite(new_value) and new_value <= value + armijo_c * step * descent:
                accepted = True
                break
            step *= backtrack_factor
        if not accepted:
            raise OptimizationStall(
                "line search failed to find a decrease", best_x=x, best_value=value, trace=trace
            )

        s = candidate - x
        y_vec = new_grad - grad
        sy = float(s @ y_vec)
        if sy > 1e-10:
            pairs.append((s, y_vec, 1.0 / sy))
            if len(pairs) > memory:
                pairs.pop(0)

        x, value, grad = candidate, new_value, new_grad
        trace.append(float(value))
        iterations += 1
        converged = bool(np.linalg.norm(grad) < tol)

    return LbfgsResult(x=x, value=float(value), trace=trace, iterations=iterations,
                       converged=converged)


def _two_loop_direction(grad: np.ndarray, pairs) -> np.ndarray:
    if not pairs:
        return -grad
    q = grad.copy()
    alphas = []
    for s, y, rho in reversed(pairs):
        alpha = rho * float(s @ q)
        q -= alpha * y
        alphas.append(alpha)
    s_last, y_last, _ = pairs[-1]
    gamma = float(s_last @ y_last) / float(y_last @ y_last)
    r = gamma * q
    for (s, y, rho), alpha in zip(pairs, reversed(alphas)):
        beta = rho * float(y @ r)
        r += (alpha - beta) * s
    return -r


def _frozen_bias_grads(grads: GradientSet) -> GradientSet:
    blocks = {
        name: (np.zeros_like(b) if name.rsplit(".", 1)[-1].startswith("b_") or name == "head_b" else b)
        for name, b in grads.blocks.items()
    }
    return GradientSet(blocks)


def train_network(
    net: Network,
    train_set: WindowedDataset,
    val_set: WindowedDataset | None,
    config: TrainConfig,
    target_feature: int = 0,
) -> tuple[Network, TrainReport]:
    """Train with mini-batch GD or full-batch L-BFGS; deterministic per seed."""
    from .metrics import evaluate_next_step  # local import to avoid a cycle

    if len(train_set) == 0:
        raise EmptyInputError("training set is empty")
    started = time.perf_counter()
    epoch_losses: list[float] = []

    if config.optimizer == GD:
        for epoch in range(config.epochs):
            batch_losses = []
            try:
                for lo in range(0, len(train_set), config.batch_size):
                    batch = (
                        train_set.inputs[lo : lo + config.batch_size],
                        train_set.targets[lo : lo + config.batch_size],
                    )
                    loss, grads = backprop(net, batch)
                    if config.freeze_biases:
                        grads = _frozen_bias_grads(grads)
                    grads, _ = clip_gradients(grads, config.clip_norm)
                    net = gd_step(net, grads, config.learning_rate)
                    batch_losses.append(loss)
            except NumericError as err:
                raise NumericError(str(err), epoch=epoch) from err
            epoch_losses.append(float(np.mean(batch_losses)))
    else:
        full_batch = (train_set.inputs, train_set.targets)

        def objective(vec: np.ndarray) -> tuple[float, np.ndarray]:
            candidate = network_from_vector(net, vec)
            loss, grads = backprop(candidate, full_batch)
            if config.freeze_biases:
                grads = _frozen_bias_grads(grads)
            return loss, grads.to_vector()

        try:
            result = lbfgs_minimize(
                objective,
                network_to_vector(net),
                memory=config.lbfgs_memory,
                max_iters=config.lbfgs_max_iters,
                tol=config.convergence_tol,
            )
            final_vec, epoch_losses = result.x, [float(v) for v in result.trace]
        except OptimizationStall as stall:
            final_vec, epoch_losses = stall.best_x, [float(v) for v in stall.trace]
        net = network_from_vector(net, final_vec)

    if val_set is not None and len(val_set) > 0:
        val_mae, val_rmse = evaluate_next_step(net, val_set, target_feature)
    else:
        val_mae = val_rmse = float("nan")
    report = TrainReport(
        epoch_losses=epoch_losses,
        val_mae=val_mae,
        val_rmse=val_rmse,
        seconds=time.perf_counter() - started,
        seed=config.seed,
        config=config,
    )
    return net, report


def grid_search(
    space: GridSpec,
    series,
    horizon_m: int,
    base_config: TrainConfig,
    *,
    cell_kind: str = GRU,
    train_fraction: float = 0.8,
    target_feature: int = 0,
) -> GridSearchResult:
    """Train one candidate per (hidden, layers, lookback) combination.

    Each candidate windows the normalized series with its own lookback,
    splits it chronologically, trains on the first part and is ranked by
    validation RMSE (ties: fewer parameters, then lower MAE).  Failed
    candidates are recorded and skipped.
    """
    from .data import _as_matrix

    matrix = _as_matrix(series)
    table: list[GridCandidate] = []
    for hidden, layers, lookback in space.candidates():
        started = time.perf_counter()
        try:
            windows = make_windows(matrix, lookback, horizon_m)
            train_split, val_split = split_dataset(windows, train_fraction)
            net = init_network(
                cell_kind, matrix.shape[1], hidden, layers, lookback, base_config.seed
            )
            net, report = train_network(net, train_split, val_split, base_config, target_feature)
            table.append(
                GridCandidate(
                    hidden=hidden,
                    layers=layers,
                    lookback=lookback,
                    rmse=report.val_rmse,
                    mae=report.val_mae,
                    params=param_count(net),
                    seconds=time.perf_counter() - started,
                )
            )
        except (NumericError, DataError, ConfigError) as err:
            table.append(
                GridCandidate(
                    hidden=hidden,
                    layers=layers,
                    lookback=lookback,
                    rmse=float("nan"),
                    mae=float("nan"),
                    params=0,
                    seconds=time.perf_counter() - started,
                    error=str(err),
                )
            )
    viable = [c for c in table if c.error is None and math.isfinite(c.rmse)]
    if not viable:
        raise SearchError("every grid-search candidate failed")
    best = min(viable, key=lambda c: (c.rmse, c.params, c.mae))
    return GridSearchResult(best=best, table=table)
