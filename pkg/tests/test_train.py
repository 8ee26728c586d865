import math
import sys

import numpy as np
import pytest

sys.path.insert(0, "tests")
from helpers import coupled_sines

from loadcast.data import fit_scaler, apply_scaler, make_windows, split_dataset
from loadcast.errors import (
    ConfigError,
    EmptyInputError,
    OptimizationStall,
    SearchError,
    ShapeError,
)
from loadcast.model import (
    GRU,
    LSTM,
    init_network,
    network_to_vector,
)
from loadcast.train import (
    GradientSet,
    GridSpec,
    TrainConfig,
    backprop,
    batch_loss,
    central_difference,
    finite_diff_grad,
    gd_step,
    grid_search,
    lbfgs_minimize,
    mse_loss,
    train_network,
)


def random_batch(rng, n, k, N, m=2):
    return rng.normal(size=(n, k, N)), rng.normal(scale=0.5, size=(n, m, N))


class TestMseLoss:
    def test_identity(self):
        assert mse_loss(np.array([1.0, 2.0]), np.array([1.0, 2.0])) == 0.0

    def test_two_terms(self):
        assert mse_loss(np.array([1.0, 3.0]), np.array([0.0, 1.0])) == pytest.approx(2.5)

    def test_quadratic_homogeneity(self):
        pred, target = np.array([1.0, 3.0]), np.array([0.0, 1.0])
        base = mse_loss(pred, target)
        scaled = mse_loss(target + 3.0 * (pred - target), target)
        assert scaled == pytest.approx(9.0 * base)

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            mse_loss(np.zeros(3), np.zeros(4))


class TestBackprop:
    def test_zero_network_zero_targets_is_stationary(self):
        from test_model import zero_network

        net = zero_network(GRU, N=3, H=4, L=2, k=5)
        inputs = np.random.default_rng(0).normal(size=(4, 5, 3))
        loss, grads = backprop(net, (inputs, np.zeros((4, 2, 3))))
        assert loss == 0.0
        assert grads.global_norm() == 0.0

    def test_duplicating_batch_changes_nothing(self):
        rng = np.random.default_rng(1)
        net = init_network(GRU, 3, 4, 2, 5, seed=2)
        inputs, targets = random_batch(rng, 5, 5, 3)
        loss1, grads1 = backprop(net, (inputs, targets))
        doubled = (np.concatenate([inputs, inputs]), np.concatenate([targets, targets]))
        loss2, grads2 = backprop(net, doubled)
        assert loss2 == pytest.approx(loss1, rel=1e-12)
        np.testing.assert_allclose(grads2.to_vector(), grads1.to_vector(), atol=1e-14)

    @pytest.mark.parametrize("cell,seed", [(GRU, 0), (GRU, 1), (LSTM, 2), (LSTM, 3)])
    def test_matches_finite_differences(self, cell, seed):
        rng = np.random.default_rng(seed)
        net = init_network(
            cell,
            int(rng.integers(1, 4)),
            int(rng.integers(2, 6)),
            int(rng.integers(1, 3)),
            int(rng.integers(2, 7)),
            seed,
        )
        inputs, targets = random_batch(rng, 4, net.lookback_k, net.feature_count)
        _, grads = backprop(net, (inputs, targets))
        fd = finite_diff_grad(net, (inputs, targets), 1e-5)
        g, f = grads.to_vector(), fd.to_vector()
        mask = np.abs(g) > 1e-8
        rel = np.abs(g[mask] - f[mask]) / np.abs(g[mask])
        assert np.max(rel) < 1e-4

    def test_loss_is_first_target_row_only(self):
        rng = np.random.default_rng(4)
        net = init_network(GRU, 2, 3, 1, 4, seed=5)
        inputs, targets = random_batch(rng, 3, 4, 2, m=3)
        loss, _ = backprop(net, (inputs, targets))
        mangled = targets.copy()
        mangled[:, 1:, :] = 999.0
        loss2, _ = backprop(net, (inputs, mangled))
        assert loss == loss2

    def test_gradientset_congruence_check(self):
        net_a = init_network(GRU, 2, 3, 1, 4, seed=0)
        net_b = init_network(GRU, 2, 5, 1, 4, seed=0)
        grads = GradientSet.zeros_like(net_a)
        grads.check_congruent(net_a)
        with pytest.raises(ShapeError):
            grads.check_congruent(net_b)


class TestFiniteDifferences:
    def test_quadratic_surrogate(self):
        grad = central_difference(lambda t: float(t[0] ** 2), np.array([3.0]), 1e-5)
        assert grad[0] == pytest.approx(6.0, abs=1e-6)

    def test_zero_network_zero_targets(self):
        from test_model import zero_network

        net = zero_network(GRU, N=2, H=3, L=1, k=3)
        inputs = np.random.default_rng(0).normal(size=(2, 3, 2))
        fd = finite_diff_grad(net, (inputs, np.zeros((2, 1, 2))))
        assert np.allclose(fd.to_vector(), 0.0, atol=1e-9)

    def test_bad_epsilon(self):
        with pytest.raises(ConfigError):
            central_difference(lambda t: 0.0, np.zeros(1), 0.0)


class TestGdStep:
    def test_scalar_update(self):
        assert gd_step(1.0, 0.5, 0.1) == pytest.approx(0.95)

    def test_zero_gradient_fixed_point(self):
        assert gd_step(1.25, 0.0, 0.1) == 1.25

    def test_two_steps_equal_one_double_step(self):
        w = 1.0
        one = gd_step(gd_step(w, 0.5, 0.1), 0.5, 0.1)
        two = gd_step(w, 0.5, 0.2)
        assert one == pytest.approx(two)

    def test_network_update_matches_vector_math(self):
        net = init_network(GRU, 2, 3, 1, 4, seed=1)
        inputs = np.random.default_rng(2).normal(size=(3, 4, 2))
        targets = np.random.default_rng(3).normal(size=(3, 1, 2))
        _, grads = backprop(net, (inputs, targets))
        stepped = gd_step(net, grads, 0.1)
        np.testing.assert_allclose(
            network_to_vector(stepped),
            network_to_vector(net) - 0.1 * grads.to_vector(),
            atol=1e-15,
        )

    def test_gd_on_convex_quadratic_strictly_decreases(self):
        # f(w) = w' A w with alpha below 2 / lambda_max
        rng = np.random.default_rng(0)
        M = rng.normal(size=(4, 4))
        A = M @ M.T + np.eye(4)
        lam_max = float(np.linalg.eigvalsh(A)[-1])
        w = rng.normal(size=4)
        alpha = 0.9 / lam_max
        prev = float(w @ A @ w)
        for _ in range(20):
            w = gd_step(w, 2 * A @ w, alpha)
            now = float(w @ A @ w)
            assert now < prev
            prev = now


def rosenbrock(w):
    x, y = w
    value = (1 - x) ** 2 + 100 * (y - x * x) ** 2
    grad = np.array([-2 * (1 - x) - 400 * x * (y - x * x), 200 * (y - x * x)])
    return float(value), grad


class TestLbfgs:
    def test_shifted_quadratic(self):
        res = lbfgs_minimize(
            lambda w: (float((w[0] - 3) ** 2), np.array([2 * (w[0] - 3)])), np.zeros(1)
        )
        assert res.x[0] == pytest.approx(3.0, abs=1e-8)
        assert res.converged

    def test_ten_dim_quadratic_within_fifty_iters(self):
        res = lbfgs_minimize(lambda w: (float(w @ w), 2 * w), np.ones(10), max_iters=50)
        assert res.converged
        assert res.iterations <= 50

    def test_rosenbrock(self):
        res = lbfgs_minimize(rosenbrock, np.array([-1.2, 1.0]), max_iters=200)
        np.testing.assert_allclose(res.x, [1.0, 1.0], atol=1e-5)

    def test_trace_monotone_non_increasing(self):
        res = lbfgs_minimize(rosenbrock, np.array([-1.2, 1.0]), max_iters=200)
        assert all(a >= b for a, b in zip(res.trace, res.trace[1:]))

    def test_stall_carries_best_iterate(self):
        # objective is finite only at the start, so every trial step fails
        # and the line search must surface the best iterate seen
        def hostile(w):
            if w[0] == 1.0:
                return 1.0, np.array([1.0])
            return float("nan"), np.array([float("nan")])

        with pytest.raises(OptimizationStall) as err:
            lbfgs_minimize(hostile, np.array([1.0]))
        assert err.value.best_x[0] == 1.0
        assert err.value.trace == [1.0]

    def test_already_converged_start(self):
        res = lbfgs_minimize(lambda w: (float(w @ w), 2 * w), np.zeros(3))
        assert res.converged
        assert res.iterations == 0
        assert res.trace == [0.0]


def tiny_dataset(seed=0, n_rows=140, k=6, m=2):
    matrix = coupled_sines(n=n_rows, seed=seed)
    scaler = fit_scaler(matrix)
    ds = make_windows(apply_scaler(matrix, scaler), k, m)
    return split_dataset(ds, 0.8)


class TestTrainNetwork:
    def test_zero_epochs_leaves_parameters_unchanged(self):
        train_set, val_set = tiny_dataset()
        net = init_network(GRU, 4, 5, 1, 6, seed=0)
        before = network_to_vector(net).tobytes()
        trained, report = train_network(net, train_set, val_set,
                                        TrainConfig(epochs=0, seed=0))
        assert network_to_vector(trained).tobytes() == before
        assert report.epoch_losses == []

    def test_deterministic_given_seed(self):
        train_set, val_set = tiny_dataset()
        results = []
        for _ in range(2):
            net = init_network(GRU, 4, 5, 1, 6, seed=7)
            trained, report = train_network(
                net, train_set, val_set,
                TrainConfig(epochs=4, learning_rate=0.05, seed=7),
            )
            results.append((network_to_vector(trained).tobytes(), tuple(report.epoch_losses),
                            report.val_mae, report.val_rmse))
        assert results[0] == results[1]

    def test_gd_learning_reduces_loss(self):
        train_set, val_set = tiny_dataset()
        net = init_network(GRU, 4, 6, 1, 6, seed=1)
        _, report = train_network(
            net, train_set, val_set, TrainConfig(epochs=25, learning_rate=0.05, seed=1)
        )
        assert report.epoch_losses[-1] < 0.25 * report.epoch_losses[0]

    def test_lbfgs_path_trains(self):
        train_set, val_set = tiny_dataset()
        net = init_network(GRU, 4, 5, 1, 6, seed=2)
        start_loss = batch_loss(net, train_set)
        trained, report = train_network(
            net, train_set, val_set,
            TrainConfig(optimizer="lbfgs", lbfgs_max_iters=30, seed=2),
        )
        assert report.epoch_losses[-1] < 0.5 * start_loss
        assert all(a >= b for a, b in zip(report.epoch_losses, report.epoch_losses[1:]))

    def test_freeze_biases(self):
        train_set, val_set = tiny_dataset()
        net = init_network(GRU, 4, 5, 1, 6, seed=3)
        trained, _ = train_network(
            net, train_set, val_set,
            TrainConfig(epochs=3, learning_rate=0.05, seed=3, freeze_biases=True),
        )
        for layer in trained.layers:
            for name in ("b_z", "b_r", "b_h"):
                assert not np.any(getattr(layer, name))
        assert not np.any(trained.head_b)

    def test_empty_train_set(self):
        train_set, val_set = tiny_dataset()
        with pytest.raises(EmptyInputError):
            train_network(init_network(GRU, 4, 5, 1, 6, seed=0),
                          train_set.take(0, 0), val_set, TrainConfig(epochs=1))


class TestGridSearch:
    def test_singleton_space(self):
        matrix = apply_scaler(coupled_sines(160, seed=5), fit_scaler(coupled_sines(160, seed=5)))
        space = GridSpec(hidden_sizes=(4,), layer_counts=(1,), lookbacks=(4,))
        result = grid_search(space, matrix, 2, TrainConfig(epochs=3, learning_rate=0.05))
        assert len(result.table) == 1
        assert (result.best.hidden, result.best.layers, result.best.lookback) == (4, 1, 4)

    def test_winner_is_table_argmin(self):
        matrix = apply_scaler(coupled_sines(160, seed=6), fit_scaler(coupled_sines(160, seed=6)))
        space = GridSpec(hidden_sizes=(3, 5), layer_counts=(1,), lookbacks=(3, 5))
        result = grid_search(space, matrix, 1, TrainConfig(epochs=4, learning_rate=0.05))
        assert len(result.table) == 4
        ok = [c for c in result.table if c.error is None]
        manual_best = min(ok, key=lambda c: (c.rmse, c.params, c.mae))
        assert result.best is manual_best

    def test_failed_candidate_recorded_and_skipped(self):
        matrix = apply_scaler(coupled_sines(40, seed=7), fit_scaler(coupled_sines(40, seed=7)))
        # lookback 60 cannot window a 40-row series -> that candidate fails
        space = GridSpec(hidden_sizes=(3,), layer_counts=(1,), lookbacks=(4, 60))
        result = grid_search(space, matrix, 1, TrainConfig(epochs=2, learning_rate=0.05))
        errors = {c.lookback: c.error for c in result.table}
        assert errors[60] is not None
        assert errors[4] is None
        assert result.best.lookback == 4

    def test_all_failed_raises_search_error(self):
        matrix = apply_scaler(coupled_sines(40, seed=8), fit_scaler(coupled_sines(40, seed=8)))
        space = GridSpec(hidden_sizes=(3,), layer_counts=(1,), lookbacks=(50, 60))
        with pytest.raises(SearchError):
            grid_search(space, matrix, 1, TrainConfig(epochs=2))

    def test_default_space_has_eighteen_candidates(self):
        assert GridSpec().candidate_count == 18

    def test_empty_dimension_rejected(self):
        with pytest.raises(ConfigError):
            GridSpec(hidden_sizes=())
