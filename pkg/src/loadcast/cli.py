"""Command-line surface: prepare | train | gridsearch | prune | online | forecast | bench.

Configuration is a flat key=value document with dotted section keys (see
``CONFIG_KEYS``); every flag overrides the matching key.  A default
config path can be named in the ``LOADCAST_CONFIG`` environment
variable.  Exit codes are a stable contract: 0 success, 2 usage/config,
3 data, 4 numeric, 5 internal invariant.
"""

from __future__ import annotations

import argparse
import csv
import json
import math
import os
import sys
from dataclasses import dataclass, replace

import numpy as np

from . import data as data_mod
from .data import (
    ColumnSchema,
    MachineSeries,
    aggregate_machine_usage,
    apply_scaler,
    fit_scaler,
    interpolate_missing,
    make_windows,
    parse_trace,
    read_series_csv,
    split_dataset,
    write_series_csv,
)
from .errors import (
    ConfigError,
    DataError,
    EmptyInputError,
    InvariantError,
    LoadcastError,
    NumericError,
    SearchError,
)
from .metrics import EvalReport, bench_forecast, evaluate_next_step
from .model import (
    ModelBundle,
    forecast_multistep_batch,
    init_network,
    load_model,
    param_count,
    flop_count_per_forecast,
    save_model,
)
from .online import OnlineConfig, compare_batch_sizes, prequential_run
from .prune import PruneSpec, prune_network
from .train import GridSpec, TrainConfig, grid_search, train_network

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_DATA = 3
EXIT_NUMERIC = 4
EXIT_INVARIANT = 5

_ENV_CONFIG = "LOADCAST_CONFIG"


def _parse_bool(text: str) -> bool:
    lowered = text.strip().lower()
    if lowered in ("1", "true", "yes", "on"):
        return True
    if lowered in ("0", "false", "no", "off"):
        return False
    raise ConfigError(f"expected a boolean, got {text!r}")


def _parse_int_list(text) -> tuple[int, ...]:
    if isinstance(text, (list, tuple)):
        return tuple(int(v) for v in text)
    items = [part.strip() for part in str(text).split(",") if part.strip()]
    if not items:
        raise ConfigError(f"expected a comma-separated integer list, got {text!r}")
    return tuple(int(v) for v in items)


def _parse_str_list(text) -> tuple[str, ...]:
    if isinstance(text, (list, tuple)):
        return tuple(str(v) for v in text)
    items = [part.strip() for part in str(text).split(",") if part.strip()]
    if not items:
        raise ConfigError(f"expected a comma-separated list, got {text!r}")
    return tuple(items)


def _parse_float_or_none(text) -> float | None:
    if text is None:
        return None
    if isinstance(text, (int, float)):
        return float(text)
    if str(text).strip().lower() in ("none", "off"):
        return None
    return float(text)


@dataclass(frozen=True)
class ConfigKey:
    parse: object
    default: object
    help: str


#: Every RunConfig key, its parser, default, and help line.
CONFIG_KEYS: dict[str, ConfigKey] = {
    "io.trace": ConfigKey(str, None, "raw trace file (prepare input)"),
    "io.series": ConfigKey(str, None, "canonical series CSV"),
    "io.model": ConfigKey(str, None, "model file to read"),
    "io.out": ConfigKey(str, None, "main output path of the command"),
    "io.machine": ConfigKey(str, None, "machine id to extract in prepare"),
    "io.table": ConfigKey(str, None, "grid-search results CSV path"),
    "io.report": ConfigKey(str, None, "JSON report path"),
    "data.interval": ConfigKey(int, 300, "aggregation bucket width in seconds"),
    "data.delimiter": ConfigKey(str, ",", "field delimiter of the raw trace"),
    "data.header": ConfigKey(_parse_bool, False, "raw trace has a header row"),
    "data.features": ConfigKey(_parse_str_list, data_mod.FEATURE_NAMES,
                               "features to keep, in order"),
    "data.schema.window_start": ConfigKey(int, 0, "column of the period start time"),
    "data.schema.machine_id": ConfigKey(int, 4, "column of the machine id"),
    "data.schema.cpu_rate": ConfigKey(int, 5, "column of the CPU usage rate"),
    "data.schema.memory": ConfigKey(int, 6, "column of canonical memory usage"),
    "data.schema.disk_io_time": ConfigKey(int, 11, "column of disk I/O time (optional field)"),
    "data.schema.disk_space": ConfigKey(int, 12, "column of local disk space used"),
    "data.scaler_scope": ConfigKey(str, "train", "fit min/max on 'train' rows only or 'full' series"),
    "data.train_fraction": ConfigKey(float, 0.8, "chronological train fraction"),
    "window.lookback": ConfigKey(int, 12, "observations fed to the model per prediction"),
    "window.horizon": ConfigKey(int, 3, "steps predicted per window"),
    "model.cell": ConfigKey(str, "gru", "recurrent cell kind: gru or lstm"),
    "model.hidden": ConfigKey(int, 64, "hidden units per layer"),
    "model.layers": ConfigKey(int, 3, "stacked recurrent layers"),
    "model.seed": ConfigKey(int, 42, "weight-init / run seed"),
    "train.optimizer": ConfigKey(str, "gd", "training optimizer: gd or lbfgs"),
    "train.learning_rate": ConfigKey(float, 1e-3, "GD learning rate"),
    "train.epochs": ConfigKey(int, 100, "training epochs"),
    "train.batch_size": ConfigKey(int, 32, "mini-batch size"),
    "train.clip_norm": ConfigKey(_parse_float_or_none, 5.0,
                                 "global gradient-norm clip; 'none' disables"),
    "train.freeze_biases": ConfigKey(_parse_bool, False, "keep all biases at zero"),
    "train.lbfgs_memory": ConfigKey(int, 10, "L-BFGS history pairs"),
    "train.lbfgs_max_iters": ConfigKey(int, 100, "L-BFGS iteration cap"),
    "train.convergence_tol": ConfigKey(float, 1e-8, "L-BFGS gradient-norm stop"),
    "grid.hidden_sizes": ConfigKey(_parse_int_list, (32, 64), "grid: hidden sizes"),
    "grid.layer_counts": ConfigKey(_parse_int_list, (1, 3, 5), "grid: layer counts"),
    "grid.lookbacks": ConfigKey(_parse_int_list, (4, 8, 12), "grid: lookbacks"),
    "prune.method": ConfigKey(str, "l1", "pruning method: l1 or random"),
    "prune.amount": ConfigKey(float, 0.05, "fraction of units to remove per layer"),
    "prune.seed": ConfigKey(int, 0, "seed for random pruning"),
    "prune.finetune_epochs": ConfigKey(int, 0, "GD epochs after pruning (0 = none)"),
    "online.batch_sizes": ConfigKey(_parse_int_list, (128,), "online batch sizes to run"),
    "online.optimizer": ConfigKey(str, "gd", "online optimizer: gd or lbfgs"),
    "online.adapt_epochs": ConfigKey(int, 1, "adaptation passes per batch (0 = static)"),
    "online.learning_rate": ConfigKey(float, 1e-3, "online GD learning rate"),
    "online.lbfgs_memory": ConfigKey(int, 10, "online L-BFGS history pairs"),
    "online.lbfgs_max_iters": ConfigKey(int, 20, "online L-BFGS iteration cap"),
    "online.convergence_tol": ConfigKey(float, 1e-8, "online L-BFGS gradient-norm stop"),
    "online.clip_norm": ConfigKey(_parse_float_or_none, 5.0,
                                  "online gradient clip; 'none' disables"),
    "eval.target_feature": ConfigKey(str, "cpu_rate", "feature errors are reported on"),
    "eval.repetitions": ConfigKey(int, 30, "bench timing repetitions"),
    "forecast.steps": ConfigKey(int, 3, "forecast steps ahead"),
}


class RunConfig:
    """Validated key-value configuration; unknown keys are rejected."""

    def __init__(self):
        self.values = {key: spec.default for key, spec in CONFIG_KEYS.items()}

    def set(self, key: str, raw):
        spec = CONFIG_KEYS.get(key)
        if spec is None:
            raise ConfigError(f"unknown config key {key!r}")
        if raw is None:
            self.values[key] = None
            return
        try:
            self.values[key] = spec.parse(raw) if isinstance(raw, str) else raw
        except (ValueError, TypeError) as exc:
            raise ConfigError(f"bad value for {key!r}: {raw!r} ({exc})") from exc

    def load_file(self, path: str):
        try:
            with open(path) as fh:
                for lineno, line in enumerate(fh, 1):
                    stripped = line.split("#", 1)[0].strip()
                    if not stripped:
                        continue
                    if "=" not in stripped:
                        raise ConfigError(f"{path}:{lineno}: expected 'key = value'")
                    key, _, value = stripped.partition("=")
                    self.set(key.strip(), value.strip())
        except OSError as exc:
            raise ConfigError(f"cannot read config file {path}: {exc}") from exc

    def __getitem__(self, key: str):
        if key not in CONFIG_KEYS:
            raise ConfigError(f"unknown config key {key!r}")
        return self.values[key]

    def require(self, key: str, flag: str):
        value = self.values.get(key)
        if value is None:
            raise ConfigError(f"missing required {flag} (config key {key})")
        return value


def _config_epilog() -> str:
    lines = ["configuration keys (config file or matching flag overrides):"]
    for key, spec in CONFIG_KEYS.items():
        default = spec.default
        if isinstance(default, tuple):
            default = ",".join(str(v) for v in default)
        lines.append(f"  {key:<28} {spec.help} (default: {default})")
    return "\n".join(lines)


def _dest(key: str) -> str:
    return "key__" + key.replace(".", "__")


def _add_key_flag(parser: argparse.ArgumentParser, flag: str, key: str, **kwargs):
    spec = CONFIG_KEYS[key]
    if spec.parse is _parse_bool:
        parser.add_argument(flag, dest=_dest(key), action=argparse.BooleanOptionalAction,
                            default=None, help=spec.help)
    else:
        parser.add_argument(flag, dest=_dest(key), default=None, help=spec.help, **kwargs)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="loadcast",
        description="Forecast multivariate host workloads with prunable recurrent nets.",
        epilog=_config_epilog(),
        formatter_class=argparse.RawDescriptionHelpFormatter,
    )
    parser.add_argument("--config", help=f"config file path (or ${_ENV_CONFIG})")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("prepare", help="parse + aggregate + interpolate one machine's series")
    _add_key_flag(p, "--trace", "io.trace")
    _add_key_flag(p, "--machine", "io.machine")
    _add_key_flag(p, "--out", "io.out")
    _add_key_flag(p, "--interval", "data.interval")
    _add_key_flag(p, "--delimiter", "data.delimiter")
    _add_key_flag(p, "--header", "data.header")
    _add_key_flag(p, "--features", "data.features")
    p.add_argument("--schema", default=None,
                   help="override schema columns, e.g. 'machine_id=1,cpu_rate=2'")

    p = sub.add_parser("train", help="train one network on a canonical series")
    _add_key_flag(p, "--series", "io.series")
    _add_key_flag(p, "--out", "io.out")
    _add_key_flag(p, "--report", "io.report")
    _add_key_flag(p, "--cell", "model.cell")
    _add_key_flag(p, "--hidden", "model.hidden")
    _add_key_flag(p, "--layers", "model.layers")
    _add_key_flag(p, "--seed", "model.seed")
    _add_key_flag(p, "--lookback", "window.lookback")
    _add_key_flag(p, "--horizon", "window.horizon")
    _add_key_flag(p, "--optimizer", "train.optimizer")
    _add_key_flag(p, "--learning-rate", "train.learning_rate")
    _add_key_flag(p, "--epochs", "train.epochs")
    _add_key_flag(p, "--batch-size", "train.batch_size")
    _add_key_flag(p, "--clip-norm", "train.clip_norm")
    _add_key_flag(p, "--freeze-biases", "train.freeze_biases")
    _add_key_flag(p, "--train-fraction", "data.train_fraction")
    _add_key_flag(p, "--scaler-scope", "data.scaler_scope")
    _add_key_flag(p, "--target-feature", "eval.target_feature")

    p = sub.add_parser("gridsearch", help="grid-search hyperparameters, save the winner")
    _add_key_flag(p, "--series", "io.series")
    _add_key_flag(p, "--out", "io.out")
    _add_key_flag(p, "--table", "io.table")
    _add_key_flag(p, "--hidden-sizes", "grid.hidden_sizes")
    _add_key_flag(p, "--layer-counts", "grid.layer_counts")
    _add_key_flag(p, "--lookbacks", "grid.lookbacks")
    _add_key_flag(p, "--cell", "model.cell")
    _add_key_flag(p, "--seed", "model.seed")
    _add_key_flag(p, "--horizon", "window.horizon")
    _add_key_flag(p, "--optimizer", "train.optimizer")
    _add_key_flag(p, "--learning-rate", "train.learning_rate")
    _add_key_flag(p, "--epochs", "train.epochs")
    _add_key_flag(p, "--batch-size", "train.batch_size")
    _add_key_flag(p, "--train-fraction", "data.train_fraction")
    _add_key_flag(p, "--scaler-scope", "data.scaler_scope")
    _add_key_flag(p, "--target-feature", "eval.target_feature")

    p = sub.add_parser("prune", help="structurally prune a saved model")
    _add_key_flag(p, "--model", "io.model")
    _add_key_flag(p, "--out", "io.out")
    _add_key_flag(p, "--report", "io.report")
    _add_key_flag(p, "--method", "prune.method")
    _add_key_flag(p, "--amount", "prune.amount")
    _add_key_flag(p, "--seed", "prune.seed")
    _add_key_flag(p, "--finetune-epochs", "prune.finetune_epochs")
    _add_key_flag(p, "--series", "io.series")
    _add_key_flag(p, "--train-fraction", "data.train_fraction")
    _add_key_flag(p, "--learning-rate", "train.learning_rate")
    _add_key_flag(p, "--batch-size", "train.batch_size")
    _add_key_flag(p, "--horizon", "window.horizon")

    p = sub.add_parser("online", help="prequential evaluation with online adaptation")
    _add_key_flag(p, "--model", "io.model")
    _add_key_flag(p, "--series", "io.series")
    _add_key_flag(p, "--out", "io.out")
    _add_key_flag(p, "--report", "io.report")
    _add_key_flag(p, "--batch-sizes", "online.batch_sizes")
    _add_key_flag(p, "--optimizer", "online.optimizer")
    _add_key_flag(p, "--adapt-epochs", "online.adapt_epochs")
    _add_key_flag(p, "--learning-rate", "online.learning_rate")
    _add_key_flag(p, "--lbfgs-memory", "online.lbfgs_memory")
    _add_key_flag(p, "--lbfgs-max-iters", "online.lbfgs_max_iters")
    _add_key_flag(p, "--clip-norm", "online.clip_norm")
    _add_key_flag(p, "--target-feature", "eval.target_feature")

    p = sub.add_parser("forecast", help="emit timestamp,actual,predicted rows in original units")
    _add_key_flag(p, "--model", "io.model")
    _add_key_flag(p, "--series", "io.series")
    _add_key_flag(p, "--out", "io.out")
    _add_key_flag(p, "--steps", "forecast.steps")
    _add_key_flag(p, "--target-feature", "eval.target_feature")

    p = sub.add_parser("bench", help="accuracy, size, and latency report for a model")
    _add_key_flag(p, "--model", "io.model")
    _add_key_flag(p, "--series", "io.series")
    _add_key_flag(p, "--report", "io.report")
    _add_key_flag(p, "--repetitions", "eval.repetitions")
    _add_key_flag(p, "--target-feature", "eval.target_feature")
    return parser


def config_from_args(args: argparse.Namespace) -> RunConfig:
    cfg = RunConfig()
    config_path = args.config or os.environ.get(_ENV_CONFIG)
    if config_path:
        cfg.load_file(config_path)
    for key in CONFIG_KEYS:
        value = getattr(args, _dest(key), None)
        if value is not None:
            cfg.set(key, value)
    if getattr(args, "schema", None):
        for part in args.schema.split(","):
            field_name, _, col = part.partition("=")
            if not col:
                raise ConfigError(f"bad --schema entry {part!r}, expected field=column")
            cfg.set(f"data.schema.{field_name.strip()}", col.strip())
    return cfg


def _schema_from_config(cfg: RunConfig) -> ColumnSchema:
    return ColumnSchema(
        window_start=cfg["data.schema.window_start"],
        machine_id=cfg["data.schema.machine_id"],
        cpu_rate=cfg["data.schema.cpu_rate"],
        memory=cfg["data.schema.memory"],
        disk_io_time=cfg["data.schema.disk_io_time"],
        disk_space=cfg["data.schema.disk_space"],
    )


def _select_features(series: MachineSeries, wanted) -> MachineSeries:
    wanted = tuple(wanted)
    if wanted == series.feature_names:
        return series
    missing = [name for name in wanted if name not in series.feature_names]
    if missing:
        raise ConfigError(f"unknown feature(s) {missing}; series has {series.feature_names}")
    cols = [series.feature_names.index(name) for name in wanted]
    return MachineSeries(
        machine_id=series.machine_id,
        interval_seconds=series.interval_seconds,
        start_time=series.start_time,
        values=series.values[:, cols],
        feature_names=wanted,
    )


def _train_config(cfg: RunConfig) -> TrainConfig:
    return TrainConfig(
        optimizer=cfg["train.optimizer"],
        learning_rate=cfg["train.learning_rate"],
        epochs=cfg["train.epochs"],
        batch_size=cfg["train.batch_size"],
        seed=cfg["model.seed"],
        lbfgs_memory=cfg["train.lbfgs_memory"],
        lbfgs_max_iters=cfg["train.lbfgs_max_iters"],
        convergence_tol=cfg["train.convergence_tol"],
        clip_norm=cfg["train.clip_norm"],
        freeze_biases=cfg["train.freeze_biases"],
    )


def _fit_scope_scaler(series: MachineSeries, cfg: RunConfig):
    scope = cfg["data.scaler_scope"]
    if scope == "full":
        return fit_scaler(series)
    if scope == "train":
        fit_rows = max(1, math.floor(cfg["data.train_fraction"] * len(series)))
        return fit_scaler(series, (0, fit_rows))
    raise ConfigError(f"data.scaler_scope must be 'train' or 'full', got {scope!r}")


def _target_index(feature_names, cfg: RunConfig) -> int:
    name = cfg["eval.target_feature"]
    if name not in feature_names:
        raise ConfigError(f"target feature {name!r} not in series features {tuple(feature_names)}")
    return tuple(feature_names).index(name)


def _check_bundle_series(bundle: ModelBundle, series: MachineSeries):
    if tuple(series.feature_names) != tuple(bundle.feature_names):
        raise DataError(
            f"series features {tuple(series.feature_names)} do not match "
            f"the model's {tuple(bundle.feature_names)}"
        )


def _open_out(path):
    if path is None or path == "-":
        return sys.stdout, False
    return open(path, "w", newline=""), True


def cmd_prepare(cfg: RunConfig) -> None:
    trace_path = cfg.require("io.trace", "--trace")
    machine = cfg.require("io.machine", "--machine")
    out_path = cfg.require("io.out", "--out")
    schema = _schema_from_config(cfg)

    with open(trace_path, "rb") as fh:
        result = parse_trace(
            fh, schema, delimiter=cfg["data.delimiter"], header=cfg["data.header"]
        )
    series = aggregate_machine_usage(result.records, machine, cfg["data.interval"])
    series = interpolate_missing(series)
    series = _select_features(series, cfg["data.features"])
    write_series_csv(series, out_path)

    print(f"machine {machine}: {len(series)} rows at {series.interval_seconds}s "
          f"({result.skipped} raw rows skipped)")
    for name, mean in zip(series.feature_names, series.values.mean(axis=0)):
        print(f"mean {name}: {float(mean):.6g}")


def _prepare_training_data(cfg: RunConfig, lookback: int):
    series = read_series_csv(cfg.require("io.series", "--series"))
    scaler = _fit_scope_scaler(series, cfg)
    normalized = apply_scaler(series.values, scaler)
    windows = make_windows(
        MachineSeries(
            machine_id=series.machine_id,
            interval_seconds=series.interval_seconds,
            start_time=series.start_time,
            values=normalized,
            feature_names=series.feature_names,
        ),
        lookback,
        cfg["window.horizon"],
    )
    train_set, val_set = split_dataset(windows, cfg["data.train_fraction"])
    return series, scaler, normalized, train_set, val_set


def cmd_train(cfg: RunConfig) -> None:
    out_path = cfg.require("io.out", "--out")
    lookback = cfg["window.lookback"]
    series, scaler, _, train_set, val_set = _prepare_training_data(cfg, lookback)
    target = _target_index(series.feature_names, cfg)

    net = init_network(
        cfg["model.cell"],
        series.n_features,
        cfg["model.hidden"],
        cfg["model.layers"],
        lookback,
        cfg["model.seed"],
    )
    net, report = train_network(net, train_set, val_set, _train_config(cfg), target)
    save_model(ModelBundle(net, scaler, series.feature_names), out_path)

    span = float(scaler.maximum[target] - scaler.minimum[target])
    print(f"trained {cfg['model.cell']} hidden={cfg['model.hidden']} layers={cfg['model.layers']} "
          f"lookback={lookback} params={param_count(net)}")
    print(f"val_mae_normalized: {report.val_mae!r}")
    print(f"val_rmse_normalized: {report.val_rmse!r}")
    print(f"val_mae_original: {report.val_mae * span!r}")
    print(f"val_rmse_original: {report.val_rmse * span!r}")
    if cfg["io.report"]:
        payload = {
            "epoch_losses": report.epoch_losses,
            "val_mae_normalized": report.val_mae,
            "val_rmse_normalized": report.val_rmse,
            "val_mae_original": report.val_mae * span,
            "val_rmse_original": report.val_rmse * span,
            "seconds": report.seconds,
            "seed": report.seed,
            "params": param_count(net),
        }
        with open(cfg["io.report"], "w") as fh:
            json.dump(payload, fh, indent=2)


def cmd_gridsearch(cfg: RunConfig) -> None:
    out_path = cfg.require("io.out", "--out")
    series = read_series_csv(cfg.require("io.series", "--series"))
    scaler = _fit_scope_scaler(series, cfg)
    normalized = apply_scaler(series.values, scaler)
    target = _target_index(series.feature_names, cfg)
    space = GridSpec(
        hidden_sizes=cfg["grid.hidden_sizes"],
        layer_counts=cfg["grid.layer_counts"],
        lookbacks=cfg["grid.lookbacks"],
    )
    result = grid_search(
        space,
        normalized,
        cfg["window.horizon"],
        _train_config(cfg),
        cell_kind=cfg["model.cell"],
        train_fraction=cfg["data.train_fraction"],
        target_feature=target,
    )

    if cfg["io.table"]:
        with open(cfg["io.table"], "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(("hidden", "layers", "lookback", "rmse", "mae", "params", "seconds"))
            for row in result.table:
                writer.writerow((row.hidden, row.layers, row.lookback, repr(row.rmse),
                                 repr(row.mae), row.params, repr(row.seconds)))

    best = result.best
    print(f"evaluated {len(result.table)} candidates; "
          f"best hidden={best.hidden} layers={best.layers} lookback={best.lookback} "
          f"rmse={best.rmse!r} mae={best.mae!r}")

    # Retrain the winner with the same seed (deterministic) and save it.
    windows = make_windows(normalized, best.lookback, cfg["window.horizon"])
    train_set, val_set = split_dataset(windows, cfg["data.train_fraction"])
    net = init_network(
        cfg["model.cell"], series.n_features, best.hidden, best.layers, best.lookback,
        cfg["model.seed"],
    )
    net, _ = train_network(net, train_set, val_set, _train_config(cfg), target)
    save_model(ModelBundle(net, scaler, series.feature_names), out_path)


def cmd_prune(cfg: RunConfig) -> None:
    out_path = cfg.require("io.out", "--out")
    bundle = load_model(cfg.require("io.model", "--model"))
    spec = PruneSpec(
        method=cfg["prune.method"], amount=cfg["prune.amount"], seed=cfg["prune.seed"]
    )
    pruned, report = prune_network(bundle.network, spec)

    finetune_epochs = cfg["prune.finetune_epochs"]
    if finetune_epochs > 0:
        if cfg["io.series"] is None:
            raise ConfigError("--finetune-epochs needs --series to fine-tune on")
        series = read_series_csv(cfg["io.series"])
        _check_bundle_series(bundle, series)
        normalized = apply_scaler(series.values, bundle.scaler)
        windows = make_windows(normalized, pruned.lookback_k, cfg["window.horizon"])
        train_set, val_set = split_dataset(windows, cfg["data.train_fraction"])
        tune_cfg = replace(_train_config(cfg), optimizer="gd", epochs=finetune_epochs)
        pruned, _ = train_network(pruned, train_set, val_set, tune_cfg)

    save_model(ModelBundle(pruned, bundle.scaler, bundle.feature_names), out_path)
    payload = report.to_dict()
    if cfg["io.report"]:
        with open(cfg["io.report"], "w") as fh:
            json.dump(payload, fh, indent=2)
    print(json.dumps(payload))


def cmd_online(cfg: RunConfig) -> None:
    bundle = load_model(cfg.require("io.model", "--model"))
    series = read_series_csv(cfg.require("io.series", "--series"))
    _check_bundle_series(bundle, series)
    normalized = apply_scaler(series.values, bundle.scaler)
    target = _target_index(series.feature_names, cfg)
    config = OnlineConfig(
        batch_size=int(cfg["online.batch_sizes"][0]),
        optimizer=cfg["online.optimizer"],
        adapt_epochs=cfg["online.adapt_epochs"],
        learning_rate=cfg["online.learning_rate"],
        lbfgs_memory=cfg["online.lbfgs_memory"],
        lbfgs_max_iters=cfg["online.lbfgs_max_iters"],
        convergence_tol=cfg["online.convergence_tol"],
        clip_norm=cfg["online.clip_norm"],
    )
    sizes = cfg["online.batch_sizes"]

    def batch_csv_path(size: int):
        out = cfg["io.out"]
        if out is None or len(sizes) == 1:
            return out
        stem, ext = os.path.splitext(out)
        return f"{stem}.B{size}{ext or '.csv'}"

    summaries = []
    failures = 0
    for size in sorted(set(int(s) for s in sizes)):
        run_cfg = replace(config, batch_size=size)
        out_fh, close = _open_out(batch_csv_path(size))
        writer = csv.writer(out_fh)
        writer.writerow(("batch_index", "mae", "rmse", "adapt_seconds"))

        def on_batch(record):
            writer.writerow((record.index, repr(record.mae), repr(record.rmse),
                             repr(record.adapt_seconds)))
            out_fh.flush()

        try:
            report = prequential_run(bundle.network, normalized, run_cfg, target,
                                     on_batch=on_batch)
        finally:
            if close:
                out_fh.close()
        summaries.append(report)
        if report.failed_batch_index is not None:
            failures += 1

    print("batch_size,batches,cumulative_mae,cumulative_rmse,final_batch_rmse")
    for report in summaries:
        last_rmse = report.batches[-1].rmse if report.batches else float("nan")
        print(f"{report.batch_size},{report.batch_count},{report.cumulative_mae!r},"
              f"{report.cumulative_rmse!r},{last_rmse!r}")
    if cfg["io.report"]:
        with open(cfg["io.report"], "w") as fh:
            json.dump([r.to_dict() for r in summaries], fh, indent=2)
    if failures:
        raise NumericError(f"{failures} online run(s) hit a numeric failure; see report")


def cmd_forecast(cfg: RunConfig) -> None:
    bundle = load_model(cfg.require("io.model", "--model"))
    series = read_series_csv(cfg.require("io.series", "--series"))
    _check_bundle_series(bundle, series)
    steps = cfg["forecast.steps"]
    if steps < 1:
        raise ConfigError(f"forecast steps must be >= 1, got {steps}")
    target = _target_index(series.feature_names, cfg)

    net = bundle.network
    k = net.lookback_k
    T = len(series)
    n_anchors = T - k - steps + 1
    if n_anchors < 1:
        raise EmptyInputError(
            f"series of length {T} has no full window for lookback {k} + {steps} steps"
        )
    normalized = apply_scaler(series.values, bundle.scaler)
    starts = np.arange(n_anchors)[:, None] + np.arange(k)[None, :]
    predictions = forecast_multistep_batch(net, normalized[starts], steps)

    span = float(bundle.scaler.maximum[target] - bundle.scaler.minimum[target])
    minimum = float(bundle.scaler.minimum[target])
    degenerate = bool(bundle.scaler.degenerate_mask[target])
    pred_norm = predictions[:, steps - 1, target]
    pred_orig = np.full_like(pred_norm, minimum) if degenerate else pred_norm * span + minimum

    rows_written = 0
    out_fh, close = _open_out(cfg["io.out"])
    try:
        writer = csv.writer(out_fh)
        writer.writerow(("timestamp", "actual", "predicted"))
        timestamps = series.timestamps
        for j in range(n_anchors):
            t_pred = j + k + steps - 1
            writer.writerow(
                (int(timestamps[t_pred]), repr(float(series.values[t_pred, target])),
                 repr(float(pred_orig[j])))
            )
            rows_written += 1
    finally:
        if close:
            out_fh.close()
    print(f"wrote {rows_written} forecast rows ({steps} step(s) ahead, "
          f"{steps * series.interval_seconds}s early)", file=sys.stderr)


def cmd_bench(cfg: RunConfig) -> None:
    bundle = load_model(cfg.require("io.model", "--model"))
    series = read_series_csv(cfg.require("io.series", "--series"))
    _check_bundle_series(bundle, series)
    target = _target_index(series.feature_names, cfg)
    net = bundle.network

    normalized = apply_scaler(series.values, bundle.scaler)
    windows = make_windows(normalized, net.lookback_k, 1)
    mae_norm, rmse_norm = evaluate_next_step(net, windows, target)
    span = float(bundle.scaler.maximum[target] - bundle.scaler.minimum[target])
    stats = bench_forecast(net, windows.inputs[: min(len(windows), 64)],
                           cfg["eval.repetitions"])
    report = EvalReport(
        mae=mae_norm * span,
        rmse=rmse_norm * span,
        n=len(windows),
        target_feature=cfg["eval.target_feature"],
        params=param_count(net),
        flops=flop_count_per_forecast(net),
        latency_mean_us=stats.mean_us,
        latency_median_us=stats.median_us,
        latency_p95_us=stats.p95_us,
        repetitions=stats.repetitions,
        mae_normalized=mae_norm,
        rmse_normalized=rmse_norm,
    )
    payload = report.to_dict()
    if cfg["io.report"]:
        with open(cfg["io.report"], "w") as fh:
            json.dump(payload, fh, indent=2)
    print(json.dumps(payload))


COMMANDS = {
    "prepare": cmd_prepare,
    "train": cmd_train,
    "gridsearch": cmd_gridsearch,
    "prune": cmd_prune,
    "online": cmd_online,
    "forecast": cmd_forecast,
    "bench": cmd_bench,
}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        cfg = config_from_args(args)
        COMMANDS[args.command](cfg)
    except ConfigError as exc:
        print(f"loadcast: config error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, OSError) as exc:
        print(f"loadcast: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (NumericError, SearchError) as exc:
        print(f"loadcast: numeric error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except InvariantError as exc:
        print(f"loadcast: internal invariant violated: {exc}", file=sys.stderr)
        return EXIT_INVARIANT
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
