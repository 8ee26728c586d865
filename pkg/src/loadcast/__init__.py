"""loadcast: multivariate host-workload forecasting with prunable
recurrent networks, from-scratch training, and online adaptation."""

from .data import (
    ColumnSchema,
    MachineSeries,
    ParseResult,
    ScalerParams,
    TraceRecord,
    WindowedDataset,
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
from .metrics import EvalReport, LatencyStats, bench_forecast, evaluate_next_step, mae, rmse
from .model import (
    GRU,
    LSTM,
    GruLayerParams,
    LstmLayerParams,
    ModelBundle,
    Network,
    activation,
    flop_breakdown,
    flop_count_per_forecast,
    forecast_multistep,
    forecast_multistep_batch,
    gru_cell_forward,
    init_network,
    load_model,
    lstm_cell_forward,
    network_forward,
    network_forward_batch,
    param_count,
    save_model,
)
from .online import (
    BatchSizeRow,
    OnlineConfig,
    OnlineRunReport,
    compare_batch_sizes,
    prequential_run,
    segment_errors,
)
from .prune import PruneReport, PruneSpec, prune_network, select_prune_units, unit_l1_scores
from .train import (
    GradientSet,
    GridSearchResult,
    GridSpec,
    TrainConfig,
    TrainReport,
    backprop,
    batch_loss,
    finite_diff_grad,
    gd_step,
    grid_search,
    lbfgs_minimize,
    mse_loss,
    train_network,
)

__version__ = "0.1.0"
