"""Exception hierarchy shared by every loadcast module.

The CLI maps these onto stable process exit codes (see `loadcast.cli`):
config/usage problems exit 2, bad or insufficient data 3, numeric
failures 4, violated internal invariants 5.
"""


class LoadcastError(Exception):
    """Base class for all errors raised by this package."""


class ConfigError(LoadcastError):
    """Invalid configuration: bad value, unknown key, bad schema."""


class DataError(LoadcastError):
    """Input data cannot be used as requested."""


class ShapeError(DataError):
    """Dimension mismatch between an array and what an operation expects."""


class EmptySeriesError(DataError):
    """No trace records exist for the requested machine."""


class UnrecoverableFeatureError(DataError):
    """A feature column has no observed values at all."""

    def __init__(self, feature: str):
        super().__init__(f"feature {feature!r} has no observed values; cannot interpolate")
        self.feature = feature


class InsufficientDataError(DataError):
    """Series too short for the requested windowing."""


class EmptyInputError(DataError):
    """An operation that needs at least one element received none."""


class NumericError(LoadcastError):
    """Non-finite value encountered during training or evaluation."""

    def __init__(self, message: str, *, epoch: int | None = None, sample: int | None = None):
        ctx = []
        if epoch is not None:
            ctx.append(f"epoch {epoch}")
        if sample is not None:
            ctx.append(f"sample {sample}")
        if ctx:
            message = f"{message} ({', '.join(ctx)})"
        super().__init__(message)
        self.epoch = epoch
        self.sample = sample


class OptimizationStall(NumericError):
    """Line search could not find a decrease; carries the best iterate."""

    def __init__(self, message: str, best_x, best_value: float, trace):
        super().__init__(message)
        self.best_x = best_x
        self.best_value = best_value
        self.trace = trace


class SearchError(LoadcastError):
    """Every grid-search candidate failed."""


class InvariantError(LoadcastError):
    """An internal invariant was violated; indicates a bug."""
