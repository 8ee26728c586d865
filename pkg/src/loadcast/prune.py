"""Structured pruning of recurrent hidden units with physical compaction.

Units are ranked per layer either by the L1 magnitude of the parameters
that produce their activation or by a seeded random draw, then the
lowest-ranked floor(amount * H) units are removed for real: their rows,
recurrent columns, and outgoing columns disappear from the weight
matrices, so the pruned model computes strictly fewer multiplies.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, InvariantError
from .model import (
    GRU,
    GruLayerParams,
    LstmLayerParams,
    Network,
    flop_count_per_forecast,
    param_count,
)

L1 = "l1"
RANDOM = "random"


@dataclass(frozen=True)
class PruneSpec:
    method: str = L1
    amount: float = 0.05
    seed: int = 0

    def __post_init__(self):
        if self.method not in (L1, RANDOM):
            raise ConfigError(f"prune method must be {L1!r} or {RANDOM!r}, got {self.method!r}")
        if not 0.0 <= self.amount < 1.0:
            raise ConfigError(f"prune amount must lie in [0, 1), got {self.amount}")


@dataclass
class PruneReport:
    method: str
    amount: float
    removed: dict[int, tuple[int, ...]]
    params_before: int
    params_after: int
    flops_before: int
    flops_after: int

    def __post_init__(self):
        for layer, indices in self.removed.items():
            if list(indices) != sorted(set(indices)):
                raise InvariantError(f"layer {layer} removal set is not strictly increasing")
        any_removed = any(self.removed.values())
        if any_removed and self.params_after >= self.params_before:
            raise InvariantError("pruning removed units but parameter count did not shrink")

    def to_dict(self) -> dict:
        return {
            "method": self.method,
            "amount": self.amount,
            "removed": {str(layer): list(idx) for layer, idx in self.removed.items()},
            "params_before": self.params_before,
            "params_after": self.params_after,
            "flops_before": self.flops_before,
            "flops_after": self.flops_after,
        }


def unit_l1_scores(layer) -> np.ndarray:
    """Sum of |w| over every parameter producing each unit's activation.

    That is row u of each input and recurrent block plus the unit's bias
    entries (and peephole entries for LSTM layers).  Outgoing weights are
    not scored; compaction deletes them regardless.
    """
    scores = np.zeros(layer.hidden_width)
    for name in layer.block_names:
        block = getattr(layer, name)
        if block.ndim == 2:
            scores += np.abs(block).sum(axis=1)
        else:
            scores += np.abs(block)
    return scores


def removal_count(hidden_width: int, amount: float) -> int:
    """floor(amount * H): never exceeds the requested fraction."""
    return math.floor(amount * hidden_width)


def select_prune_units(scores_or_width, spec: PruneSpec, rng: np.random.Generator | None = None
                       ) -> list[int]:
    """Pick one layer's units to remove, sorted ascending.

    L1 takes the lowest-score units (ties broken by lowest index); RANDOM
    draws uniformly from ``rng`` (seeded from the spec when not given).
    """
    if spec.method == L1:
        scores = np.asarray(scores_or_width, dtype=np.float64)
        width = scores.shape[0]
    else:
        width = int(scores_or_width)
    count = removal_count(width, spec.amount)
    if count >= width:
        raise ConfigError(f"refusing to remove all {width} units of a layer")
    if count == 0:
        return []
    if spec.method == L1:
        order = np.argsort(scores, kind="stable")
        return sorted(int(u) for u in order[:count])
    if rng is None:
        rng = np.random.default_rng(spec.seed)
    return sorted(int(u) for u in rng.choice(width, size=count, replace=False))


def _compact_layer(layer, keep_rows: np.ndarray, keep_cols: np.ndarray | None):
    """Rebuild one layer with rows (own units) and input columns removed."""
    kwargs = {}
    for name in layer.block_names:
        block = getattr(layer, name)
        if name.startswith("W_"):
            kwargs[name] = (
                block[keep_rows] if keep_cols is None else block[np.ix_(keep_rows, keep_cols)]
            )
        elif name.startswith("U_"):
            kwargs[name] = block[np.ix_(keep_rows, keep_rows)]
        else:  # biases and peephole vectors
            kwargs[name] = block[keep_rows]
    return type(layer)(**kwargs)


def prune_network(net: Network, spec: PruneSpec) -> tuple[Network, PruneReport]:
    """Remove units per layer and compact every affected weight block.

    For a pruned unit u of layer l: row u disappears from layer l's gate
    blocks, biases (and peepholes), column u from layer l's recurrent
    blocks, and column u from the consumer above (layer l+1's input
    blocks, or the head for the top layer).
    """
    rng = np.random.default_rng(spec.seed) if spec.method == RANDOM else None
    removed: dict[int, tuple[int, ...]] = {}
    keeps: list[np.ndarray] = []
    for l, layer in enumerate(net.layers):
        if spec.method == L1:
            units = select_prune_units(unit_l1_scores(layer), spec)
        else:
            units = select_prune_units(layer.hidden_width, spec, rng)
        if any(u < 0 or u >= layer.hidden_width for u in units):
            raise InvariantError(f"layer {l} removal set {units} out of range")
        removed[l] = tuple(units)
        keeps.append(np.setdiff1d(np.arange(layer.hidden_width), units))

    new_layers = []
    for l, layer in enumerate(net.layers):
        keep_cols = None if l == 0 else keeps[l - 1]
        new_layers.append(_compact_layer(layer, keeps[l], keep_cols))
    pruned = Network(
        cell_kind=net.cell_kind,
        layers=tuple(new_layers),
        head_W=net.head_W[:, keeps[-1]],
        head_b=net.head_b.copy(),
        lookback_k=net.lookback_k,
    )
    stats = sparsity_report(net, pruned)
    report = PruneReport(
        method=spec.method,
        amount=spec.amount,
        removed=removed,
        **stats,
    )
    return pruned, report


def sparsity_report(net_before: Network, net_after: Network) -> dict[str, int]:
    """Params/flops before vs after, from the model module's counters."""
    return {
        "params_before": param_count(net_before),
        "params_after": param_count(net_after),
        "flops_before": flop_count_per_forecast(net_before),
        "flops_after": flop_count_per_forecast(net_after),
    }
