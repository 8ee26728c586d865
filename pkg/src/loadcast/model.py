"""Recurrent forecasting networks built on plain float64 numpy arrays.

A :class:`Network` stacks GRU or LSTM layers and finishes with a dense
head that emits a full next-step feature vector, so multistep forecasts
can feed predictions back in recursively.  Cell functions accept either
a single vector ``(I,)`` or a batch ``(B, I)``; everything broadcasts.

Networks are immutable in practice: training and pruning build new
instances, so concurrent readers can forecast with a shared model.
"""

from __future__ import annotations

import json
import os
import struct
from dataclasses import dataclass, replace
from typing import Iterator

import numpy as np

from .data import ScalerParams
from .errors import ConfigError, DataError, ShapeError

GRU = "gru"
LSTM = "lstm"

#: Parameter block names per layer, in declared (= serialized) order.
GRU_BLOCKS = ("W_z", "W_r", "W_h", "U_z", "U_r", "U_h", "b_z", "b_r", "b_h")
LSTM_BLOCKS = (
    "W_f", "W_i", "W_c", "W_o",
    "U_f", "U_i", "U_c", "U_o",
    "V_f", "V_i", "V_o",
    "b_f", "b_i", "b_c", "b_o",
)

_MODEL_MAGIC = b"LCMODEL1\n"
_MODEL_FORMAT_VERSION = 1


def _sigmoid(x: np.ndarray) -> np.ndarray:
    # Piecewise form avoids exp overflow for large negative inputs.
    out = np.empty_like(x, dtype=np.float64)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def activation(x, kind: str) -> np.ndarray:
    """Elementwise logistic sigmoid or tanh."""
    x = np.asarray(x, dtype=np.float64)
    if kind == "sigmoid":
        return _sigmoid(x)
    if kind == "tanh":
        return np.tanh(x)
    raise ConfigError(f"unknown activation kind {kind!r}")


@dataclass(frozen=True)
class GruLayerParams:
    """Update gate z, reset gate r, and candidate-state weights of one layer."""

    W_z: np.ndarray
    W_r: np.ndarray
    W_h: np.ndarray
    U_z: np.ndarray
    U_r: np.ndarray
    U_h: np.ndarray
    b_z: np.ndarray
    b_r: np.ndarray
    b_h: np.ndarray

    def __post_init__(self):
        H, I = self.W_z.shape
        for name in ("W_z", "W_r", "W_h"):
            if getattr(self, name).shape != (H, I):
                raise ShapeError(f"{name} must have shape {(H, I)}")
        for name in ("U_z", "U_r", "U_h"):
            if getattr(self, name).shape != (H, H):
                raise ShapeError(f"{name} must have shape {(H, H)}")
        for name in ("b_z", "b_r", "b_h"):
            if getattr(self, name).shape != (H,):
                raise ShapeError(f"{name} must have shape {(H,)}")

    @property
    def input_width(self) -> int:
        return self.W_z.shape[1]

    @property
    def hidden_width(self) -> int:
        return self.W_z.shape[0]

    @property
    def block_names(self) -> tuple[str, ...]:
        return GRU_BLOCKS


@dataclass(frozen=True)
class LstmLayerParams:
    """Forget/input/candidate/output weights of one layer.

    The V_* peephole weights are diagonal matrices stored as vectors.
    """

    W_f: np.ndarray
    W_i: np.ndarray
    W_c: np.ndarray
    W_o: np.ndarray
    U_f: np.ndarray
    U_i: np.ndarray
    U_c: np.ndarray
    U_o: np.ndarray
    V_f: np.ndarray
    V_i: np.ndarray
    V_o: np.ndarray
    b_f: np.ndarray
    b_i: np.ndarray
    b_c: np.ndarray
    b_o: np.ndarray

    def __post_init__(self):
        H, I = self.W_f.shape
        for name in ("W_f", "W_i", "W_c", "W_o"):
            if getattr(self, name).shape != (H, I):
                raise ShapeError(f"{name} must have shape {(H, I)}")
        for name in ("U_f", "U_i", "U_c", "U_o"):
            if getattr(self, name).shape != (H, H):
                raise ShapeError(f"{name} must have shape {(H, H)}")
        for name in ("V_f", "V_i", "V_o", "b_f", "b_i", "b_c", "b_o"):
            if getattr(self, name).shape != (H,):
                raise ShapeError(f"{name} must have shape {(H,)}")

    @property
    def input_width(self) -> int:
        return self.W_f.shape[1]

    @property
    def hidden_width(self) -> int:
        return self.W_f.shape[0]

    @property
    def block_names(self) -> tuple[str, ...]:
        return LSTM_BLOCKS


@dataclass(frozen=True)
class Network:
    """Stacked recurrent layers plus a dense head mapping to N features."""

    cell_kind: str
    layers: tuple
    head_W: np.ndarray
    head_b: np.ndarray
    lookback_k: int

    def __post_init__(self):
        if self.cell_kind not in (GRU, LSTM):
            raise ConfigError(f"cell_kind must be {GRU!r} or {LSTM!r}, got {self.cell_kind!r}")
        if not self.layers:
            raise ConfigError("a network needs at least one recurrent layer")
        if self.lookback_k < 1:
            raise ConfigError(f"lookback_k must be >= 1, got {self.lookback_k}")
        expected_input = self.layers[0].input_width
        for i, layer in enumerate(self.layers):
            if layer.input_width != expected_input:
                raise ShapeError(
                    f"layer {i} expects input width {layer.input_width}, "
                    f"but the layer below emits {expected_input}"
                )
            expected_input = layer.hidden_width
        if self.head_W.ndim != 2 or self.head_W.shape[1] != self.layers[-1].hidden_width:
            raise ShapeError(
                f"head_W must be (N, {self.layers[-1].hidden_width}), got {self.head_W.shape}"
            )
        if self.head_b.shape != (self.head_W.shape[0],):
            raise ShapeError(f"head_b must have shape ({self.head_W.shape[0]},)")
        if self.head_W.shape[0] != self.layers[0].input_width:
            raise ShapeError(
                "head must emit one value per input feature "
                f"({self.layers[0].input_width}), got {self.head_W.shape[0]}"
            )
        object.__setattr__(self, "layers", tuple(self.layers))

    @property
    def layer_count(self) -> int:
        return len(self.layers)

    @property
    def feature_count(self) -> int:
        return self.layers[0].input_width

    @property
    def hidden_widths(self) -> tuple[int, ...]:
        return tuple(layer.hidden_width for layer in self.layers)

    @property
    def hidden_width(self) -> int:
        return self.layers[0].hidden_width


@dataclass(frozen=True)
class ModelBundle:
    """A network together with the scaler and feature names it was trained on."""

    network: Network
    scaler: ScalerParams
    feature_names: tuple[str, ...]

    def __post_init__(self):
        if len(self.feature_names) != self.network.feature_count:
            raise ShapeError("feature_names length disagrees with the network's feature count")
        if self.scaler.n_features != self.network.feature_count:
            raise ShapeError("scaler feature count disagrees with the network's feature count")
        object.__setattr__(self, "feature_names", tuple(self.feature_names))


def init_network(
    cell_kind: str,
    feature_count: int,
    hidden_width: int,
    layer_count: int,
    lookback_k: int,
    seed: int,
) -> Network:
    """Seeded uniform +-sqrt(6 / (fan_in + fan_out)) init; biases start at zero."""
    if feature_count < 1 or hidden_width < 1 or layer_count < 1:
        raise ConfigError("feature_count, hidden_width and layer_count must all be >= 1")
    rng = np.random.default_rng(seed)

    def draw(rows: int, cols: int | None = None) -> np.ndarray:
        if cols is None:  # diagonal peephole vector: fan_in = fan_out = rows
            limit = np.sqrt(6.0 / (2 * rows))
            return rng.uniform(-limit, limit, size=rows)
        limit = np.sqrt(6.0 / (rows + cols))
        return rng.uniform(-limit, limit, size=(rows, cols))

    layers = []
    for l in range(layer_count):
        I = feature_count if l == 0 else hidden_width
        H = hidden_width
        if cell_kind == GRU:
            layers.append(
                GruLayerParams(
                    W_z=draw(H, I), W_r=draw(H, I), W_h=draw(H, I),
                    U_z=draw(H, H), U_r=draw(H, H), U_h=draw(H, H),
                    b_z=np.zeros(H), b_r=np.zeros(H), b_h=np.zeros(H),
                )
            )
        elif cell_kind == LSTM:
            layers.append(
                LstmLayerParams(
                    W_f=draw(H, I), W_i=draw(H, I), W_c=draw(H, I), W_o=draw(H, I),
                    U_f=draw(H, H), U_i=draw(H, H), U_c=draw(H, H), U_o=draw(H, H),
                    V_f=draw(H), V_i=draw(H), V_o=draw(H),
                    b_f=np.zeros(H), b_i=np.zeros(H), b_c=np.zeros(H), b_o=np.zeros(H),
                )
            )
        else:
            raise ConfigError(f"cell_kind must be {GRU!r} or {LSTM!r}, got {cell_kind!r}")
    head_W = draw(feature_count, hidden_width)
    head_b = np.zeros(feature_count)
    return Network(
        cell_kind=cell_kind,
        layers=tuple(layers),
        head_W=head_W,
        head_b=head_b,
        lookback_k=lookback_k,
    )


def gru_cell_forward(params: GruLayerParams, x_t: np.ndarray, h_prev: np.ndarray):
    """One GRU step: h_t = (1 - z) * h_prev + z * h_tilde.

    ``x_t`` may be ``(I,)`` or ``(B, I)``; ``h_prev`` must match with H.
    Returns (h_t, cache) where the cache holds the gate values needed by
    the backward pass.
    """
    x_t = np.asarray(x_t, dtype=np.float64)
    h_prev = np.asarray(h_prev, dtype=np.float64)
    if x_t.shape[-1] != params.input_width:
        raise ShapeError(f"x_t has width {x_t.shape[-1]}, layer expects {params.input_width}")
    if h_prev.shape[-1] != params.hidden_width:
        raise ShapeError(f"h_prev has width {h_prev.shape[-1]}, layer has {params.hidden_width}")

    z = _sigmoid(x_t @ params.W_z.T + h_prev @ params.U_z.T + params.b_z)
    r = _sigmoid(x_t @ params.W_r.T + h_prev @ params.U_r.T + params.b_r)
    rh = r * h_prev
    h_tilde = np.tanh(x_t @ params.W_h.T + rh @ params.U_h.T + params.b_h)
    h_t = (1.0 - z) * h_prev + z * h_tilde
    cache = {"x": x_t, "h_prev": h_prev, "z": z, "r": r, "rh": rh, "h_tilde": h_tilde}
    return h_t, cache


def lstm_cell_forward(
    params: LstmLayerParams, x_t: np.ndarray, h_prev: np.ndarray, c_prev: np.ndarray
):
    """One LSTM step with diagonal peepholes on the gates.

    f and i peek at c_prev, the output gate peeks at the fresh c_t.
    Returns (h_t, c_t, cache).
    """
    x_t = np.asarray(x_t, dtype=np.float64)
    h_prev = np.asarray(h_prev, dtype=np.float64)
    c_prev = np.asarray(c_prev, dtype=np.float64)
    if x_t.shape[-1] != params.input_width:
        raise ShapeError(f"x_t has width {x_t.shape[-1]}, layer expects {params.input_width}")
    if h_prev.shape[-1] != params.hidden_width or c_prev.shape[-1] != params.hidden_width:
        raise ShapeError("h_prev/c_prev width disagrees with the layer's hidden width")

    f = _sigmoid(x_t @ params.W_f.T + h_prev @ params.U_f.T + params.V_f * c_prev + params.b_f)
    i = _sigmoid(x_t @ params.W_i.T + h_prev @ params.U_i.T + params.V_i * c_prev + params.b_i)
    c_tilde = np.tanh(x_t @ params.W_c.T + h_prev @ params.U_c.T + params.b_c)
    c_t = f * c_prev + i * c_tilde
    o = _sigmoid(x_t @ params.W_o.T + h_prev @ params.U_o.T + params.V_o * c_t + params.b_o)
    tanh_c = np.tanh(c_t)
    h_t = o * tanh_c
    cache = {
        "x": x_t, "h_prev": h_prev, "c_prev": c_prev,
        "f": f, "i": i, "c_tilde": c_tilde, "o": o, "c": c_t, "tanh_c": tanh_c,
    }
    return h_t, c_t, cache


def _run_forward(net: Network, windows: np.ndarray):
    """Shared forward: windows is (..., k, N); returns (prediction, caches).

    caches[t][l] is the cell cache of layer l at step t.
    """
    lead = windows.shape[:-2]
    h = [np.zeros(lead + (w,)) for w in net.hidden_widths]
    c = [np.zeros(lead + (w,)) for w in net.hidden_widths] if net.cell_kind == LSTM else None
    caches: list[list[dict]] = []
    for t in range(net.lookback_k):
        x = windows[..., t, :]
        step: list[dict] = []
        for l, params in enumerate(net.layers):
            if net.cell_kind == GRU:
                h[l], cache = gru_cell_forward(params, x, h[l])
            else:
                h[l], c[l], cache = lstm_cell_forward(params, x, h[l], c[l])
            x = h[l]
            step.append(cache)
        caches.append(step)
    prediction = h[-1] @ net.head_W.T + net.head_b
    return prediction, caches


def _check_window(net: Network, window: np.ndarray, batched: bool) -> np.ndarray:
    window = np.asarray(window, dtype=np.float64)
    want_ndim = 3 if batched else 2
    if window.ndim != want_ndim:
        raise ShapeError(f"window must be {want_ndim}-dimensional, got shape {window.shape}")
    if window.shape[-2] != net.lookback_k or window.shape[-1] != net.feature_count:
        raise ShapeError(
            f"window shape {window.shape[-2:]} does not match "
            f"(k={net.lookback_k}, N={net.feature_count})"
        )
    return window


def network_forward(net: Network, window: np.ndarray):
    """Evaluate one k x N window into a next-step feature vector."""
    window = _check_window(net, window, batched=False)
    return _run_forward(net, window)


def network_forward_batch(net: Network, windows: np.ndarray):
    """Evaluate a (B, k, N) stack of windows in one vectorized pass."""
    windows = _check_window(net, windows, batched=True)
    return _run_forward(net, windows)


def forecast_multistep(net: Network, window: np.ndarray, m: int) -> np.ndarray:
    """Recursive m-step forecast: each prediction re-enters the window."""
    if m < 1:
        raise ConfigError(f"forecast steps must be >= 1, got {m}")
    window = _check_window(net, window, batched=False)
    out = np.empty((m, net.feature_count))
    for step in range(m):
        prediction, _ = _run_forward(net, window)
        out[step] = prediction
        window = np.concatenate([window[1:], prediction[None, :]], axis=0)
    return out


def forecast_multistep_batch(net: Network, windows: np.ndarray, m: int) -> np.ndarray:
    """Vectorized recursive forecast for a (B, k, N) stack; returns (B, m, N)."""
    if m < 1:
        raise ConfigError(f"forecast steps must be >= 1, got {m}")
    windows = _check_window(net, windows, batched=True)
    out = np.empty((windows.shape[0], m, net.feature_count))
    for step in range(m):
        prediction, _ = _run_forward(net, windows)
        out[:, step, :] = prediction
        windows = np.concatenate([windows[:, 1:, :], prediction[:, None, :]], axis=1)
    return out


def iter_param_blocks(net: Network) -> Iterator[tuple[str, np.ndarray]]:
    """All parameter blocks in declared order: layers bottom-up, then head."""
    for l, layer in enumerate(net.layers):
        for name in layer.block_names:
            yield f"layers.{l}.{name}", getattr(layer, name)
    yield "head_W", net.head_W
    yield "head_b", net.head_b


def network_with_blocks(net: Network, blocks: dict[str, np.ndarray]) -> Network:
    """Build a new network whose parameter blocks come from ``blocks``."""
    new_layers = []
    for l, layer in enumerate(net.layers):
        kwargs = {name: blocks[f"layers.{l}.{name}"] for name in layer.block_names}
        new_layers.append(type(layer)(**kwargs))
    return Network(
        cell_kind=net.cell_kind,
        layers=tuple(new_layers),
        head_W=blocks["head_W"],
        head_b=blocks["head_b"],
        lookback_k=net.lookback_k,
    )


def network_to_vector(net: Network) -> np.ndarray:
    """Flatten every parameter block, in declared order, into one vector."""
    return np.concatenate([block.ravel() for _, block in iter_param_blocks(net)])


def network_from_vector(net: Network, vector: np.ndarray) -> Network:
    """Inverse of :func:`network_to_vector` against ``net``'s architecture."""
    vector = np.asarray(vector, dtype=np.float64)
    blocks: dict[str, np.ndarray] = {}
    offset = 0
    for name, block in iter_param_blocks(net):
        size = block.size
        blocks[name] = vector[offset : offset + size].reshape(block.shape).copy()
        offset += size
    if offset != vector.size:
        raise ShapeError(f"vector has {vector.size} entries, network needs {offset}")
    return network_with_blocks(net, blocks)


def param_count(net: Network) -> int:
    """Exact number of scalar parameters, biases and head included."""
    return int(sum(block.size for _, block in iter_param_blocks(net)))


def flop_breakdown(net: Network) -> dict[str, int]:
    """Multiply counts of one k-step forward pass, split by term.

    input_macs scale with H*I, recurrent_macs with H^2, pointwise_mults
    with H (gate products and peepholes), head_macs with N*H.  Additions
    and transcendentals are excluded; the counts are exact multiply
    tallies of the forward implementation.
    """
    gates = 3 if net.cell_kind == GRU else 4
    pointwise_per_h = 3 if net.cell_kind == GRU else 6
    input_macs = 0
    recurrent_macs = 0
    pointwise = 0
    for layer in net.layers:
        H, I = layer.hidden_width, layer.input_width
        input_macs += gates * H * I
        recurrent_macs += gates * H * H
        pointwise += pointwise_per_h * H
    k = net.lookback_k
    head_macs = net.head_W.size
    return {
        "input_macs": k * input_macs,
        "recurrent_macs": k * recurrent_macs,
        "pointwise_mults": k * pointwise,
        "head_macs": head_macs,
        "total": k * (input_macs + recurrent_macs + pointwise) + head_macs,
    }


def flop_count_per_forecast(net: Network) -> int:
    """Total multiply count of one single-step forecast."""
    return flop_breakdown(net)["total"]


def save_model(bundle: ModelBundle, path: str | os.PathLike) -> None:
    """Serialize a model file: magic, JSON header, raw float64 blocks.

    Layout (documented contract, little-endian):
      bytes 0-8    magic ``LCMODEL1\\n``
      bytes 9-16   uint64 header length
      next         UTF-8 JSON header (format version, cell kind, dims,
                   feature names, scaler, ordered block manifest)
      rest         the blocks' float64 data, concatenated in manifest order

    The write is atomic: data goes to a temp file that is renamed over
    ``path`` only when complete.
    """
    net = bundle.network
    manifest = [[name, list(block.shape)] for name, block in iter_param_blocks(net)]
    header = {
        "format_version": _MODEL_FORMAT_VERSION,
        "cell_kind": net.cell_kind,
        "layer_count": net.layer_count,
        "hidden_widths": list(net.hidden_widths),
        "lookback_k": net.lookback_k,
        "feature_count": net.feature_count,
        "feature_names": list(bundle.feature_names),
        "scaler": {
            "minimum": [float(v) for v in bundle.scaler.minimum],
            "maximum": [float(v) for v in bundle.scaler.maximum],
            "degenerate_mask": [bool(v) for v in bundle.scaler.degenerate_mask],
        },
        "blocks": manifest,
    }
    header_bytes = json.dumps(header, separators=(",", ":")).encode("utf-8")

    path = os.fspath(path)
    tmp_path = f"{path}.tmp.{os.getpid()}"
    try:
        with open(tmp_path, "wb") as fh:
            fh.write(_MODEL_MAGIC)
            fh.write(struct.pack("<Q", len(header_bytes)))
            fh.write(header_bytes)
            for _, block in iter_param_blocks(net):
                fh.write(np.ascontiguousarray(block, dtype="<f8").tobytes())
        os.replace(tmp_path, path)
    finally:
        if os.path.exists(tmp_path):
            os.unlink(tmp_path)


def load_model(path: str | os.PathLike) -> ModelBundle:
    """Read a model file back; round-trips bit-exactly with :func:`save_model`."""
    with open(path, "rb") as fh:
        magic = fh.read(len(_MODEL_MAGIC))
        if magic != _MODEL_MAGIC:
            raise DataError(f"{path}: not a loadcast model file")
        (header_len,) = struct.unpack("<Q", fh.read(8))
        header = json.loads(fh.read(header_len).decode("utf-8"))
        if header.get("format_version") != _MODEL_FORMAT_VERSION:
            raise DataError(f"{path}: unsupported model format version {header.get('format_version')}")
        blobs: dict[str, np.ndarray] = {}
        for name, shape in header["blocks"]:
            size = int(np.prod(shape)) if shape else 1
            raw = fh.read(size * 8)
            if len(raw) != size * 8:
                raise DataError(f"{path}: truncated model file at block {name!r}")
            blobs[name] = np.frombuffer(raw, dtype="<f8").reshape(shape).copy()
        if fh.read(1):
            raise DataError(f"{path}: trailing bytes after final block")

    cell_kind = header["cell_kind"]
    block_names = GRU_BLOCKS if cell_kind == GRU else LSTM_BLOCKS
    layer_cls = GruLayerParams if cell_kind == GRU else LstmLayerParams
    layers = []
    for l in range(header["layer_count"]):
        kwargs = {name: blobs[f"layers.{l}.{name}"] for name in block_names}
        layers.append(layer_cls(**kwargs))
    net = Network(
        cell_kind=cell_kind,
        layers=tuple(layers),
        head_W=blobs["head_W"],
        head_b=blobs["head_b"],
        lookback_k=header["lookback_k"],
    )
    scaler = ScalerParams(
        minimum=np.asarray(header["scaler"]["minimum"], dtype=np.float64),
        maximum=np.asarray(header["scaler"]["maximum"], dtype=np.float64),
        degenerate_mask=np.asarray(header["scaler"]["degenerate_mask"], dtype=bool),
    )
    return ModelBundle(network=net, scaler=scaler, feature_names=tuple(header["feature_names"]))
