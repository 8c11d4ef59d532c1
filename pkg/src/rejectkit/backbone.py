"""Feed-forward classifiers with named activation taps.

The network is a plain list of layers (dense, ReLU, terminal softmax).  Any
layer may carry a ``tap_id``; the activation it produces is exposed to the
detectors.  The reserved tap ``"input"`` always refers to ``x`` itself.

Everything works on batches: ``X`` has shape ``(n, input_dim)``.
"""

from __future__ import annotations

import enum
import io
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .errors import ParseError, TrainingError, UnsupportedVersionError
from .mathutils import SeedStreams

INPUT_TAP = "input"
LOGITS = "logits"
MODEL_MAGIC = "rejectkit-model"
MODEL_BINARY_MAGIC = b"RKMB"
MODEL_VERSION = 1


class LayerKind(str, enum.Enum):
    DENSE = "dense"
    RELU = "relu"
    SOFTMAX = "softmax"


@dataclass(frozen=True)
class LayerSpec:
    kind: LayerKind
    in_dim: int
    out_dim: int
    tap_id: Optional[str] = None

    def __post_init__(self):
        object.__setattr__(self, "kind", LayerKind(self.kind))
        if self.kind is not LayerKind.DENSE and self.in_dim != self.out_dim:
            raise ValueError(f"{self.kind.value} layer must preserve dimension")
        if self.tap_id in (INPUT_TAP, LOGITS):
            raise ValueError(f"tap id {self.tap_id!r} is reserved")


def mlp_arch(sizes, taps=None):
    """Dense/ReLU stack ``sizes[0] -> ... -> sizes[-1]`` ending in softmax.

    ``taps`` maps hidden-layer index (1-based, post-ReLU) to a tap id.  The final
    dense layer output is always available as ``"logits"``.
    """
    taps = taps or {}
    layers = []
    for i in range(len(sizes) - 1):
        layers.append(LayerSpec(LayerKind.DENSE, sizes[i], sizes[i + 1]))
        if i < len(sizes) - 2:
            layers.append(LayerSpec(LayerKind.RELU, sizes[i + 1], sizes[i + 1], taps.get(i + 1)))
    layers.append(LayerSpec(LayerKind.SOFTMAX, sizes[-1], sizes[-1]))
    return layers


def validate_arch(layers):
    if not layers:
        raise ValueError("empty architecture")
    for prev, cur in zip(layers, layers[1:]):
        if prev.out_dim != cur.in_dim:
            raise ValueError(f"layer dims incompatible: {prev.out_dim} -> {cur.in_dim}")
    for i, layer in enumerate(layers):
        if layer.kind is LayerKind.SOFTMAX and i != len(layers) - 1:
            raise ValueError("softmax is only allowed as the terminal layer")
    ids = [l.tap_id for l in layers if l.tap_id]
    if len(set(ids)) != len(ids):
        raise ValueError("duplicate tap ids")


@dataclass
class TrainConfig:
    learning_rate: float = 0.1
    momentum: float = 0.9
    batch_size: int = 128
    epochs: int = 50

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if not 0 <= self.momentum < 1:
            raise ValueError("momentum must lie in [0, 1)")
        if self.batch_size < 1 or self.epochs < 1:
            raise ValueError("batch_size and epochs must be >= 1")


@dataclass
class NetworkModel:
    layers: list
    weights: list  # (out, in) matrix per dense layer, None otherwise
    biases: list
    input_dim: int = field(init=False)
    class_count: int = field(init=False)

    def __post_init__(self):
        validate_arch(self.layers)
        self.input_dim = self.layers[0].in_dim
        self.class_count = self.layers[-1].out_dim
        for layer, W, b in zip(self.layers, self.weights, self.biases):
            if layer.kind is LayerKind.DENSE:
                if W.shape != (layer.out_dim, layer.in_dim) or b.shape != (layer.out_dim,):
                    raise ValueError("weight shape does not match layer spec")

    @property
    def tap_ids(self):
        return [INPUT_TAP] + [l.tap_id for l in self.layers if l.tap_id] + [LOGITS]

    def tap_dim(self, tap_id):
        if tap_id == INPUT_TAP:
            return self.input_dim
        if tap_id == LOGITS:
            return self._logits_layer().out_dim
        for layer in self.layers:
            if layer.tap_id == tap_id:
                return layer.out_dim
        raise KeyError(f"unknown tap id {tap_id!r}")

    def _logits_layer(self):
        if self.layers[-1].kind is LayerKind.SOFTMAX:
            return self.layers[-2]
        return self.layers[-1]

    def forward(self, X, keep_cache=False):
        """Batched forward pass.

        Returns ``(logits, taps)`` or ``(logits, taps, cache)``.
        """
        X = np.asarray(X, dtype=np.float64)
        single = X.ndim == 1
        X = np.atleast_2d(X)
        if X.shape[1] != self.input_dim:
            raise ValueError(f"input has dim {X.shape[1]}, expected {self.input_dim}")
        taps = {INPUT_TAP: X}
        cache = []
        a = X
        for layer, W, b in zip(self.layers, self.weights, self.biases):
            cache.append(a)
            if layer.kind is LayerKind.DENSE:
                a = a @ W.T + b
            elif layer.kind is LayerKind.RELU:
                a = np.maximum(a, 0.0)
            else:
                # logits stay pre-softmax
                continue
            if layer.tap_id:
                taps[layer.tap_id] = a
        taps[LOGITS] = a
        if single:
            a = a[0]
            taps = {k: v[0] for k, v in taps.items()}
        if keep_cache:
            return a, taps, cache
        return a, taps

    def predict(self, X):
        return np.argmax(self.forward(X)[0], axis=-1)

    def vjp(self, cache, upstream):
        """Reverse pass from cotangents on taps/logits to the input."""
        unknown = set(upstream) - set(self.tap_ids)
        if unknown:
            raise KeyError(f"unknown tap id(s): {sorted(unknown)}")
        n = cache[0].shape[0]
        g = np.zeros((n, self._logits_layer().out_dim))
        if LOGITS in upstream:
            g = g + np.reshape(upstream[LOGITS], g.shape)
        for idx in range(len(self.layers) - 1, -1, -1):
            layer = self.layers[idx]
            if layer.kind is LayerKind.SOFTMAX:
                continue
            if layer.tap_id and layer.tap_id in upstream:
                g = g + np.reshape(upstream[layer.tap_id], g.shape)
            a_in = cache[idx]
            if layer.kind is LayerKind.DENSE:
                g = g @ self.weights[idx]
            else:
                g = g * (a_in > 0)
        if INPUT_TAP in upstream:
            g = g + np.reshape(upstream[INPUT_TAP], g.shape)
        return g

    def copy(self):
        return NetworkModel(
            list(self.layers),
            [None if W is None else W.copy() for W in self.weights],
            [None if b is None else b.copy() for b in self.biases],
        )


def forward_with_taps(model: NetworkModel, x):
    return model.forward(x)


def input_vjp(model: NetworkModel, x, upstream):
    """Gradient w.r.t. ``x`` of ``sum_k <upstream[k], tap_k(x)>``.

    ``x`` may be a single vector or a batch; cotangents must match.
    """
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    _, _, cache = model.forward(np.atleast_2d(x), keep_cache=True)
    if single:
        upstream = {k: np.atleast_2d(v) for k, v in upstream.items()}
    g = model.vjp(cache, upstream)
    return g[0] if single else g


def init_model(layers, rng):
    validate_arch(layers)
    weights, biases = [], []
    for layer in layers:
        if layer.kind is LayerKind.DENSE:
            bound = np.sqrt(6.0 / layer.in_dim)
            weights.append(rng.uniform(-bound, bound, size=(layer.out_dim, layer.in_dim)))
            biases.append(np.zeros(layer.out_dim))
        else:
            weights.append(None)
            biases.append(None)
    return NetworkModel(list(layers), weights, biases)


def softmax(z):
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def cross_entropy(logits, labels):
    z = logits - logits.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    return float(-logp[np.arange(len(labels)), labels].mean())


def _param_grads(model, X, labels):
    logits, _, cache = model.forward(X, keep_cache=True)
    p = softmax(logits)
    p[np.arange(len(labels)), labels] -= 1.0
    g = p / len(labels)
    gW = [None] * len(model.layers)
    gb = [None] * len(model.layers)
    for idx in range(len(model.layers) - 1, -1, -1):
        layer = model.layers[idx]
        if layer.kind is LayerKind.SOFTMAX:
            continue
        a_in = cache[idx]
        if layer.kind is LayerKind.DENSE:
            gW[idx] = g.T @ a_in
            gb[idx] = g.sum(0)
            if idx > 0:
                g = g @ model.weights[idx]
        else:
            g = g * (a_in > 0)
    return gW, gb


def train_backbone(X, labels, arch, cfg: TrainConfig, seed: int, log=None) -> NetworkModel:
    """Minibatch SGD with momentum on softmax cross-entropy."""
    X = np.asarray(X, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    if len(X) == 0:
        raise ValueError("empty training set")
    c = arch[-1].out_dim
    if labels.min() < 0 or labels.max() >= c:
        raise ValueError(f"labels must lie in 0..{c - 1}")
    streams = SeedStreams(seed)
    model = init_model(arch, streams.get("backbone-init"))
    shuffle = streams.get("backbone-shuffle")
    vel_W = [None if W is None else np.zeros_like(W) for W in model.weights]
    vel_b = [None if b is None else np.zeros_like(b) for b in model.biases]
    n = len(X)
    for epoch in range(1, cfg.epochs + 1):
        order = shuffle.permutation(n)
        for start in range(0, n, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            gW, gb = _param_grads(model, X[idx], labels[idx])
            for k, W in enumerate(model.weights):
                if W is None:
                    continue
                vel_W[k] = cfg.momentum * vel_W[k] - cfg.learning_rate * gW[k]
                vel_b[k] = cfg.momentum * vel_b[k] - cfg.learning_rate * gb[k]
                W += vel_W[k]
                model.biases[k] += vel_b[k]
        loss = cross_entropy(model.forward(X)[0], labels)
        if not np.isfinite(loss):
            raise TrainingError(f"training diverged at epoch {epoch} (loss={loss})")
        if log is not None:
            log(epoch, loss)
    return model


# --------------------------------------------------------------------------
# persistence


def _arch_lines(model):
    out = [f"{MODEL_MAGIC} {MODEL_VERSION}", f"layers {len(model.layers)}"]
    for layer in model.layers:
        out.append(f"{layer.kind.value} {layer.in_dim} {layer.out_dim} {layer.tap_id or '-'}")
    return out


def save_model(model: NetworkModel, path, binary=False):
    """Write ``model``; text by default, packed float64 when ``binary``."""
    path = Path(path)
    if binary:
        buf = io.BytesIO()
        header = "\n".join(_arch_lines(model)).encode()
        buf.write(MODEL_BINARY_MAGIC + struct.pack("<II", MODEL_VERSION, len(header)))
        buf.write(header)
        for W in model.weights:
            if W is not None:
                buf.write(np.ascontiguousarray(W, dtype="<f8").tobytes())
        for b in model.biases:
            if b is not None:
                buf.write(np.ascontiguousarray(b, dtype="<f8").tobytes())
        path.write_bytes(buf.getvalue())
        return
    lines = _arch_lines(model)
    for k, W in enumerate(model.weights):
        if W is None:
            continue
        lines.append(f"weights {k} {W.shape[0]} {W.shape[1]}")
        lines.extend(" ".join(repr(float(v)) for v in row) for row in W)
    for k, b in enumerate(model.biases):
        if b is None:
            continue
        lines.append(f"bias {k} {b.shape[0]}")
        lines.append(" ".join(repr(float(v)) for v in b))
    lines.append("end")
    path.write_text("\n".join(lines) + "\n")


class _LineReader:
    def __init__(self, text):
        self.lines = text.split("\n")
        self.pos = 0
        self.offset = 0

    def next(self, what):
        if self.pos >= len(self.lines) or (self.pos == len(self.lines) - 1 and not self.lines[-1]):
            raise ParseError(f"unexpected end of file while reading {what}", self.offset)
        line = self.lines[self.pos]
        here = self.offset
        self.pos += 1
        self.offset += len(line.encode()) + 1
        return line, here


def _parse_header(reader):
    line, off = reader.next("header")
    parts = line.split()
    if len(parts) != 2 or parts[0] != MODEL_MAGIC:
        raise ParseError("not a model file", off)
    if parts[1] != str(MODEL_VERSION):
        raise UnsupportedVersionError(f"unsupported model version {parts[1]}", off)
    line, off = reader.next("layer count")
    try:
        key, count = line.split()
        assert key == "layers"
        count = int(count)
    except (ValueError, AssertionError):
        raise ParseError("bad layer count line", off) from None
    layers = []
    for _ in range(count):
        line, off = reader.next("layer spec")
        try:
            kind, i, o, tap = line.split()
            layers.append(LayerSpec(LayerKind(kind), int(i), int(o), None if tap == "-" else tap))
        except ValueError:
            raise ParseError(f"bad layer spec {line!r}", off) from None
    return layers


def _floats(line, n, off):
    try:
        vals = np.array([float(v) for v in line.split()], dtype=np.float64)
    except ValueError:
        raise ParseError("non-numeric value", off) from None
    if vals.size != n:
        raise ParseError(f"expected {n} values, found {vals.size}", off)
    if not np.all(np.isfinite(vals)):
        raise ParseError("non-finite value", off)
    return vals


def load_model(path) -> NetworkModel:
    data = Path(path).read_bytes()
    if data[:4] == MODEL_BINARY_MAGIC:
        return _load_binary(data)
    try:
        text = data.decode()
    except UnicodeDecodeError as exc:
        raise ParseError("model file is not valid text", exc.start) from None
    reader = _LineReader(text)
    layers = _parse_header(reader)
    weights = [None] * len(layers)
    biases = [None] * len(layers)
    dense = [k for k, l in enumerate(layers) if l.kind is LayerKind.DENSE]
    for k in dense:
        line, off = reader.next("weights header")
        spec = layers[k]
        if line.split() != ["weights", str(k), str(spec.out_dim), str(spec.in_dim)]:
            raise ParseError(f"expected weights for layer {k}", off)
        rows = []
        for _ in range(spec.out_dim):
            line, off = reader.next("weight row")
            rows.append(_floats(line, spec.in_dim, off))
        weights[k] = np.vstack(rows)
    for k in dense:
        line, off = reader.next("bias header")
        if line.split() != ["bias", str(k), str(layers[k].out_dim)]:
            raise ParseError(f"expected bias for layer {k}", off)
        line, off = reader.next("bias values")
        biases[k] = _floats(line, layers[k].out_dim, off)
    line, off = reader.next("end marker")
    if line.strip() != "end":
        raise ParseError("missing end marker", off)
    try:
        return NetworkModel(layers, weights, biases)
    except ValueError as exc:
        raise ParseError(str(exc)) from None


def _load_binary(data):
    if len(data) < 12:
        raise ParseError("truncated binary header", len(data))
    version, hlen = struct.unpack("<II", data[4:12])
    if version != MODEL_VERSION:
        raise UnsupportedVersionError(f"unsupported model version {version}", 4)
    if len(data) < 12 + hlen:
        raise ParseError("truncated binary header", len(data))
    reader = _LineReader(data[12:12 + hlen].decode())
    layers = _parse_header(reader)
    pos = 12 + hlen
    weights = [None] * len(layers)
    biases = [None] * len(layers)

    def take(count):
        nonlocal pos
        end = pos + 8 * count
        if end > len(data):
            raise ParseError("truncated weight payload", len(data))
        arr = np.frombuffer(data[pos:end], dtype="<f8").astype(np.float64)
        pos = end
        return arr

    dense = [k for k, l in enumerate(layers) if l.kind is LayerKind.DENSE]
    for k in dense:
        weights[k] = take(layers[k].out_dim * layers[k].in_dim).reshape(layers[k].out_dim, layers[k].in_dim)
    for k in dense:
        biases[k] = take(layers[k].out_dim)
    if pos != len(data):
        raise ParseError("trailing bytes after payload", pos)
    return NetworkModel(layers, weights, biases)
