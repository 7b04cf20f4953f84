"""Network descriptions for TCNN and TCNN-Inception and their execution."""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Optional

import numpy as np

from . import engine
from .engine import ConvGeometry, Param, ShapeError

INPUT = -1  # input_refs value meaning "the network input"
LAYER_KINDS = ("conv2d", "global_avg_pool", "flatten", "dense", "concat", "batch_norm")
ACTIVATIONS = ("relu", "softmax", "none")

# full-resolution input: height x width x channels (half of the 460x700 originals)
DEFAULT_INPUT_SHAPE = (230, 350, 3)
N_CLASSES = 2


@dataclass(frozen=True)
class LayerSpec:
    kind: str
    inputs: tuple[int, ...]
    geometry: Optional[ConvGeometry] = None
    units: Optional[int] = None
    activation: str = "none"

    def __post_init__(self):
        if self.kind not in LAYER_KINDS:
            raise ValueError(f"unknown layer kind {self.kind!r}")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")
        if self.kind == "concat" and len(self.inputs) < 2:
            raise ValueError("concat needs at least two inputs")
        if self.kind != "concat" and len(self.inputs) != 1:
            raise ValueError(f"{self.kind} takes exactly one input")
        if self.kind == "conv2d" and self.geometry is None:
            raise ValueError("conv2d needs a geometry")
        if self.kind == "dense" and not self.units:
            raise ValueError("dense needs units")


@dataclass(frozen=True)
class NetworkSpec:
    name: str
    input_shape: tuple[int, int, int]
    layers: tuple[LayerSpec, ...]
    n_classes: int = N_CLASSES

    def __post_init__(self):
        for i, layer in enumerate(self.layers):
            if any(r >= i or r < INPUT for r in layer.inputs):
                raise ValueError(f"layer {i} references a later layer; graph must be a DAG in order")
        terminal = [i for i, l in enumerate(self.layers) if l.activation == "softmax"]
        if terminal != [len(self.layers) - 1]:
            raise ValueError("exactly the last layer must carry the softmax")
        shapes = trace_shapes(self)
        if shapes[-1] != (self.n_classes,):
            raise ShapeError(f"terminal output {shapes[-1]} != ({self.n_classes},)")


def _chain(layers: list[LayerSpec], kind: str, **kw) -> None:
    inputs = kw.pop("inputs", (len(layers) - 1,) if layers else (INPUT,))
    layers.append(LayerSpec(kind, tuple(inputs), **kw))


def build_tcnn(input_shape: tuple[int, int, int] = DEFAULT_INPUT_SHAPE) -> NetworkSpec:
    """Two valid 3x3 convolutions, global average pooling and three dense layers."""
    c = input_shape[2]
    layers: list[LayerSpec] = []
    _chain(layers, "conv2d", geometry=ConvGeometry(3, 3, c, 32, padding="valid"), activation="relu")
    _chain(layers, "conv2d", geometry=ConvGeometry(3, 3, 32, 32, padding="valid"), activation="relu")
    _chain(layers, "global_avg_pool")
    _chain(layers, "flatten")
    _chain(layers, "dense", units=32, activation="relu")
    _chain(layers, "dense", units=16, activation="relu")
    _chain(layers, "dense", units=N_CLASSES, activation="softmax")
    return NetworkSpec("tcnn", tuple(input_shape), tuple(layers))


def build_tcnn_inception(input_shape: tuple[int, int, int] = DEFAULT_INPUT_SHAPE) -> NetworkSpec:
    """Three parallel 1x1/3x3/5x5 blocks, a 1x1 bottleneck, batch norm and dense head."""
    layers: list[LayerSpec] = []
    src, channels = INPUT, input_shape[2]
    for filters in (32, 64, 128):
        branches = []
        for k in (1, 3, 5):
            _chain(layers, "conv2d", inputs=(src,), activation="relu",
                   geometry=ConvGeometry(k, k, channels, filters, padding="same"))
            branches.append(len(layers) - 1)
        _chain(layers, "concat", inputs=tuple(branches))
        src, channels = len(layers) - 1, 3 * filters
    _chain(layers, "conv2d", geometry=ConvGeometry(1, 1, channels, 256, padding="same"), activation="relu")
    _chain(layers, "batch_norm")
    _chain(layers, "global_avg_pool")
    _chain(layers, "flatten")
    _chain(layers, "dense", units=256, activation="relu")
    _chain(layers, "dense", units=32, activation="relu")
    _chain(layers, "dense", units=N_CLASSES, activation="softmax")
    return NetworkSpec("tcnn_inception", tuple(input_shape), tuple(layers))


BUILDERS = {"tcnn": build_tcnn, "tcnn_inception": build_tcnn_inception}


def build(name: str, input_shape: tuple[int, int, int] = DEFAULT_INPUT_SHAPE) -> NetworkSpec:
    try:
        return BUILDERS[name](tuple(input_shape))
    except KeyError:
        raise ValueError(f"unknown architecture {name!r}; choose from {sorted(BUILDERS)}") from None


def trace_shapes(spec: NetworkSpec) -> list[tuple[int, ...]]:
    """Per-layer output shapes (batch axis omitted), computed symbolically."""
    shapes: list[tuple[int, ...]] = []

    def shape_of(ref):
        return tuple(spec.input_shape) if ref == INPUT else shapes[ref]

    for i, layer in enumerate(spec.layers):
        ins = [shape_of(r) for r in layer.inputs]
        s = ins[0]
        if layer.kind == "conv2d":
            g = layer.geometry
            if len(s) != 3 or s[2] != g.in_channels:
                raise ShapeError(f"layer {i}: conv expects (H, W, {g.in_channels}), got {s}")
            out = (*g.output_hw(s[0], s[1]), g.out_channels)
        elif layer.kind == "concat":
            if any(len(t) != 3 or t[:2] != s[:2] for t in ins):
                raise ShapeError(f"layer {i}: concat spatial mismatch {ins}")
            out = (s[0], s[1], sum(t[2] for t in ins))
        elif layer.kind == "global_avg_pool":
            if len(s) != 3:
                raise ShapeError(f"layer {i}: pooling expects a feature map, got {s}")
            out = (1, 1, s[2])
        elif layer.kind == "flatten":
            out = (int(np.prod(s)),)
        elif layer.kind == "dense":
            if len(s) != 1:
                raise ShapeError(f"layer {i}: dense expects a vector, got {s}")
            out = (layer.units,)
        else:  # batch_norm
            out = s
        shapes.append(out)
    return shapes


def _param_shapes(spec: NetworkSpec) -> list[dict[str, tuple[tuple[int, ...], bool]]]:
    shapes = trace_shapes(spec)
    result = []
    for i, layer in enumerate(spec.layers):
        entry: dict[str, tuple[tuple[int, ...], bool]] = {}
        if layer.kind == "conv2d":
            g = layer.geometry
            entry = {"weights": (g.weight_shape, True), "bias": ((g.out_channels,), True)}
        elif layer.kind == "dense":
            fan_in = (tuple(spec.input_shape) if layer.inputs[0] == INPUT else shapes[layer.inputs[0]])[0]
            entry = {"weights": ((fan_in, layer.units), True), "bias": ((layer.units,), True)}
        elif layer.kind == "batch_norm":
            c = shapes[i][-1]
            entry = {"gamma": ((c,), True), "beta": ((c,), True),
                     "running_mean": ((c,), False), "running_var": ((c,), False)}
        result.append(entry)
    return result


def count_parameters(spec: NetworkSpec) -> tuple[int, int]:
    """(trainable, non_trainable) element counts."""
    trainable = non_trainable = 0
    for entry in _param_shapes(spec):
        for shape, is_trainable in entry.values():
            n = int(np.prod(shape))
            if is_trainable:
                trainable += n
            else:
                non_trainable += n
    return trainable, non_trainable


@dataclass
class ParameterStore:
    layers: list[dict[str, Param]]
    dtype: np.dtype = field(default_factory=lambda: np.dtype(np.float32))

    def items(self, trainable_only: bool = False) -> Iterator[tuple[int, str, Param]]:
        for i, entry in enumerate(self.layers):
            for name, p in entry.items():
                if p.trainable or not trainable_only:
                    yield i, name, p

    def zero_grad(self) -> None:
        for _, _, p in self.items():
            p.zero_grad()

    def snapshot(self) -> list[dict[str, np.ndarray]]:
        return [{k: p.value.copy() for k, p in entry.items()} for entry in self.layers]

    def restore(self, snap: list[dict[str, np.ndarray]]) -> None:
        for entry, saved in zip(self.layers, snap):
            for k, p in entry.items():
                p.value[...] = saved[k]

    def n_trainable(self) -> int:
        return sum(p.value.size for _, _, p in self.items(trainable_only=True))


def init_parameters(spec: NetworkSpec, seed: int, dtype=np.float32) -> ParameterStore:
    """Glorot-uniform weights, zero biases, unit gamma, zero beta."""
    rng = np.random.default_rng(seed)
    dtype = np.dtype(dtype)
    layers = []
    for layer, entry in zip(spec.layers, _param_shapes(spec)):
        params = {}
        for name, (shape, trainable) in entry.items():
            if name == "weights":
                if layer.kind == "conv2d":
                    kh, kw, cin, cout = shape
                    fan_in, fan_out = kh * kw * cin, kh * kw * cout
                else:
                    fan_in, fan_out = shape
                limit = np.sqrt(6.0 / (fan_in + fan_out))
                value = rng.uniform(-limit, limit, size=shape)
            elif name in ("gamma", "running_var"):
                value = np.ones(shape)
            else:
                value = np.zeros(shape)
            params[name] = Param.of(value.astype(dtype), trainable)
        layers.append(params)
    return ParameterStore(layers, dtype)


# -- execution ---------------------------------------------------------------

@dataclass
class Tape:
    """Activations recorded by :func:`forward` for a subsequent :func:`backward`."""

    x: Optional[np.ndarray] = None
    outputs: list = field(default_factory=list)
    caches: list = field(default_factory=list)


def _bn_state(params: dict[str, Param]) -> engine.BatchNormState:
    return engine.BatchNormState(params["running_mean"].value, params["running_var"].value)


def forward(spec: NetworkSpec, store: ParameterStore, x: np.ndarray, mode: str = "infer",
            tape: Optional[Tape] = None) -> np.ndarray:
    """Run the network and return pre-softmax logits of shape (N, n_classes)."""
    if mode not in ("train", "infer"):
        raise ValueError(f"unknown mode {mode!r}")
    if x.ndim != 4 or tuple(x.shape[1:]) != tuple(spec.input_shape):
        raise ShapeError(f"batch shape {x.shape[1:]} != network input {spec.input_shape}")
    x = x.astype(store.dtype, copy=False)
    engine.check_finite(x, "network input")
    outputs: list[np.ndarray] = []
    caches: list = []

    for i, (layer, params) in enumerate(zip(spec.layers, store.layers)):
        ins = [x if r == INPUT else outputs[r] for r in layer.inputs]
        cache = None
        if layer.kind == "conv2d":
            y = engine.conv2d(ins[0], params["weights"].value, params["bias"].value, layer.geometry)
        elif layer.kind == "dense":
            y = engine.dense(ins[0], params["weights"].value, params["bias"].value)
        elif layer.kind == "global_avg_pool":
            y = engine.global_avg_pool(ins[0])
        elif layer.kind == "flatten":
            y = ins[0].reshape(ins[0].shape[0], -1)
        elif layer.kind == "concat":
            y = engine.concat_channels(ins)
        else:
            y, cache = engine.batch_norm(ins[0], params["gamma"].value, params["beta"].value,
                                         _bn_state(params), mode)
        if layer.activation == "relu":
            y = engine.relu(y)
        if not np.all(np.isfinite(y)):
            raise engine.NonFiniteError(f"non-finite activations at layer {i} ({layer.kind})")
        outputs.append(y)
        caches.append(cache)

    if tape is not None:
        tape.x, tape.outputs, tape.caches = x, outputs, caches
    return outputs[-1]


def backward(spec: NetworkSpec, store: ParameterStore, dlogits: np.ndarray, tape: Tape) -> np.ndarray:
    """Accumulate parameter gradients into ``store``; return the input gradient."""
    if not tape.outputs:
        raise RuntimeError("backward called without a recorded forward pass")
    n = len(spec.layers)
    grads: dict[int, np.ndarray] = {n - 1: dlogits}

    def add(ref, g):
        grads[ref] = grads[ref] + g if ref in grads else g

    for i in range(n - 1, -1, -1):
        layer, params = spec.layers[i], store.layers[i]
        g = grads.pop(i, None)
        if g is None:
            continue
        y = tape.outputs[i]
        ins = [tape.x if r == INPUT else tape.outputs[r] for r in layer.inputs]
        if layer.activation == "relu":
            g = engine.relu_backward(g, y)
        if layer.kind == "conv2d":
            need_dx = layer.inputs[0] != INPUT
            dx, dw, db = engine.conv2d_backward(g, ins[0], params["weights"].value, layer.geometry,
                                                need_dx=need_dx)
            params["weights"].grad += dw
            params["bias"].grad += db
            if need_dx:
                add(layer.inputs[0], dx)
        elif layer.kind == "dense":
            dx, dw, db = engine.dense_backward(g, ins[0], params["weights"].value)
            params["weights"].grad += dw
            params["bias"].grad += db
            add(layer.inputs[0], dx)
        elif layer.kind == "global_avg_pool":
            add(layer.inputs[0], engine.global_avg_pool_backward(g, ins[0].shape))
        elif layer.kind == "flatten":
            add(layer.inputs[0], g.reshape(ins[0].shape))
        elif layer.kind == "concat":
            sizes = [t.shape[-1] for t in ins]
            for r, part in zip(layer.inputs, engine.concat_channels_backward(g, sizes)):
                add(r, part)
        else:
            dx, dgamma, dbeta = engine.batch_norm_backward(g, params["gamma"].value, tape.caches[i])
            params["gamma"].grad += dgamma
            params["beta"].grad += dbeta
            add(layer.inputs[0], dx)
    return grads.get(INPUT)


# -- checkpoint file -----------------------------------------------------------
#
# Layout (all integers little-endian):
#   8 bytes   magic b"TXNCKPT1"
#   4 bytes   uint32 header length L
#   L bytes   UTF-8 JSON header: {"arch", "input_shape", "dtype", "tensors": [
#               {"layer", "name", "shape", "dtype", "trainable", "offset", "nbytes"}, ...]}
#   payload   tensors back to back, little-endian, C order; offsets relative
#             to the start of the payload

CHECKPOINT_MAGIC = b"TXNCKPT1"


def save_checkpoint(path, spec: NetworkSpec, store: ParameterStore) -> None:
    entries, blobs, offset = [], [], 0
    for layer, name, p in store.items():
        arr = np.ascontiguousarray(p.value, dtype=p.value.dtype.newbyteorder("<"))
        raw = arr.tobytes()
        entries.append({"layer": layer, "name": name, "shape": list(arr.shape),
                        "dtype": arr.dtype.str, "trainable": p.trainable,
                        "offset": offset, "nbytes": len(raw)})
        blobs.append(raw)
        offset += len(raw)
    header = json.dumps({"arch": spec.name, "input_shape": list(spec.input_shape),
                         "dtype": store.dtype.name, "tensors": entries}).encode()
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", len(header)))
        fh.write(header)
        for raw in blobs:
            fh.write(raw)


def load_checkpoint(path) -> tuple[NetworkSpec, ParameterStore]:
    data = Path(path).read_bytes()
    if data[:8] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: not a texnet checkpoint")
    (hlen,) = struct.unpack("<I", data[8:12])
    header = json.loads(data[12 : 12 + hlen])
    payload = memoryview(data)[12 + hlen :]
    spec = build(header["arch"], tuple(header["input_shape"]))
    store = init_parameters(spec, seed=0, dtype=header["dtype"])
    for t in header["tensors"]:
        arr = np.frombuffer(payload[t["offset"] : t["offset"] + t["nbytes"]], dtype=t["dtype"])
        p = store.layers[t["layer"]][t["name"]]
        p.value[...] = arr.reshape(t["shape"]).astype(store.dtype)
    return spec, store
