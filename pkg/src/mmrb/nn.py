"""Model family: conv nets with a capacity-scale knob, init, forward pass,
and portable binary checkpoints.

The base architecture is conv-pool-conv-pool-fc-fc; ``capacity_scale``
multiplies every conv filter count and hidden width. Convolutions are 5x5,
stride 1, same padding; downsampling happens only through 2x2 max-pooling.
"""
from __future__ import annotations

import io
import json
import struct
import zlib
from dataclasses import dataclass, field

import numpy as np

from . import tensor
from .errors import ChecksumError, DataFormatError, ShapeMismatchError
from .tensor import Tape, Tensor
from .util import STREAM_INIT, derive_rng

Array = np.ndarray

CHECKPOINT_MAGIC = b"MMRB"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class LayerSpec:
    kind: str                   # conv | maxpool2 | relu | flatten | affine | standardize
    filters: int | None = None  # conv
    kernel: int = 5             # conv
    width: int | None = None    # affine
    padding: str = "same"       # conv

    def to_json(self) -> dict:
        d = {"kind": self.kind}
        if self.kind == "conv":
            d.update(filters=self.filters, kernel=self.kernel, padding=self.padding)
        elif self.kind == "affine":
            d.update(width=self.width)
        return d

    @staticmethod
    def from_json(d: dict) -> "LayerSpec":
        return LayerSpec(
            kind=d["kind"],
            filters=d.get("filters"),
            kernel=d.get("kernel", 5),
            width=d.get("width"),
            padding=d.get("padding", "same"),
        )


@dataclass(frozen=True)
class ModelSpec:
    layers: tuple[LayerSpec, ...]
    capacity_scale: int
    num_classes: int
    input_shape: tuple[int, int, int]   # h, w, c

    def to_json(self) -> dict:
        return {
            "layers": [layer.to_json() for layer in self.layers],
            "capacity_scale": self.capacity_scale,
            "num_classes": self.num_classes,
            "input_shape": list(self.input_shape),
        }

    @staticmethod
    def from_json(d: dict) -> "ModelSpec":
        return ModelSpec(
            layers=tuple(LayerSpec.from_json(layer) for layer in d["layers"]),
            capacity_scale=int(d["capacity_scale"]),
            num_classes=int(d["num_classes"]),
            input_shape=tuple(d["input_shape"]),
        )


@dataclass
class ModelParams:
    """Weight/bias pairs for the parametric layers, in layer order."""
    weights: list[Array] = field(default_factory=list)
    biases: list[Array] = field(default_factory=list)

    def flat(self) -> list[Array]:
        out = []
        for w, b in zip(self.weights, self.biases):
            out.append(w)
            out.append(b)
        return out

    def copy(self) -> "ModelParams":
        return ModelParams([w.copy() for w in self.weights], [b.copy() for b in self.biases])

    def n_params(self) -> int:
        return sum(a.size for a in self.flat())


_PRESETS = {
    # (conv filter counts, hidden widths); scaled by capacity_scale
    "mnist_capacity": {"convs": (2, 4), "hidden": (64,), "input": (28, 28, 1)},
    "mnist_eval": {"convs": (32, 64), "hidden": (1024,), "input": (28, 28, 1)},
}


def build_spec(preset: str, capacity_scale: int = 1, num_classes: int = 10) -> ModelSpec:
    """Construct a preset architecture at the given capacity scale."""
    if capacity_scale < 1 or int(capacity_scale) != capacity_scale:
        raise ValueError(f"capacity_scale must be a positive integer, got {capacity_scale}")
    s = int(capacity_scale)
    if preset in _PRESETS:
        cfg = _PRESETS[preset]
        layers = []
        for f in cfg["convs"]:
            layers += [LayerSpec("conv", filters=f * s), LayerSpec("relu"), LayerSpec("maxpool2")]
        layers.append(LayerSpec("flatten"))
        for wdt in cfg["hidden"]:
            layers += [LayerSpec("affine", width=wdt * s), LayerSpec("relu")]
        layers.append(LayerSpec("affine", width=num_classes))
        return ModelSpec(tuple(layers), s, num_classes, cfg["input"])
    if preset == "cifar_simple":
        layers = [LayerSpec("standardize")]
        for f in (16, 16):
            layers += [LayerSpec("conv", filters=f * s), LayerSpec("relu")]
        layers.append(LayerSpec("maxpool2"))
        for f in (32, 32):
            layers += [LayerSpec("conv", filters=f * s), LayerSpec("relu")]
        layers.append(LayerSpec("maxpool2"))
        layers.append(LayerSpec("flatten"))
        layers += [LayerSpec("affine", width=256 * s), LayerSpec("relu")]
        layers.append(LayerSpec("affine", width=num_classes))
        return ModelSpec(tuple(layers), s, num_classes, (32, 32, 3))
    raise ValueError(f"unknown preset {preset!r}")


def _walk_shapes(spec: ModelSpec):
    """Yield (layer, input_shape) pairs; shapes exclude the batch dim."""
    shape = spec.input_shape
    for layer in spec.layers:
        yield layer, shape
        if layer.kind == "conv":
            if layer.padding != "same":
                raise ValueError("presets use same padding only")
            shape = (shape[0], shape[1], layer.filters)
        elif layer.kind == "maxpool2":
            shape = (shape[0] // 2, shape[1] // 2, shape[2])
        elif layer.kind == "flatten":
            shape = (int(np.prod(shape)),)
        elif layer.kind == "affine":
            shape = (layer.width,)
        elif layer.kind in ("relu", "standardize"):
            pass
        else:
            raise ValueError(f"unknown layer kind {layer.kind!r}")
    final = shape
    if final != (spec.num_classes,):
        raise ValueError(f"spec does not end in {spec.num_classes} logits (got {final})")


def param_shapes(spec: ModelSpec) -> list[tuple[tuple[int, ...], tuple[int, ...]]]:
    """(weight shape, bias shape) per parametric layer, in order."""
    shapes = []
    for layer, shape in _walk_shapes(spec):
        if layer.kind == "conv":
            k = layer.kernel
            shapes.append(((k, k, shape[2], layer.filters), (layer.filters,)))
        elif layer.kind == "affine":
            if len(shape) != 1:
                raise ValueError("affine layer requires flattened input")
            shapes.append(((shape[0], layer.width), (layer.width,)))
    return shapes


def init_params(spec: ModelSpec, seed: int) -> ModelParams:
    """Fan-in uniform weights, b = sqrt(6/fan_in); constant 0.1 biases."""
    rng = derive_rng(seed, STREAM_INIT)
    params = ModelParams()
    for wshape, bshape in param_shapes(spec):
        fan_in = int(np.prod(wshape[:-1]))
        bound = np.sqrt(6.0 / fan_in)
        params.weights.append(rng.uniform(-bound, bound, size=wshape))
        params.biases.append(np.full(bshape, 0.1))
    return params


def forward(spec: ModelSpec, params: ModelParams, batch,
            tape: Tape | None = None,
            watch_input: bool = False,
            watch_params: bool = False):
    """Run the network; returns (logits, input_node, param_nodes).

    With no tape the node handles are None and this is a pure function of
    (spec, params, batch).
    """
    data = np.asarray(batch, dtype=np.float64)
    expected = tuple(spec.input_shape)
    if len(expected) == 1:
        if data.ndim != 2 or data.shape[1] != expected[0]:
            raise ShapeMismatchError(f"batch shape {data.shape} does not match input {expected}")
    elif data.ndim == 2 and data.shape[1] == int(np.prod(expected)):
        data = data.reshape((data.shape[0],) + expected)
    elif data.ndim != 4 or data.shape[1:] != expected:
        raise ShapeMismatchError(f"batch shape {data.shape} does not match input {expected}")

    if tape is not None:
        x = tensor.watch(tape, data, needs_grad=watch_input)
    else:
        x = tensor.constant(data)
    input_node = x.node

    param_nodes: list[int] = []
    pi = 0
    for layer in spec.layers:
        if layer.kind == "conv":
            w, b = params.weights[pi], params.biases[pi]
            pi += 1
            if tape is not None:
                wt = tensor.watch(tape, w, needs_grad=watch_params)
                bt = tensor.watch(tape, b, needs_grad=watch_params)
                param_nodes += [wt.node, bt.node]
            else:
                wt, bt = tensor.constant(w), tensor.constant(b)
            x = tensor.conv2d(x, wt, bt, padding=layer.padding)
        elif layer.kind == "affine":
            w, b = params.weights[pi], params.biases[pi]
            pi += 1
            if tape is not None:
                wt = tensor.watch(tape, w, needs_grad=watch_params)
                bt = tensor.watch(tape, b, needs_grad=watch_params)
                param_nodes += [wt.node, bt.node]
            else:
                wt, bt = tensor.constant(w), tensor.constant(b)
            x = tensor.affine(x, wt, bt)
        elif layer.kind == "relu":
            x = tensor.relu(x)
        elif layer.kind == "maxpool2":
            x = tensor.maxpool2(x)
        elif layer.kind == "flatten":
            x = tensor.reshape(x, (x.shape[0], int(np.prod(x.shape[1:]))))
        elif layer.kind == "standardize":
            x = tensor.standardize_image(x)
        else:
            raise ValueError(f"unknown layer kind {layer.kind!r}")
    return x, input_node, param_nodes


class Model:
    """A (spec, params) pair with the gradient entry points attacks and
    training use. Params are treated as immutable; swap the object to update."""

    def __init__(self, spec: ModelSpec, params: ModelParams):
        self.spec = spec
        self.params = params

    @property
    def num_classes(self) -> int:
        return self.spec.num_classes

    def logits(self, x) -> Array:
        out, _, _ = forward(self.spec, self.params, x)
        return out.data

    def predict(self, x) -> Array:
        return self.logits(x).argmax(axis=1)

    def logits_tape(self, x) -> tuple[Tensor, Tape, int]:
        """Forward pass recording gradients with respect to the input."""
        tape = Tape()
        out, input_node, _ = forward(self.spec, self.params, x, tape, watch_input=True)
        return out, tape, input_node

    def loss(self, x, labels) -> float:
        out, _, _ = forward(self.spec, self.params, x)
        return float(tensor.xent_rows_data(out.data, np.asarray(labels)).mean())

    def loss_rows(self, x, labels) -> Array:
        out, _, _ = forward(self.spec, self.params, x)
        return tensor.xent_rows_data(out.data, np.asarray(labels))

    def param_gradient(self, x, labels) -> tuple[float, ModelParams]:
        """Mean-batch cross-entropy and its gradient with respect to params."""
        tape = Tape()
        out, _, param_nodes = forward(self.spec, self.params, x, tape, watch_params=True)
        loss = tensor.softmax_xent(out, labels)
        grads = tensor.backward(tape, loss)
        gp = ModelParams()
        for i in range(0, len(param_nodes), 2):
            gp.weights.append(grads[param_nodes[i]].data)
            gp.biases.append(grads[param_nodes[i + 1]].data)
        return loss.item(), gp


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------
# Layout: magic "MMRB", version u16 LE, spec-JSON length u32 LE, spec JSON
# (UTF-8), then per parameter tensor: rank u8, extents u32 LE each, data f64
# LE; finally CRC32 (u32 LE) of everything before it.

def save_checkpoint(spec: ModelSpec, params: ModelParams, path) -> None:
    buf = io.BytesIO()
    buf.write(CHECKPOINT_MAGIC)
    buf.write(struct.pack("<H", CHECKPOINT_VERSION))
    spec_blob = json.dumps(spec.to_json(), sort_keys=True).encode("utf-8")
    buf.write(struct.pack("<I", len(spec_blob)))
    buf.write(spec_blob)
    for arr in params.flat():
        buf.write(struct.pack("<B", arr.ndim))
        for extent in arr.shape:
            buf.write(struct.pack("<I", extent))
        buf.write(arr.astype("<f8", copy=False).tobytes(order="C"))
    payload = buf.getvalue()
    crc = zlib.crc32(payload) & 0xFFFFFFFF
    with open(path, "wb") as f:
        f.write(payload)
        f.write(struct.pack("<I", crc))


def load_checkpoint(path) -> tuple[ModelSpec, ModelParams]:
    with open(path, "rb") as f:
        blob = f.read()
    if len(blob) < 14:
        raise DataFormatError("checkpoint truncated")
    payload, trailer = blob[:-4], blob[-4:]
    if zlib.crc32(payload) & 0xFFFFFFFF != struct.unpack("<I", trailer)[0]:
        raise ChecksumError("checkpoint CRC mismatch")
    if payload[:4] != CHECKPOINT_MAGIC:
        raise DataFormatError(f"bad checkpoint magic {payload[:4]!r}")
    version = struct.unpack("<H", payload[4:6])[0]
    if version != CHECKPOINT_VERSION:
        raise DataFormatError(f"unsupported checkpoint version {version}")
    spec_len = struct.unpack("<I", payload[6:10])[0]
    off = 10 + spec_len
    if off > len(payload):
        raise DataFormatError("checkpoint spec block truncated")
    spec = ModelSpec.from_json(json.loads(payload[10:off].decode("utf-8")))

    params = ModelParams()
    expected = param_shapes(spec)
    for wshape, bshape in expected:
        for target, shape in ((params.weights, wshape), (params.biases, bshape)):
            if off + 1 > len(payload):
                raise DataFormatError("checkpoint tensor header truncated")
            rank = payload[off]
            off += 1
            extents = struct.unpack_from(f"<{rank}I", payload, off)
            off += 4 * rank
            if extents != shape:
                raise DataFormatError(f"tensor extents {extents} do not match spec {shape}")
            count = int(np.prod(extents)) if rank else 1
            end = off + 8 * count
            if end > len(payload):
                raise DataFormatError("checkpoint tensor data truncated")
            arr = np.frombuffer(payload[off:end], dtype="<f8").reshape(extents).astype(np.float64)
            target.append(arr)
            off = end
    if off != len(payload):
        raise DataFormatError("trailing bytes after parameter tensors")
    return spec, params
