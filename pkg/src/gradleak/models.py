"""Differentiable classifiers: a small strided CNN for images and a
one-hidden-layer MLP for attribute vectors."""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .tensor import DiffGraph, Tensor


@dataclass(frozen=True)
class ModelSpec:
    """Architecture description; layer shapes are derived, not stored."""

    kind: str                      # "mlp" | "cnn"
    input_shape: tuple[int, ...]   # (d,) for mlp, (C, H, W) for cnn
    num_classes: int
    activation: str = "sigmoid"
    hidden_sizes: tuple[int, ...] = (64,)        # mlp only
    conv_channels: tuple[int, ...] = (12, 12)    # cnn, scaled by filter_multiplier
    kernel_size: int = 5
    conv_stride: int = 2
    dropout_rate: float = 0.0
    filter_multiplier: int = 1
    leaky_slope: float = 0.01

    def __post_init__(self):
        object.__setattr__(self, "input_shape", tuple(int(s) for s in self.input_shape))
        object.__setattr__(self, "hidden_sizes", tuple(int(s) for s in self.hidden_sizes))
        object.__setattr__(self, "conv_channels", tuple(int(s) for s in self.conv_channels))
        if self.kind not in ("mlp", "cnn"):
            raise ValueError(f"unknown model kind {self.kind!r}")
        if self.num_classes < 2:
            raise ValueError("num_classes must be >= 2")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ValueError("dropout_rate must be in [0, 1)")
        if self.filter_multiplier < 1:
            raise ValueError("filter_multiplier must be >= 1")
        if self.kind == "cnn" and len(self.input_shape) != 3:
            raise ValueError("cnn input_shape must be (C, H, W)")
        layer_shapes(self)  # raises if the chain does not fit


def _conv_out(size: int, kernel: int, stride: int) -> int:
    return (size - kernel) // stride + 1


def layer_shapes(spec: ModelSpec) -> list[tuple[str, tuple[int, ...]]]:
    """Ordered (name, shape) pairs for every parameter tensor."""
    shapes: list[tuple[str, tuple[int, ...]]] = []
    if spec.kind == "mlp":
        dims = [int(np.prod(spec.input_shape))] + list(spec.hidden_sizes) + [spec.num_classes]
        for i in range(len(dims) - 1):
            prefix = f"dense{i + 1}" if i < len(dims) - 2 else "out"
            shapes.append((f"{prefix}.weight", (dims[i], dims[i + 1])))
            shapes.append((f"{prefix}.bias", (dims[i + 1],)))
        return shapes
    c, h, w = spec.input_shape
    cin = c
    for i, ch in enumerate(spec.conv_channels):
        cout = ch * spec.filter_multiplier
        shapes.append((f"conv{i + 1}.weight", (cout, cin, spec.kernel_size, spec.kernel_size)))
        shapes.append((f"conv{i + 1}.bias", (cout,)))
        h = _conv_out(h, spec.kernel_size, spec.conv_stride)
        w = _conv_out(w, spec.kernel_size, spec.conv_stride)
        if h < 1 or w < 1:
            raise ValueError("conv chain shrinks the input below 1x1")
        cin = cout
    shapes.append(("out.weight", (cin * h * w, spec.num_classes)))
    shapes.append(("out.bias", (spec.num_classes,)))
    return shapes


@dataclass
class ParamSet:
    """Ordered, named parameter tensors; flattens to one float64 vector."""

    names: tuple[str, ...]
    tensors: tuple[Tensor, ...]

    @property
    def total_dim(self) -> int:
        return sum(t.size for t in self.tensors)

    def flatten(self) -> np.ndarray:
        return np.concatenate([t.data.reshape(-1) for t in self.tensors])

    def unflatten(self, flat: np.ndarray) -> "ParamSet":
        flat = np.asarray(flat, dtype=np.float64)
        if flat.size != self.total_dim:
            raise ValueError("flat vector size does not match parameter count")
        out, offset = [], 0
        for t in self.tensors:
            chunk = flat[offset:offset + t.size].reshape(t.shape)
            out.append(Tensor(chunk.copy()))
            offset += t.size
        return ParamSet(self.names, tuple(out))

    def attach(self, graph: DiffGraph) -> "ParamSet":
        return ParamSet(self.names, tuple(graph.leaf(t) for t in self.tensors))

    def arrays(self) -> list[np.ndarray]:
        return [t.data for t in self.tensors]

    def __iter__(self):
        return iter(zip(self.names, self.tensors))


# a gradient set has the same structure as the parameters it differentiates
GradientVector = ParamSet


def init_params(spec: ModelSpec, seed: int) -> ParamSet:
    """Uniform(-a, a) weights with a = sqrt(6 / (fan_in + fan_out)); zero biases."""
    rng = np.random.default_rng(seed)
    names, tensors = [], []
    for name, shape in layer_shapes(spec):
        if name.endswith(".bias"):
            value = np.zeros(shape)
        else:
            if len(shape) == 2:
                fan_in, fan_out = shape
            else:
                receptive = shape[2] * shape[3]
                fan_in, fan_out = shape[1] * receptive, shape[0] * receptive
            a = np.sqrt(6.0 / (fan_in + fan_out))
            value = rng.uniform(-a, a, size=shape)
        names.append(name)
        tensors.append(Tensor(value))
    return ParamSet(tuple(names), tuple(tensors))


def _dropout(h: Tensor, rate: float, rng: np.random.Generator) -> Tensor:
    keep = 1.0 - rate
    mask = (rng.random(h.shape) < keep).astype(np.float64) / keep
    return T.mul(h, Tensor(mask))


def forward(spec: ModelSpec, params: ParamSet, x, train: bool = False,
            dropout_seed: int = 0) -> Tensor:
    """Logits of shape [B, num_classes]; accepts a single input or a batch.

    Dropout (inverted scaling) is applied to hidden activations only when
    ``train`` is set, with a mask derived from ``dropout_seed``.
    """
    x = x if isinstance(x, Tensor) else Tensor(x)
    expected = spec.input_shape
    if x.shape == expected:
        x = T.reshape(x, (1,) + expected)
    elif x.ndim != len(expected) + 1 or x.shape[1:] != expected:
        raise ValueError(f"input shape {x.shape} does not match {expected}")
    batch = x.shape[0]
    use_dropout = train and spec.dropout_rate > 0.0
    rng = np.random.default_rng(dropout_seed) if use_dropout else None
    by_name = dict(zip(params.names, params.tensors))

    if spec.kind == "cnn":
        h = x
        for i in range(len(spec.conv_channels)):
            h = T.conv2d(h, by_name[f"conv{i + 1}.weight"], stride=spec.conv_stride,
                         padding=0, bias=by_name[f"conv{i + 1}.bias"])
            h = T.activation(spec.activation, h, spec.leaky_slope)
            if use_dropout:
                h = _dropout(h, spec.dropout_rate, rng)
        h = T.reshape(h, (batch, int(np.prod(h.shape[1:]))))
        w, b = by_name["out.weight"], by_name["out.bias"]
        return T.add(T.matmul(h, w), T.tile_rows(b, batch))

    h = T.reshape(x, (batch, int(np.prod(expected))))
    n_hidden = len(spec.hidden_sizes)
    for i in range(n_hidden):
        w, b = by_name[f"dense{i + 1}.weight"], by_name[f"dense{i + 1}.bias"]
        h = T.add(T.matmul(h, w), T.tile_rows(b, batch))
        h = T.activation(spec.activation, h, spec.leaky_slope)
        if use_dropout:
            h = _dropout(h, spec.dropout_rate, rng)
    w, b = by_name["out.weight"], by_name["out.bias"]
    return T.add(T.matmul(h, w), T.tile_rows(b, batch))


def loss_and_gradients(spec: ModelSpec, params: ParamSet, batch,
                       retain_graph: bool = False, train: bool = False,
                       dropout_seed: int = 0):
    """Mean cross-entropy over a (X, labels) batch and its parameter gradients."""
    xs, labels = batch
    xs = np.asarray(xs.data if isinstance(xs, Tensor) else xs, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.intp).reshape(-1)
    if labels.size == 0:
        raise ValueError("batch must not be empty")
    graph = DiffGraph()
    attached = params.attach(graph)
    logits = forward(spec, attached, Tensor(xs), train=train, dropout_seed=dropout_seed)
    loss = T.mean_softmax_cross_entropy(logits, labels)
    grads = T.grad(loss, list(attached.tensors), retain_graph=retain_graph)
    return loss, GradientVector(params.names, tuple(grads))


# ---------------------------------------------------------------------------
# serialization: one-line JSON shape manifest followed by raw little-endian
# float64 data
# ---------------------------------------------------------------------------

def save_params(params: ParamSet, path) -> None:
    manifest = {"names": list(params.names),
                "shapes": [list(t.shape) for t in params.tensors]}
    with open(path, "wb") as fh:
        fh.write(json.dumps(manifest, sort_keys=True).encode() + b"\n")
        fh.write(params.flatten().astype("<f8").tobytes())


def load_params(path) -> ParamSet:
    with open(path, "rb") as fh:
        manifest = json.loads(fh.readline().decode())
        raw = fh.read()
    flat = np.frombuffer(raw, dtype="<f8")
    tensors, offset = [], 0
    for shape in manifest["shapes"]:
        n = int(np.prod(shape)) if shape else 1
        tensors.append(Tensor(flat[offset:offset + n].reshape(shape).copy()))
        offset += n
    if offset != flat.size:
        raise ValueError("parameter file length does not match its manifest")
    return ParamSet(tuple(manifest["names"]), tuple(tensors))
