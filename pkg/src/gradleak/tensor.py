"""N-dimensional float64 tensors with a replayable operation tape and
reverse-mode differentiation.

Every backward rule is itself expressed through recorded tensor operations,
so a gradient obtained with ``grad(..., retain_graph=True)`` stays attached
to the tape and can be differentiated again. That is what lets a scalar
built from model gradients be minimized with respect to an input tensor.
"""

from __future__ import annotations

import numpy as np

__all__ = [
    "Tensor",
    "DiffGraph",
    "elementwise",
    "matmul",
    "conv2d",
    "activation",
    "softmax_cross_entropy",
    "mean_softmax_cross_entropy",
    "grad",
]

# Op kinds recorded on the tape.
LEAF = "leaf"
CONST = "const"
ADD = "add"
SUB = "sub"
MUL = "mul"
DIV = "div"
NEG = "neg"
SCALE = "scale"  # multiply by a python scalar
SADD = "sadd"    # add a python scalar
SQUARE = "square"
EXP = "exp"
LOG = "log"
SQRT = "sqrt"
MATMUL = "matmul"
PERMUTE = "permute"
RESHAPE = "reshape"
TAKE = "take"        # gather from the flattened input
PUT_ADD = "put_add"  # scatter-add into a copy of the first input
PAD2D = "pad2d"
CROP2D = "crop2d"
SUM = "sum"          # full reduction to a scalar
ROWSUM = "rowsum"    # sum over axis 0
TILE_ROWS = "tile_rows"
EXPAND = "expand"    # broadcast a scalar to a shape
SIGMOID = "sigmoid"
TANH = "tanh"
RELU = "relu"
LEAKYRELU = "leakyrelu"


class Node:
    """One record on the tape: an op, its input node ids and its value."""

    __slots__ = ("op", "inputs", "value", "extra")

    def __init__(self, op, inputs, value, extra=None):
        self.op = op
        self.inputs = inputs
        self.value = value
        self.extra = extra


class DiffGraph:
    """Append-only tape of operation records, topological by construction."""

    def __init__(self):
        self.nodes: list[Node] = []
        self.recording = True

    def __len__(self):
        return len(self.nodes)

    def _record(self, op, inputs, value, extra=None) -> int:
        self.nodes.append(Node(op, inputs, value, extra))
        return len(self.nodes) - 1

    def _const_id(self, value: np.ndarray) -> int:
        return self._record(CONST, (), value)

    def leaf(self, data) -> "Tensor":
        """Attach ``data`` as a differentiable leaf of this graph."""
        t = data if isinstance(data, Tensor) else Tensor(data)
        nid = self._record(LEAF, (), t.data)
        return Tensor._wrap(t.data, self, nid)

    def tensor(self, node_id: int) -> "Tensor":
        """A tensor view of an existing node."""
        return Tensor._wrap(self.nodes[node_id].value, self, node_id)

    def replay_matches(self) -> bool:
        """Recompute every non-leaf node from its inputs and compare bit-exactly."""
        for node in self.nodes:
            if node.op in (LEAF, CONST):
                continue
            values = [self.nodes[i].value for i in node.inputs]
            recomputed = _FORWARD[node.op](values, node.extra)
            if not np.array_equal(recomputed, node.value):
                return False
        return True


class Tensor:
    """Immutable view over a float64 array, optionally attached to a graph."""

    __slots__ = ("data", "graph", "node_id")

    def __init__(self, data):
        arr = np.ascontiguousarray(data, dtype=np.float64)
        if not np.all(np.isfinite(arr)):
            raise ValueError("tensor data must be finite (no NaN/Inf)")
        self.data = arr
        self.graph = None
        self.node_id = None

    @classmethod
    def _wrap(cls, arr, graph=None, node_id=None):
        t = object.__new__(cls)
        t.data = arr
        t.graph = graph
        t.node_id = node_id
        return t

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def attached(self):
        return self.graph is not None

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor._wrap(self.data)

    def __repr__(self):
        tag = f", node={self.node_id}" if self.attached else ""
        return f"Tensor(shape={self.shape}{tag})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_as_tensor(other), self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _is_scalar(x) -> bool:
    return isinstance(x, (int, float, np.integer, np.floating))


def _graph_of(operands) -> DiffGraph | None:
    g = None
    for t in operands:
        if t.graph is not None:
            if g is None:
                g = t.graph
            elif g is not t.graph:
                raise ValueError("operands belong to different graphs")
    return g


def _emit(op, value, operands, extra=None) -> Tensor:
    g = _graph_of(operands)
    if g is None or not g.recording:
        return Tensor._wrap(value)
    ids = tuple(
        t.node_id if t.graph is g else g._const_id(t.data) for t in operands
    )
    nid = g._record(op, ids, value, extra)
    return Tensor._wrap(value, g, nid)


def _check_same_shape(a, b):
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")


# ---------------------------------------------------------------------------
# numeric kernels, shared by the op builders and by tape replay
# ---------------------------------------------------------------------------

_FORWARD = {
    ADD: lambda v, e: v[0] + v[1],
    SUB: lambda v, e: v[0] - v[1],
    MUL: lambda v, e: v[0] * v[1],
    DIV: lambda v, e: v[0] / v[1],
    NEG: lambda v, e: -v[0],
    SCALE: lambda v, e: v[0] * e,
    SADD: lambda v, e: v[0] + e,
    SQUARE: lambda v, e: v[0] * v[0],
    EXP: lambda v, e: np.exp(v[0]),
    LOG: lambda v, e: np.log(v[0]),
    SQRT: lambda v, e: np.sqrt(v[0]),
    MATMUL: lambda v, e: v[0] @ v[1],
    PERMUTE: lambda v, e: np.ascontiguousarray(np.transpose(v[0], e)),
    RESHAPE: lambda v, e: v[0].reshape(e),
    TAKE: lambda v, e: v[0].reshape(-1)[e],
    PUT_ADD: lambda v, e: _put_add_value(v[0], e, v[1]),
    PAD2D: lambda v, e: np.pad(v[0], [(0, 0)] * (v[0].ndim - 2) + [(e, e), (e, e)]),
    CROP2D: lambda v, e: np.ascontiguousarray(
        v[0][..., e:v[0].shape[-2] - e, e:v[0].shape[-1] - e]
    ),
    SUM: lambda v, e: np.asarray(np.sum(v[0])),
    ROWSUM: lambda v, e: np.sum(v[0], axis=0),
    TILE_ROWS: lambda v, e: np.ascontiguousarray(np.broadcast_to(v[0], (e,) + v[0].shape)),
    EXPAND: lambda v, e: np.full(e, float(v[0])),
    SIGMOID: lambda v, e: _stable_sigmoid(v[0]),
    TANH: lambda v, e: np.tanh(v[0]),
    RELU: lambda v, e: np.maximum(v[0], 0.0),
    LEAKYRELU: lambda v, e: np.where(v[0] > 0, v[0], e * v[0]),
}


def _put_add_value(base, idx, updates):
    out = base + np.bincount(idx.reshape(-1), weights=updates.reshape(-1), minlength=base.size).reshape(base.shape)
    return out


def _stable_sigmoid(x):
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


# ---------------------------------------------------------------------------
# op builders
# ---------------------------------------------------------------------------

def add(a, b) -> Tensor:
    if _is_scalar(b):
        return sadd(a, float(b))
    a, b = _as_tensor(a), _as_tensor(b)
    _check_same_shape(a, b)
    return _emit(ADD, a.data + b.data, (a, b))


def sub(a, b) -> Tensor:
    if _is_scalar(b):
        return sadd(a, -float(b))
    a, b = _as_tensor(a), _as_tensor(b)
    _check_same_shape(a, b)
    return _emit(SUB, a.data - b.data, (a, b))


def mul(a, b) -> Tensor:
    if _is_scalar(b):
        return scale(a, float(b))
    a, b = _as_tensor(a), _as_tensor(b)
    _check_same_shape(a, b)
    return _emit(MUL, a.data * b.data, (a, b))


def div(a, b) -> Tensor:
    if _is_scalar(b):
        return scale(a, 1.0 / float(b))
    a, b = _as_tensor(a), _as_tensor(b)
    if a.shape != b.shape and b.size != 1:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    return _emit(DIV, a.data / b.data, (a, b))


def neg(a) -> Tensor:
    a = _as_tensor(a)
    return _emit(NEG, -a.data, (a,))


def scale(a, c: float) -> Tensor:
    a = _as_tensor(a)
    c = float(c)
    return _emit(SCALE, a.data * c, (a,), c)


def sadd(a, c: float) -> Tensor:
    a = _as_tensor(a)
    c = float(c)
    return _emit(SADD, a.data + c, (a,), c)


def square(a) -> Tensor:
    a = _as_tensor(a)
    return _emit(SQUARE, a.data * a.data, (a,))


def exp(a) -> Tensor:
    a = _as_tensor(a)
    return _emit(EXP, np.exp(a.data), (a,))


def log(a) -> Tensor:
    a = _as_tensor(a)
    return _emit(LOG, np.log(a.data), (a,))


def sqrt(a) -> Tensor:
    a = _as_tensor(a)
    return _emit(SQRT, np.sqrt(a.data), (a,))


_ELEMENTWISE = {"add": add, "sub": sub, "mul": mul, "neg": neg, "square": square}


def elementwise(op: str, a, b=None) -> Tensor:
    """Componentwise arithmetic: add/sub/mul (tensor or scalar b), scale
    (scalar b), neg and square (unary)."""
    if op == "scale":
        if not _is_scalar(b):
            raise ValueError("scale expects a scalar operand")
        return scale(a, b)
    if op in ("neg", "square"):
        return _ELEMENTWISE[op](a)
    if op in ("add", "sub", "mul"):
        if b is None:
            raise ValueError(f"{op} needs a second operand")
        return _ELEMENTWISE[op](a, b)
    raise ValueError(f"unknown elementwise op {op!r}")


def matmul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    return _emit(MATMUL, a.data @ b.data, (a, b))


def permute(a, axes) -> Tensor:
    a = _as_tensor(a)
    axes = tuple(axes)
    return _emit(PERMUTE, np.ascontiguousarray(np.transpose(a.data, axes)), (a,), axes)


def transpose(a) -> Tensor:
    return permute(a, (1, 0))


def reshape(a, shape) -> Tensor:
    a = _as_tensor(a)
    shape = tuple(int(s) for s in shape)
    return _emit(RESHAPE, a.data.reshape(shape), (a,), shape)


def take(a, idx: np.ndarray) -> Tensor:
    """Gather from the flattened ``a``; result has the shape of ``idx``."""
    a = _as_tensor(a)
    return _emit(TAKE, a.data.reshape(-1)[idx], (a,), idx)


def put_add(a, idx: np.ndarray, b) -> Tensor:
    """``a`` plus ``b`` scatter-added at flat positions ``idx``."""
    a, b = _as_tensor(a), _as_tensor(b)
    if b.shape != idx.shape:
        raise ValueError("updates must match index shape")
    return _emit(PUT_ADD, _put_add_value(a.data, idx, b.data), (a, b), idx)


def pad2d(a, padding: int) -> Tensor:
    a = _as_tensor(a)
    p = int(padding)
    value = np.pad(a.data, [(0, 0)] * (a.ndim - 2) + [(p, p), (p, p)])
    return _emit(PAD2D, value, (a,), p)


def crop2d(a, padding: int) -> Tensor:
    a = _as_tensor(a)
    p = int(padding)
    value = np.ascontiguousarray(a.data[..., p:a.shape[-2] - p, p:a.shape[-1] - p])
    return _emit(CROP2D, value, (a,), p)


def tsum(a) -> Tensor:
    a = _as_tensor(a)
    return _emit(SUM, np.asarray(np.sum(a.data)), (a,))


def rowsum(a) -> Tensor:
    a = _as_tensor(a)
    return _emit(ROWSUM, np.sum(a.data, axis=0), (a,))


def tile_rows(a, rows: int) -> Tensor:
    a = _as_tensor(a)
    rows = int(rows)
    value = np.ascontiguousarray(np.broadcast_to(a.data, (rows,) + a.shape))
    return _emit(TILE_ROWS, value, (a,), rows)


def expand(a, shape) -> Tensor:
    a = _as_tensor(a)
    if a.size != 1:
        raise ValueError("expand needs a scalar tensor")
    shape = tuple(int(s) for s in shape)
    return _emit(EXPAND, np.full(shape, float(a.data)), (a,), shape)


def sigmoid(a) -> Tensor:
    a = _as_tensor(a)
    return _emit(SIGMOID, _stable_sigmoid(a.data), (a,))


def tanh(a) -> Tensor:
    a = _as_tensor(a)
    return _emit(TANH, np.tanh(a.data), (a,))


def relu(a) -> Tensor:
    a = _as_tensor(a)
    return _emit(RELU, np.maximum(a.data, 0.0), (a,))


def leakyrelu(a, slope: float = 0.01) -> Tensor:
    a = _as_tensor(a)
    slope = float(slope)
    return _emit(LEAKYRELU, np.where(a.data > 0, a.data, slope * a.data), (a,), slope)


def activation(kind: str, x, slope: float = 0.01) -> Tensor:
    """Apply an activation by name: sigmoid, tanh, relu, leakyrelu, identity."""
    if kind == "sigmoid":
        return sigmoid(x)
    if kind == "tanh":
        return tanh(x)
    if kind == "relu":
        return relu(x)
    if kind == "leakyrelu":
        return leakyrelu(x, slope)
    if kind == "identity":
        return _as_tensor(x)
    raise ValueError(f"unknown activation {kind!r}")


# ---------------------------------------------------------------------------
# convolution (cross-correlation) built from gather + matmul
# ---------------------------------------------------------------------------

_PATCH_CACHE: dict[tuple, tuple] = {}


def _patch_indices(batch, cin, hp, wp, kh, kw, stride):
    """Flat gather indices turning a padded image stack into im2col rows."""
    key = (batch, cin, hp, wp, kh, kw, stride)
    cached = _PATCH_CACHE.get(key)
    if cached is not None:
        return cached
    oh = (hp - kh) // stride + 1
    ow = (wp - kw) // stride + 1
    if oh <= 0 or ow <= 0:
        raise ValueError("kernel larger than padded input")
    # offsets of one receptive field within a single image
    c_off = (np.arange(cin) * hp * wp)[:, None, None]
    i_off = (np.arange(kh) * wp)[None, :, None]
    j_off = np.arange(kw)[None, None, :]
    field = (c_off + i_off + j_off).reshape(-1)
    # top-left corner of every output position in every image
    b_off = (np.arange(batch) * cin * hp * wp)[:, None, None]
    y_off = (np.arange(oh) * stride * wp)[None, :, None]
    x_off = (np.arange(ow) * stride)[None, None, :]
    corners = (b_off + y_off + x_off).reshape(-1)
    idx = (corners[:, None] + field[None, :]).astype(np.intp)
    result = (idx, oh, ow)
    _PATCH_CACHE[key] = result
    return result


def conv2d(x, kernels, stride: int = 1, padding: int = 0, bias=None) -> Tensor:
    """2-D cross-correlation of ``x`` ([C,H,W] or [B,C,H,W]) with
    ``kernels`` [C_out, C_in, kh, kw]."""
    x = _as_tensor(x)
    kernels = _as_tensor(kernels)
    if kernels.ndim != 4:
        raise ValueError("kernels must be 4-D [C_out, C_in, kh, kw]")
    squeeze = x.ndim == 3
    if squeeze:
        x = reshape(x, (1,) + x.shape)
    if x.ndim != 4:
        raise ValueError("input must be [C,H,W] or [B,C,H,W]")
    b, cin, h, w = x.shape
    cout, kcin, kh, kw = kernels.shape
    if kcin != cin:
        raise ValueError(f"channel mismatch: input {cin}, kernels {kcin}")
    stride = int(stride)
    padding = int(padding)
    if stride < 1 or padding < 0:
        raise ValueError("stride must be >= 1 and padding >= 0")
    if kh > h + 2 * padding or kw > w + 2 * padding:
        raise ValueError("kernel larger than padded input")
    xp = pad2d(x, padding) if padding else x
    idx, oh, ow = _patch_indices(b, cin, h + 2 * padding, w + 2 * padding, kh, kw, stride)
    patches = take(xp, idx)                               # [B*oh*ow, cin*kh*kw]
    wmat = transpose(reshape(kernels, (cout, cin * kh * kw)))
    out = matmul(patches, wmat)                           # [B*oh*ow, cout]
    if bias is not None:
        out = add(out, tile_rows(_as_tensor(bias), b * oh * ow))
    out = permute(reshape(out, (b, oh, ow, cout)), (0, 3, 1, 2))
    if squeeze:
        out = reshape(out, (cout, oh, ow))
    return out


# ---------------------------------------------------------------------------
# softmax cross-entropy
# ---------------------------------------------------------------------------

def mean_softmax_cross_entropy(logits, labels) -> Tensor:
    """Mean of -log softmax(logits)[label] over the batch; logits [B,C]."""
    logits = _as_tensor(logits)
    if logits.ndim != 2:
        raise ValueError("logits must be [B, C]")
    b, c = logits.shape
    labels = np.asarray(labels, dtype=np.intp).reshape(-1)
    if labels.shape[0] != b:
        raise ValueError("one label per row required")
    if labels.min() < 0 or labels.max() >= c:
        raise ValueError("label out of range")
    # max-shift is constant under differentiation: the true loss is invariant
    # to a per-row shift, so treating it as data leaves gradients exact
    shift = np.max(logits.data, axis=1, keepdims=True)
    z = sub(logits, Tensor(np.broadcast_to(shift, logits.shape).copy()))
    ez = exp(z)
    row_total = rowsum(transpose(ez))          # [B]
    lse = log(row_total)
    picked = take(z, (np.arange(b) * c + labels).astype(np.intp))
    return scale(tsum(sub(lse, picked)), 1.0 / b)


def softmax_cross_entropy(logits, label: int) -> Tensor:
    """-log softmax(logits)[label] for a single logit vector [C]."""
    logits = _as_tensor(logits)
    if logits.ndim != 1:
        raise ValueError("logits must be a vector [C]")
    label = int(label)
    if not 0 <= label < logits.shape[0]:
        raise ValueError("label out of range")
    return mean_softmax_cross_entropy(reshape(logits, (1, logits.shape[0])), [label])


def softmax(logits) -> Tensor:
    """Row softmax of [B,C] logits, graph-attached."""
    logits = _as_tensor(logits)
    if logits.ndim != 2:
        raise ValueError("logits must be [B, C]")
    b, c = logits.shape
    shift = np.max(logits.data, axis=1, keepdims=True)
    ez = exp(sub(logits, Tensor(np.broadcast_to(shift, logits.shape).copy())))
    denom = tile_rows(rowsum(transpose(ez)), c)  # [C,B] rows of totals
    return div(ez, transpose(denom))


# ---------------------------------------------------------------------------
# reverse-mode differentiation
# ---------------------------------------------------------------------------

def _bw_add(g, nid, node, gbar):
    return ((node.inputs[0], gbar), (node.inputs[1], gbar))


def _bw_sub(g, nid, node, gbar):
    return ((node.inputs[0], gbar), (node.inputs[1], neg(gbar)))


def _bw_mul(g, nid, node, gbar):
    a, b = g.tensor(node.inputs[0]), g.tensor(node.inputs[1])
    return ((node.inputs[0], mul(gbar, b)), (node.inputs[1], mul(gbar, a)))


def _bw_div(g, nid, node, gbar):
    a, b = g.tensor(node.inputs[0]), g.tensor(node.inputs[1])
    ga = div(gbar, b)
    gb = neg(div(mul(gbar, a), square(b)))
    return ((node.inputs[0], ga), (node.inputs[1], gb))


def _bw_neg(g, nid, node, gbar):
    return ((node.inputs[0], neg(gbar)),)


def _bw_scale(g, nid, node, gbar):
    return ((node.inputs[0], scale(gbar, node.extra)),)


def _bw_sadd(g, nid, node, gbar):
    return ((node.inputs[0], gbar),)


def _bw_square(g, nid, node, gbar):
    a = g.tensor(node.inputs[0])
    return ((node.inputs[0], mul(gbar, scale(a, 2.0))),)


def _bw_exp(g, nid, node, gbar):
    return ((node.inputs[0], mul(gbar, g.tensor(nid))),)


def _bw_log(g, nid, node, gbar):
    return ((node.inputs[0], div(gbar, g.tensor(node.inputs[0]))),)


def _bw_sqrt(g, nid, node, gbar):
    return ((node.inputs[0], scale(div(gbar, g.tensor(nid)), 0.5)),)


def _bw_matmul(g, nid, node, gbar):
    a, b = g.tensor(node.inputs[0]), g.tensor(node.inputs[1])
    return (
        (node.inputs[0], matmul(gbar, transpose(b))),
        (node.inputs[1], matmul(transpose(a), gbar)),
    )


def _bw_permute(g, nid, node, gbar):
    inverse = tuple(np.argsort(node.extra))
    return ((node.inputs[0], permute(gbar, inverse)),)


def _bw_reshape(g, nid, node, gbar):
    return ((node.inputs[0], reshape(gbar, g.nodes[node.inputs[0]].value.shape)),)


def _bw_take(g, nid, node, gbar):
    src_shape = g.nodes[node.inputs[0]].value.shape
    zeros = Tensor._wrap(np.zeros(src_shape))
    return ((node.inputs[0], put_add(zeros, node.extra, gbar)),)


def _bw_put_add(g, nid, node, gbar):
    return (
        (node.inputs[0], gbar),
        (node.inputs[1], take(gbar, node.extra)),
    )


def _bw_pad2d(g, nid, node, gbar):
    return ((node.inputs[0], crop2d(gbar, node.extra)),)


def _bw_crop2d(g, nid, node, gbar):
    return ((node.inputs[0], pad2d(gbar, node.extra)),)


def _bw_sum(g, nid, node, gbar):
    return ((node.inputs[0], expand(gbar, g.nodes[node.inputs[0]].value.shape)),)


def _bw_rowsum(g, nid, node, gbar):
    rows = g.nodes[node.inputs[0]].value.shape[0]
    return ((node.inputs[0], tile_rows(gbar, rows)),)


def _bw_tile_rows(g, nid, node, gbar):
    return ((node.inputs[0], rowsum(gbar)),)


def _bw_expand(g, nid, node, gbar):
    return ((node.inputs[0], tsum(gbar)),)


def _bw_sigmoid(g, nid, node, gbar):
    y = g.tensor(nid)
    return ((node.inputs[0], mul(gbar, mul(y, sadd(neg(y), 1.0)))),)


def _bw_tanh(g, nid, node, gbar):
    y = g.tensor(nid)
    return ((node.inputs[0], mul(gbar, sadd(neg(square(y)), 1.0))),)


def _bw_relu(g, nid, node, gbar):
    mask = (g.nodes[node.inputs[0]].value > 0).astype(np.float64)
    return ((node.inputs[0], mul(gbar, Tensor._wrap(mask))),)


def _bw_leakyrelu(g, nid, node, gbar):
    x = g.nodes[node.inputs[0]].value
    factor = np.where(x > 0, 1.0, node.extra)
    return ((node.inputs[0], mul(gbar, Tensor._wrap(factor))),)


_BACKWARD = {
    ADD: _bw_add,
    SUB: _bw_sub,
    MUL: _bw_mul,
    DIV: _bw_div,
    NEG: _bw_neg,
    SCALE: _bw_scale,
    SADD: _bw_sadd,
    SQUARE: _bw_square,
    EXP: _bw_exp,
    LOG: _bw_log,
    SQRT: _bw_sqrt,
    MATMUL: _bw_matmul,
    PERMUTE: _bw_permute,
    RESHAPE: _bw_reshape,
    TAKE: _bw_take,
    PUT_ADD: _bw_put_add,
    PAD2D: _bw_pad2d,
    CROP2D: _bw_crop2d,
    SUM: _bw_sum,
    ROWSUM: _bw_rowsum,
    TILE_ROWS: _bw_tile_rows,
    EXPAND: _bw_expand,
    SIGMOID: _bw_sigmoid,
    TANH: _bw_tanh,
    RELU: _bw_relu,
    LEAKYRELU: _bw_leakyrelu,
}


def grad(output: Tensor, wrt, retain_graph: bool = False) -> list[Tensor]:
    """Gradients of a scalar ``output`` with respect to each tensor in ``wrt``.

    With ``retain_graph`` the returned gradients are recorded on the same
    graph, so a scalar built from them can be differentiated again.
    """
    if not isinstance(output, Tensor) or not output.attached:
        raise ValueError("output must be a graph-attached tensor")
    if output.size != 1:
        raise ValueError("output must be a scalar")
    g = output.graph
    wrt = list(wrt)
    wrt_ids = []
    for t in wrt:
        if not isinstance(t, Tensor) or t.graph is not g:
            raise ValueError("every wrt tensor must belong to the output's graph")
        wrt_ids.append(t.node_id)

    # nodes from which some wrt tensor is reachable; only these need cotangents
    limit = output.node_id
    useful = bytearray(limit + 1)
    for wid in wrt_ids:
        if wid <= limit:
            useful[wid] = 1
    start = min(wrt_ids) if wrt_ids else 0
    nodes = g.nodes
    for nid in range(start + 1, limit + 1):
        for iid in nodes[nid].inputs:
            if useful[iid]:
                useful[nid] = 1
                break

    if retain_graph:
        seed = g.tensor(g._const_id(np.ones(output.shape)))
    else:
        seed = Tensor._wrap(np.ones(output.shape))

    cot: dict[int, Tensor] = {output.node_id: seed}
    results: dict[int, Tensor] = {}
    wrt_set = set(wrt_ids)
    was_recording = g.recording
    g.recording = retain_graph and was_recording
    try:
        for nid in range(limit, -1, -1):
            gbar = cot.pop(nid, None)
            if gbar is None:
                continue
            if nid in wrt_set:
                results[nid] = gbar
            node = nodes[nid]
            rule = _BACKWARD.get(node.op)
            if rule is None:
                continue  # leaf or const
            for iid, contrib in rule(g, nid, node, gbar):
                if not useful[iid]:
                    continue
                held = cot.get(iid)
                cot[iid] = contrib if held is None else add(held, contrib)
    finally:
        g.recording = was_recording

    out = []
    for t, wid in zip(wrt, wrt_ids):
        got = results.get(wid)
        if got is None:
            raise ValueError("wrt tensor is not reachable from the output")
        if got.shape != t.shape:
            got = reshape(got, t.shape)
        out.append(got)
    return out
