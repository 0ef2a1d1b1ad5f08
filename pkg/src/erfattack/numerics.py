"""Dense float64 tensors, conv-net primitives, and reverse-mode input gradients.

The primitive set is deliberately small: conv2d (stride 1, zero padding),
bias-add, relu, sigmoid, and 2x2 max pooling (stride 2). A ComputeGraph is a
topologically ordered list of these ops with one input and one or more head
outputs, which is all the detector needs. Convolutions accumulate in float64.
"""

import struct

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ConfigurationError, NonFiniteError

CHECKPOINT_MAGIC = b"ERFATTACK-CKPT1\n"


def check_finite(arr, context):
    if not np.isfinite(arr).all():
        raise NonFiniteError(f"non-finite values after {context}")


# ---------------------------------------------------------------------------
# primitive ops
# ---------------------------------------------------------------------------

class Conv2d:
    """Stride-1 zero-padded convolution. weight shape (out_c, in_c, kh, kw)."""

    kind = "conv2d"

    def __init__(self, weight, pad=None):
        self.weight = np.ascontiguousarray(weight, dtype=np.float64)
        if self.weight.ndim != 4:
            raise ConfigurationError("conv2d weight must be 4-d")
        kh, kw = self.weight.shape[2:]
        self.pad = (kh - 1) // 2 if pad is None else int(pad)

    @property
    def out_channels(self):
        return self.weight.shape[0]

    def out_channels_for(self, in_channels):
        if in_channels != self.weight.shape[1]:
            raise ConfigurationError(
                f"conv2d expects {self.weight.shape[1]} input channels, got {in_channels}"
            )
        return self.weight.shape[0]

    def _cols(self, x):
        kh, kw = self.weight.shape[2:]
        p = self.pad
        xp = np.pad(x, ((0, 0), (p, p), (p, p))) if p else x
        win = sliding_window_view(xp, (kh, kw), axis=(1, 2))
        # (c, oh, ow, kh, kw) -> (oh*ow, c*kh*kw)
        c = x.shape[0]
        oh, ow = win.shape[1], win.shape[2]
        return win.transpose(1, 2, 0, 3, 4).reshape(oh * ow, c * kh * kw), (oh, ow)

    def forward(self, x, keep_cols=False):
        out_c, in_c, kh, kw = self.weight.shape
        if x.shape[0] != in_c:
            raise ConfigurationError(
                f"conv2d expects {in_c} input channels, got {x.shape[0]}"
            )
        oh_check = x.shape[1] + 2 * self.pad - kh + 1
        ow_check = x.shape[2] + 2 * self.pad - kw + 1
        if oh_check < 1 or ow_check < 1:
            raise ConfigurationError("conv2d input smaller than kernel")
        cols, (oh, ow) = self._cols(x)
        y = cols @ self.weight.reshape(out_c, -1).T
        y = y.T.reshape(out_c, oh, ow)
        return y, (cols if keep_cols else None)

    def backward_input(self, grad_y, x_shape):
        out_c, in_c, kh, kw = self.weight.shape
        oh, ow = grad_y.shape[1], grad_y.shape[2]
        gcols = grad_y.reshape(out_c, -1).T @ self.weight.reshape(out_c, -1)
        gcols = gcols.reshape(oh, ow, in_c, kh, kw).transpose(2, 3, 4, 0, 1)
        p = self.pad
        gxp = np.zeros((in_c, x_shape[1] + 2 * p, x_shape[2] + 2 * p))
        for i in range(kh):
            for j in range(kw):
                gxp[:, i:i + oh, j:j + ow] += gcols[:, i, j]
        return gxp[:, p:p + x_shape[1], p:p + x_shape[2]] if p else gxp

    def backward_weight(self, grad_y, x, cols):
        out_c = self.weight.shape[0]
        if cols is None:
            cols, _ = self._cols(x)
        return (grad_y.reshape(out_c, -1) @ cols).reshape(self.weight.shape)


class BiasAdd:
    """Adds one bias value per channel."""

    kind = "bias_add"

    def __init__(self, bias):
        self.bias = np.ascontiguousarray(bias, dtype=np.float64)
        if self.bias.ndim != 1:
            raise ConfigurationError("bias must be 1-d")

    def out_channels_for(self, in_channels):
        if in_channels != self.bias.shape[0]:
            raise ConfigurationError(
                f"bias-add expects {self.bias.shape[0]} channels, got {in_channels}"
            )
        return in_channels

    def forward(self, x):
        if x.shape[0] != self.bias.shape[0]:
            raise ConfigurationError(
                f"bias-add expects {self.bias.shape[0]} channels, got {x.shape[0]}"
            )
        return x + self.bias[:, None, None]

    def backward_bias(self, grad_y):
        return grad_y.sum(axis=(1, 2))


class Relu:
    kind = "relu"

    def out_channels_for(self, in_channels):
        return in_channels

    def forward(self, x):
        return np.maximum(x, 0.0)

    def backward(self, grad_y, x):
        return np.where(x > 0.0, grad_y, 0.0)


class Sigmoid:
    kind = "sigmoid"

    def out_channels_for(self, in_channels):
        return in_channels

    def forward(self, x):
        return sigmoid(x)

    def backward(self, grad_y, x):
        s = sigmoid(x)
        return grad_y * s * (1.0 - s)


class MaxPool2:
    """2x2 max pooling with stride 2. Ties go to the first element in row-major window order."""

    kind = "maxpool2"

    def out_channels_for(self, in_channels):
        return in_channels

    def forward(self, x):
        c, h, w = x.shape
        if h % 2 or w % 2:
            raise ConfigurationError(f"maxpool2 needs even spatial dims, got {h}x{w}")
        xr = x.reshape(c, h // 2, 2, w // 2, 2).transpose(0, 1, 3, 2, 4).reshape(c, h // 2, w // 2, 4)
        idx = xr.argmax(axis=-1)
        y = np.take_along_axis(xr, idx[..., None], axis=-1)[..., 0]
        return y, idx

    def backward(self, grad_y, x_shape, idx):
        c, h, w = x_shape
        gr = np.zeros((c, h // 2, w // 2, 4))
        np.put_along_axis(gr, idx[..., None], grad_y[..., None], axis=-1)
        return gr.reshape(c, h // 2, w // 2, 2, 2).transpose(0, 1, 3, 2, 4).reshape(c, h, w)


def sigmoid(x):
    x = np.asarray(x, dtype=np.float64)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


# ---------------------------------------------------------------------------
# graph
# ---------------------------------------------------------------------------

class Node:
    """One op plus the index of the node feeding it (-1 means the graph input)."""

    __slots__ = ("op", "src")

    def __init__(self, op, src):
        self.op = op
        self.src = src


class ComputeGraph:
    """Topologically ordered op list with one input and one output per head.

    Spatial size is free at build time (it must keep pooling dims even);
    channel compatibility is validated when the graph is constructed.
    """

    def __init__(self, in_channels, nodes, outputs):
        self.in_channels = int(in_channels)
        self.nodes = list(nodes)
        self.outputs = list(outputs)
        self._validate()

    def _validate(self):
        channels = {}
        for i, node in enumerate(self.nodes):
            if not -1 <= node.src < i:
                raise ConfigurationError(f"node {i} has bad source {node.src}")
            src_c = self.in_channels if node.src == -1 else channels[node.src]
            channels[i] = node.op.out_channels_for(src_c)
        for o in self.outputs:
            if not 0 <= o < len(self.nodes):
                raise ConfigurationError(f"output id {o} out of range")
        if not self.outputs:
            raise ConfigurationError("graph needs at least one output head")

    def parameters(self):
        """(node_index, array) pairs for every learnable array, in order."""
        out = []
        for i, node in enumerate(self.nodes):
            if node.op.kind == "conv2d":
                out.append((i, node.op.weight))
            elif node.op.kind == "bias_add":
                out.append((i, node.op.bias))
        return out


class ForwardContext:
    """Saved activations from one forward pass, reusable for many backward passes."""

    __slots__ = ("graph", "x", "acts", "caches", "head_shapes")

    def __init__(self, graph, x, acts, caches):
        self.graph = graph
        self.x = x
        self.acts = acts
        self.caches = caches
        self.head_shapes = [acts[o].shape for o in graph.outputs]

    def heads(self):
        return [self.acts[o] for o in self.graph.outputs]


def forward_with_context(graph, x, keep_cols=False):
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 3 or x.shape[0] != graph.in_channels:
        raise ConfigurationError(
            f"input must be ({graph.in_channels}, H, W), got {x.shape}"
        )
    check_finite(x, "graph input")
    acts = [None] * len(graph.nodes)
    caches = [None] * len(graph.nodes)
    for i, node in enumerate(graph.nodes):
        src = x if node.src == -1 else acts[node.src]
        op = node.op
        if op.kind == "conv2d":
            acts[i], caches[i] = op.forward(src, keep_cols=keep_cols)
        elif op.kind == "maxpool2":
            acts[i], caches[i] = op.forward(src)
        else:
            acts[i] = op.forward(src)
        check_finite(acts[i], f"{op.kind} node {i}")
    return ForwardContext(graph, x, acts, caches)


def forward(graph, x):
    """Run the graph and return one logit map per head."""
    return forward_with_context(graph, x).heads()


def backward_from_context(ctx, cotangents, want_param_grads=False):
    """Pull head cotangents back to the input. Returns grad_x or (grad_x, param_grads)."""
    graph = ctx.graph
    if len(cotangents) != len(graph.outputs):
        raise ConfigurationError(
            f"expected {len(graph.outputs)} cotangents, got {len(cotangents)}"
        )
    grads = [None] * len(graph.nodes)
    for o, ct in zip(graph.outputs, cotangents):
        ct = np.asarray(ct, dtype=np.float64)
        if ct.shape != ctx.acts[o].shape:
            raise ConfigurationError(
                f"cotangent shape {ct.shape} does not match head shape {ctx.acts[o].shape}"
            )
        grads[o] = ct if grads[o] is None else grads[o] + ct
    grad_x = None
    param_grads = {} if want_param_grads else None
    for i in range(len(graph.nodes) - 1, -1, -1):
        g = grads[i]
        if g is None:
            continue
        node = graph.nodes[i]
        op = node.op
        src = ctx.x if node.src == -1 else ctx.acts[node.src]
        if op.kind == "conv2d":
            gx = op.backward_input(g, src.shape)
            if want_param_grads:
                param_grads[i] = op.backward_weight(g, src, ctx.caches[i])
        elif op.kind == "bias_add":
            gx = g
            if want_param_grads:
                param_grads[i] = op.backward_bias(g)
        elif op.kind == "relu":
            gx = op.backward(g, src)
        elif op.kind == "sigmoid":
            gx = op.backward(g, src)
        elif op.kind == "maxpool2":
            gx = op.backward(g, src.shape, ctx.caches[i])
        else:
            raise ConfigurationError(f"unknown op kind {op.kind}")
        check_finite(gx, f"{op.kind} backward node {i}")
        if node.src == -1:
            grad_x = gx if grad_x is None else grad_x + gx
        elif grads[node.src] is None:
            grads[node.src] = gx
        else:
            grads[node.src] = grads[node.src] + gx
    if grad_x is None:
        grad_x = np.zeros_like(ctx.x)
    return (grad_x, param_grads) if want_param_grads else grad_x


def backward_to_input(graph, x, cotangents):
    """Gradient of sum_heads <cotangent, logits> with respect to the input."""
    ctx = forward_with_context(graph, x)
    return backward_from_context(ctx, cotangents)


def sgd_step(graph, weight_gradients, learning_rate):
    """In-place w <- w - lr * g for every parameter with a gradient. Returns the graph."""
    lr = float(learning_rate)
    for i, g in weight_gradients.items():
        op = graph.nodes[i].op
        if op.kind == "conv2d":
            if g.shape != op.weight.shape:
                raise ConfigurationError("weight gradient shape mismatch")
            op.weight -= lr * g
        elif op.kind == "bias_add":
            if g.shape != op.bias.shape:
                raise ConfigurationError("bias gradient shape mismatch")
            op.bias -= lr * g
        else:
            raise ConfigurationError(f"node {i} has no parameters")
    return graph


# ---------------------------------------------------------------------------
# checkpoint I/O: magic, per-op shape headers, little-endian float64 payloads
# ---------------------------------------------------------------------------

_OPCODES = {"conv2d": 1, "bias_add": 2, "relu": 3, "sigmoid": 4, "maxpool2": 5}
_OPNAMES = {v: k for k, v in _OPCODES.items()}


def save_graph(graph, path):
    parts = [CHECKPOINT_MAGIC, struct.pack("<II", graph.in_channels, len(graph.nodes))]
    for node in graph.nodes:
        op = node.op
        parts.append(struct.pack("<Bi", _OPCODES[op.kind], node.src))
        if op.kind == "conv2d":
            parts.append(struct.pack("<5I", *op.weight.shape, op.pad))
            parts.append(np.ascontiguousarray(op.weight, dtype="<f8").tobytes())
        elif op.kind == "bias_add":
            parts.append(struct.pack("<I", op.bias.shape[0]))
            parts.append(np.ascontiguousarray(op.bias, dtype="<f8").tobytes())
    parts.append(struct.pack("<I", len(graph.outputs)))
    parts.append(struct.pack(f"<{len(graph.outputs)}I", *graph.outputs))
    with open(path, "wb") as f:
        f.write(b"".join(parts))


class _Reader:
    def __init__(self, data):
        self.data = data
        self.pos = 0

    def take(self, n):
        if self.pos + n > len(self.data):
            raise ConfigurationError("truncated checkpoint file")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def load_graph(path):
    with open(path, "rb") as f:
        data = f.read()
    if not data.startswith(CHECKPOINT_MAGIC):
        raise ConfigurationError(f"{path} is not a checkpoint file (bad magic)")
    r = _Reader(data[len(CHECKPOINT_MAGIC):])
    in_channels, n_nodes = r.unpack("<II")
    nodes = []
    for _ in range(n_nodes):
        code, src = r.unpack("<Bi")
        kind = _OPNAMES.get(code)
        if kind is None:
            raise ConfigurationError(f"unknown opcode {code} in checkpoint")
        if kind == "conv2d":
            oc, ic, kh, kw, pad = r.unpack("<5I")
            w = np.frombuffer(r.take(oc * ic * kh * kw * 8), dtype="<f8")
            nodes.append(Node(Conv2d(w.reshape(oc, ic, kh, kw).copy(), pad=pad), src))
        elif kind == "bias_add":
            (c,) = r.unpack("<I")
            b = np.frombuffer(r.take(c * 8), dtype="<f8")
            nodes.append(Node(BiasAdd(b.copy()), src))
        elif kind == "relu":
            nodes.append(Node(Relu(), src))
        elif kind == "sigmoid":
            nodes.append(Node(Sigmoid(), src))
        else:
            nodes.append(Node(MaxPool2(), src))
    (n_out,) = r.unpack("<I")
    outputs = list(r.unpack(f"<{n_out}I"))
    if r.pos != len(r.data):
        raise ConfigurationError("trailing bytes in checkpoint file")
    return ComputeGraph(in_channels, nodes, outputs)
