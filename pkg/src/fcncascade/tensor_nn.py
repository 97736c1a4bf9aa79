"""Dense tensor kernels for small fully convolutional networks.

Tensors are numpy arrays laid out as (height, width, depth), i.e. row-major
in (y, x, channel).  Internally every kernel works on batches shaped
(n, height, width, depth); the single-tensor entry points add and strip the
batch axis.

Only four layer kinds exist: ``conv``, ``maxpool``, ``relu`` and ``head``
(a convolution whose single output channel is squashed by the logistic
function).  Backward passes are written by hand for each kind.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

CONV = "conv"
MAXPOOL = "maxpool"
RELU = "relu"
HEAD = "head"
KINDS = (CONV, MAXPOOL, RELU, HEAD)
PARAMETRIC = (CONV, HEAD)

# Rows of im2col buffer kept per chunk; bounds memory on large pyramid levels.
_CHUNK_ELEMENTS = 1 << 22


class ShapeError(ValueError):
    """Raised when tensor or layer shapes do not line up."""


class InputTooSmall(ShapeError):
    def __init__(self, layer_index: int, message: str):
        super().__init__(f"layer {layer_index}: {message}")
        self.layer_index = layer_index


class CorruptWeights(ValueError):
    """Raised for unreadable weight files."""


def as_tensor3(data) -> np.ndarray:
    """Validate and return ``data`` as a float64 (h, w, d) array."""
    arr = np.asarray(data, dtype=np.float64)
    if arr.ndim == 2:
        arr = arr[:, :, None]
    if arr.ndim != 3 or min(arr.shape) < 1:
        raise ShapeError(f"expected a non-empty 3-d tensor, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ShapeError("tensor contains non-finite values")
    return arr


@dataclass
class LayerSpec:
    kind: str
    kernel: int = 1
    stride: int = 1
    padding: int = 0
    in_channels: int = 0
    out_channels: int = 0
    weights: np.ndarray | None = None  # (out, in, k, k)
    biases: np.ndarray | None = None  # (out,)

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown layer kind {self.kind!r}")
        if self.stride < 1 or self.padding < 0 or self.kernel < 1:
            raise ValueError("kernel and stride must be >= 1, padding >= 0")
        if self.kind == RELU:
            self.kernel, self.stride, self.padding = 1, 1, 0
        if self.kind == HEAD and self.out_channels != 1:
            raise ValueError("head layer must have exactly one output channel")
        if self.kind in PARAMETRIC:
            shape = (self.out_channels, self.in_channels, self.kernel, self.kernel)
            if self.weights is None:
                self.weights = np.zeros(shape)
            if self.biases is None:
                self.biases = np.zeros(self.out_channels)
            self.weights = np.asarray(self.weights, dtype=np.float64).reshape(shape)
            self.biases = np.asarray(self.biases, dtype=np.float64).reshape(self.out_channels)

    @property
    def n_params(self) -> int:
        if self.kind not in PARAMETRIC:
            return 0
        return self.weights.size + self.biases.size

    def copy(self) -> LayerSpec:
        return LayerSpec(
            self.kind, self.kernel, self.stride, self.padding,
            self.in_channels, self.out_channels,
            None if self.weights is None else self.weights.copy(),
            None if self.biases is None else self.biases.copy(),
        )


def conv(in_ch: int, out_ch: int, k: int, stride: int = 1, padding: int = 0) -> LayerSpec:
    return LayerSpec(CONV, k, stride, padding, in_ch, out_ch)


def maxpool(k: int, stride: int | None = None, padding: int = 0) -> LayerSpec:
    return LayerSpec(MAXPOOL, k, k if stride is None else stride, padding)


def relu() -> LayerSpec:
    return LayerSpec(RELU)


def head(in_ch: int, k: int, stride: int = 1, padding: int = 0) -> LayerSpec:
    return LayerSpec(HEAD, k, stride, padding, in_ch, 1)


@dataclass
class NetworkSpec:
    layers: list[LayerSpec]
    name: str = "net"

    def __post_init__(self):
        self.validate()

    def validate(self):
        if not self.layers or self.layers[-1].kind != HEAD:
            raise ValueError(f"{self.name}: the last layer must be the fully convolutional head")
        channels = None
        for i, layer in enumerate(self.layers):
            if layer.kind == HEAD and i != len(self.layers) - 1:
                raise ValueError(f"{self.name}: head layer must be last")
            if layer.kind in PARAMETRIC:
                if channels is not None and layer.in_channels != channels:
                    raise ShapeError(
                        f"{self.name}: layer {i} expects {layer.in_channels} channels, "
                        f"previous layer produces {channels}")
                channels = layer.out_channels

    @property
    def in_channels(self) -> int:
        return next(l.in_channels for l in self.layers if l.kind in PARAMETRIC)

    @property
    def n_params(self) -> int:
        return sum(l.n_params for l in self.layers)

    def copy(self) -> NetworkSpec:
        return NetworkSpec([l.copy() for l in self.layers], self.name)

    def params(self) -> list[np.ndarray]:
        """Flat list of parameter arrays, weights then biases per layer."""
        out = []
        for layer in self.layers:
            if layer.kind in PARAMETRIC:
                out += [layer.weights, layer.biases]
        return out


@dataclass(frozen=True)
class NetGeometry:
    stride: int
    window: int
    offset: int

    def field(self, row: int, col: int) -> tuple[int, int, int, int]:
        """Unclamped receptive field of heatmap cell (row, col) as (x, y, w, h)."""
        return (self.offset + col * self.stride, self.offset + row * self.stride,
                self.window, self.window)


def init_network(net: NetworkSpec, seed: int = 0) -> NetworkSpec:
    """Zero-mean uniform weights scaled by sqrt(2 / fan_in); zero biases."""
    rng = np.random.default_rng(seed)
    out = net.copy()
    for layer in out.layers:
        if layer.kind in PARAMETRIC:
            fan_in = layer.in_channels * layer.kernel ** 2
            layer.weights = rng.uniform(-1.0, 1.0, layer.weights.shape) * np.sqrt(2.0 / fan_in)
            layer.biases = np.zeros_like(layer.biases)
    return out


# ---------------------------------------------------------------- geometry

def output_size(size: int, k: int, s: int, p: int) -> int:
    return (size + 2 * p - k) // s + 1


def net_geometry(net: NetworkSpec) -> NetGeometry:
    """Compose stride, window and origin offset layer by layer."""
    jump, window, offset = 1, 1, 0
    for layer in net.layers:
        offset -= layer.padding * jump
        window += (layer.kernel - 1) * jump
        jump *= layer.stride
    return NetGeometry(jump, window, offset)


def heatmap_shape(net: NetworkSpec, height: int, width: int) -> tuple[int, int]:
    h, w = height, width
    for i, layer in enumerate(net.layers):
        h = output_size(h, layer.kernel, layer.stride, layer.padding)
        w = output_size(w, layer.kernel, layer.stride, layer.padding)
        if h < 1 or w < 1:
            raise InputTooSmall(i, f"input {height}x{width} is too small for this network")
    return h, w


# ---------------------------------------------------------------- kernels

def _pad(x: np.ndarray, p: int, value: float = 0.0) -> np.ndarray:
    if p == 0:
        return x
    return np.pad(x, ((0, 0), (p, p), (p, p), (0, 0)), constant_values=value)


def _windows(xp: np.ndarray, k: int, s: int, ho: int, wo: int) -> np.ndarray:
    # (n, ho, wo, c, k, k): channel-major, then kernel row-major
    v = np.lib.stride_tricks.sliding_window_view(xp, (k, k), axis=(1, 2))
    return v[:, : (ho - 1) * s + 1 : s, : (wo - 1) * s + 1 : s]


def _conv_batch(x: np.ndarray, layer: LayerSpec) -> np.ndarray:
    n, h, w, c = x.shape
    if c != layer.in_channels:
        raise ShapeError(f"input has {c} channels, layer expects {layer.in_channels}")
    k, s, p = layer.kernel, layer.stride, layer.padding
    ho, wo = output_size(h, k, s, p), output_size(w, k, s, p)
    if ho < 1 or wo < 1:
        raise ShapeError(f"input {h}x{w} smaller than kernel {k} after padding {p}")
    xp = _pad(x, p)
    wmat = layer.weights.reshape(layer.out_channels, -1).T
    out = np.empty((n, ho, wo, layer.out_channels), dtype=x.dtype)
    win = _windows(xp, k, s, ho, wo)
    rows = max(1, _CHUNK_ELEMENTS // max(1, n * wo * c * k * k))
    for r0 in range(0, ho, rows):
        r1 = min(ho, r0 + rows)
        cols = win[:, r0:r1].reshape(-1, c * k * k)
        out[:, r0:r1] = (cols @ wmat.astype(x.dtype)).reshape(n, r1 - r0, wo, -1)
    out += layer.biases.astype(x.dtype)
    return out


def _maxpool_batch(x: np.ndarray, layer: LayerSpec) -> np.ndarray:
    n, h, w, c = x.shape
    k, s, p = layer.kernel, layer.stride, layer.padding
    ho, wo = output_size(h, k, s, p), output_size(w, k, s, p)
    if ho < 1 or wo < 1:
        raise ShapeError(f"pool window {k} exceeds padded input {h}x{w}")
    xp = _pad(x, p, -np.inf)
    out = None
    for dy in range(k):
        for dx in range(k):
            sl = xp[:, dy : dy + (ho - 1) * s + 1 : s, dx : dx + (wo - 1) * s + 1 : s]
            out = sl.copy() if out is None else np.maximum(out, sl, out=out)
    return out


def sigmoid(z):
    return 0.5 * (1.0 + np.tanh(0.5 * np.asarray(z)))


def _layer_batch(x: np.ndarray, layer: LayerSpec) -> np.ndarray:
    if layer.kind in PARAMETRIC:
        return _conv_batch(x, layer)
    if layer.kind == MAXPOOL:
        return _maxpool_batch(x, layer)
    return np.maximum(x, 0.0)


def conv_forward(input: np.ndarray, layer: LayerSpec) -> np.ndarray:
    if layer.kind not in PARAMETRIC:
        raise ValueError(f"conv_forward needs a conv or head layer, got {layer.kind}")
    return _conv_batch(as_tensor3(input)[None], layer)[0]


def maxpool_forward(input: np.ndarray, layer: LayerSpec) -> np.ndarray:
    if layer.kind != MAXPOOL:
        raise ValueError(f"maxpool_forward needs a maxpool layer, got {layer.kind}")
    return _maxpool_batch(as_tensor3(input)[None], layer)[0]


def relu_forward(input: np.ndarray) -> np.ndarray:
    return np.maximum(np.asarray(input, dtype=np.float64), 0.0)


def forward_logits(net: NetworkSpec, x: np.ndarray) -> np.ndarray:
    """Pre-squash head output for a batch (n, h, w, c) -> (n, ho, wo)."""
    if x.ndim == 3:
        x = x[None]
    heatmap_shape(net, x.shape[1], x.shape[2])
    for layer in net.layers:
        x = _layer_batch(x, layer)
    return x[..., 0]


def forward_batch(net: NetworkSpec, x: np.ndarray, dtype=np.float64) -> np.ndarray:
    """Heatmaps in [0, 1] for a batch of images, shape (n, ho, wo)."""
    return sigmoid(forward_logits(net, np.asarray(x, dtype=dtype)))


def net_forward(net: NetworkSpec, input: np.ndarray) -> np.ndarray:
    """Heatmap tensor of depth 1 with values in [0, 1]."""
    x = as_tensor3(input)
    if x.shape[2] != net.in_channels:
        raise ShapeError(f"image has {x.shape[2]} channels, network expects {net.in_channels}")
    return forward_batch(net, x[None])[0][:, :, None]


# ---------------------------------------------------------------- backward

def _conv_backward(x, layer, dout, need_dx: bool = True):
    n, h, w, c = x.shape
    k, s, p = layer.kernel, layer.stride, layer.padding
    _, ho, wo, o = dout.shape
    xp = _pad(x, p)
    cols = _windows(xp, k, s, ho, wo).reshape(-1, c * k * k)
    d2 = dout.reshape(-1, o)
    dw = (d2.T @ cols).reshape(layer.weights.shape)
    db = d2.sum(axis=0)
    if not need_dx:
        return None, dw, db
    # kernel-major columns so each scatter below reads a contiguous slice
    wk = layer.weights.transpose(0, 2, 3, 1).reshape(o, -1)
    dcols = (d2 @ wk).reshape(n, ho, wo, k, k, c)
    dxp = np.zeros_like(xp)
    for dy in range(k):
        for dx in range(k):
            dxp[:, dy : dy + (ho - 1) * s + 1 : s, dx : dx + (wo - 1) * s + 1 : s] += dcols[:, :, :, dy, dx]
    dx_ = dxp[:, p : p + h, p : p + w] if p else dxp
    return dx_, dw, db


def _maxpool_backward(x, layer, dout):
    n, h, w, c = x.shape
    k, s, p = layer.kernel, layer.stride, layer.padding
    _, ho, wo, _ = dout.shape
    xp = _pad(x, p, -np.inf)
    stack = np.stack([
        xp[:, dy : dy + (ho - 1) * s + 1 : s, dx : dx + (wo - 1) * s + 1 : s]
        for dy in range(k) for dx in range(k)
    ])
    arg = stack.argmax(axis=0)  # first maximum wins ties
    dxp = np.zeros_like(xp)
    for idx in range(k * k):
        dy, dx = divmod(idx, k)
        dxp[:, dy : dy + (ho - 1) * s + 1 : s, dx : dx + (wo - 1) * s + 1 : s] += np.where(arg == idx, dout, 0.0)
    return dxp[:, p : p + h, p : p + w] if p else dxp


def cross_entropy(probs_logits: np.ndarray, labels: np.ndarray) -> float:
    """Mean binary cross-entropy computed from logits."""
    z = probs_logits
    # log(1 + exp(-|z|)) + max(z, 0) - z * y
    return float(np.mean(np.logaddexp(0.0, z) - z * labels))


def net_backward(net: NetworkSpec, input: np.ndarray, target_labels: np.ndarray,
                 loss_scale: float = 1.0, return_logits: bool = False):
    """Loss and exact gradients of mean cross-entropy over all heatmap cells.

    ``input`` may be one tensor (h, w, c) or a batch (n, h, w, c); labels must
    match the heatmap shape (ho, wo) or (n, ho, wo).  Returns the (scaled)
    loss and one ``(dweights, dbiases)`` pair per layer, ``None`` for layers
    without parameters.  With ``return_logits`` the forward logits are
    returned as a third element.
    """
    x = np.asarray(input, dtype=np.float64)
    single = x.ndim == 3
    if single:
        x = x[None]
    labels = np.asarray(target_labels, dtype=np.float64)
    if single and labels.ndim == 2:
        labels = labels[None]
    elif labels.ndim == 1 and x.shape[0] == labels.shape[0]:
        labels = labels[:, None, None]
    hs = heatmap_shape(net, x.shape[1], x.shape[2])
    if labels.shape != (x.shape[0],) + hs:
        raise ShapeError(f"labels shape {labels.shape} does not match heatmap {(x.shape[0],) + hs}")

    acts = [x]
    for layer in net.layers:
        acts.append(_layer_batch(acts[-1], layer))
    z = acts[-1][..., 0]
    loss = loss_scale * cross_entropy(z, labels)
    grad = (loss_scale * (sigmoid(z) - labels) / labels.size)[..., None]

    grads: list = [None] * len(net.layers)
    for i in range(len(net.layers) - 1, -1, -1):
        layer, a_in = net.layers[i], acts[i]
        if layer.kind in PARAMETRIC:
            # the input gradient of the first layer is never used
            grad, dw, db = _conv_backward(a_in, layer, grad, need_dx=i > 0)
            grads[i] = (dw, db)
        elif layer.kind == MAXPOOL:
            grad = _maxpool_backward(a_in, layer, grad)
        else:
            grad = grad * (a_in > 0)
    if return_logits:
        return loss, grads, z
    return loss, grads


# ---------------------------------------------------------------- weight files

MAGIC = b"FCNW"
VERSION = 1
_KIND_TAGS = {CONV: 0, MAXPOOL: 1, RELU: 2, HEAD: 3}
_TAG_KINDS = {v: k for k, v in _KIND_TAGS.items()}


def encode_network(net: NetworkSpec) -> bytes:
    name = net.name.encode("utf-8")
    parts = [MAGIC, struct.pack("<III", VERSION, len(net.layers), len(name)), name]
    for layer in net.layers:
        parts.append(struct.pack("<IIIIII", _KIND_TAGS[layer.kind], layer.kernel, layer.stride,
                                 layer.padding, layer.in_channels, layer.out_channels))
        if layer.kind in PARAMETRIC:
            parts.append(layer.weights.astype("<f8").tobytes())
            parts.append(layer.biases.astype("<f8").tobytes())
    return b"".join(parts)


def decode_network(data: bytes) -> NetworkSpec:
    view = memoryview(data)
    pos = 0

    def take(n):
        nonlocal pos
        if pos + n > len(view):
            raise CorruptWeights(f"truncated weight file at byte {pos}")
        chunk = view[pos : pos + n]
        pos += n
        return chunk

    if bytes(take(4)) != MAGIC:
        raise CorruptWeights("bad magic, not an FCNW weight file")
    version, n_layers, name_len = struct.unpack("<III", take(12))
    if version != VERSION:
        raise CorruptWeights(f"unsupported weight file version {version}")
    name = bytes(take(name_len)).decode("utf-8")
    layers = []
    for _ in range(n_layers):
        tag, k, s, p, cin, cout = struct.unpack("<IIIIII", take(24))
        if tag not in _TAG_KINDS:
            raise CorruptWeights(f"unknown layer tag {tag}")
        kind = _TAG_KINDS[tag]
        w = b = None
        if kind in PARAMETRIC:
            w = np.frombuffer(take(8 * cout * cin * k * k), dtype="<f8").astype(np.float64)
            b = np.frombuffer(take(8 * cout), dtype="<f8").astype(np.float64)
        try:
            layers.append(LayerSpec(kind, k, s, p, cin, cout, w, b))
        except ValueError as exc:
            raise CorruptWeights(str(exc)) from exc
    if pos != len(view):
        raise CorruptWeights("trailing bytes after last layer")
    try:
        return NetworkSpec(layers, name)
    except ValueError as exc:
        raise CorruptWeights(str(exc)) from exc


def save_network(net: NetworkSpec, path) -> None:
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(encode_network(net))
    tmp.replace(path)


def load_network(path) -> NetworkSpec:
    return decode_network(Path(path).read_bytes())


def network_to_json(net: NetworkSpec) -> str:
    """Human-readable mirror of the binary weight format."""
    layers = []
    for layer in net.layers:
        d = {"kind": layer.kind, "kernel": layer.kernel, "stride": layer.stride,
             "padding": layer.padding, "in_channels": layer.in_channels,
             "out_channels": layer.out_channels}
        if layer.kind in PARAMETRIC:
            d["weights"] = layer.weights.ravel().tolist()
            d["biases"] = layer.biases.tolist()
        layers.append(d)
    return json.dumps({"format": "FCNW", "version": VERSION, "name": net.name, "layers": layers})


def network_from_json(text: str) -> NetworkSpec:
    doc = json.loads(text)
    layers = [LayerSpec(d["kind"], d["kernel"], d["stride"], d["padding"], d["in_channels"],
                        d["out_channels"], d.get("weights"), d.get("biases"))
              for d in doc["layers"]]
    return NetworkSpec(layers, doc.get("name", "net"))
