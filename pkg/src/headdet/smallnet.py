"""Dense ReLU networks with exact first-order derivatives.

Layers are indexed the way the curvature code needs them: layer ``0`` is the
network input and layer ``k`` (``1 <= k <= n_relu``) is the output of the
``k``-th ReLU.  Every function here accepts either a single sample (1-D
input) or a batch (2-D input, one row per sample) and returns arrays of the
matching rank.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from headdet.errors import FormatError, ShapeError

MODEL_MAGIC = b"HEADNET1"


@dataclass(frozen=True)
class NetworkSpec:
    """Layer widths ``(m, hidden..., c)`` of a dense ReLU classifier."""

    layer_dims: tuple[int, ...]

    def __post_init__(self):
        dims = tuple(int(d) for d in self.layer_dims)
        if len(dims) < 2:
            raise ValueError(f"need at least input and output dims, got {dims}")
        if min(dims) < 1:
            raise ValueError(f"all layer dims must be >= 1, got {dims}")
        if dims[-1] < 2:
            raise ValueError(f"output dim (number of classes) must be >= 2, got {dims[-1]}")
        object.__setattr__(self, "layer_dims", dims)

    @property
    def n_inputs(self) -> int:
        return self.layer_dims[0]

    @property
    def n_classes(self) -> int:
        return self.layer_dims[-1]

    @property
    def n_relu(self) -> int:
        return len(self.layer_dims) - 2

    def layer_width(self, layer: int) -> int:
        """Width of the vector at ``layer`` (0 = input, k = k-th ReLU output)."""
        check_layer(self, layer)
        return self.layer_dims[layer]


@dataclass(frozen=True)
class NetworkModel:
    """Weights of a dense ReLU network.

    ``weights[i]`` has shape ``(layer_dims[i+1], layer_dims[i])`` and
    ``biases[i]`` has shape ``(layer_dims[i+1],)``.  Arrays are made
    read-only so a model can be shared between threads.
    """

    spec: NetworkSpec
    weights: tuple[np.ndarray, ...]
    biases: tuple[np.ndarray, ...]

    def __post_init__(self):
        dims = self.spec.layer_dims
        n_dense = len(dims) - 1
        if len(self.weights) != n_dense or len(self.biases) != n_dense:
            raise ShapeError(
                f"expected {n_dense} dense layers, got {len(self.weights)} weights and {len(self.biases)} biases"
            )
        ws, bs = [], []
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            w = np.array(w, dtype=np.float64)
            b = np.array(b, dtype=np.float64)
            if w.shape != (dims[i + 1], dims[i]) or b.shape != (dims[i + 1],):
                raise ShapeError(
                    f"layer {i}: expected W {(dims[i + 1], dims[i])} and b {(dims[i + 1],)}, "
                    f"got {w.shape} and {b.shape}"
                )
            w.setflags(write=False)
            b.setflags(write=False)
            ws.append(w)
            bs.append(b)
        object.__setattr__(self, "weights", tuple(ws))
        object.__setattr__(self, "biases", tuple(bs))


@dataclass(frozen=True)
class ActivationTrace:
    """Everything a forward pass computed, kept for the backward passes.

    ``relu_active_masks[k-1]`` marks the strictly positive pre-activations of
    the ``k``-th ReLU.
    """

    input: np.ndarray
    relu_outputs: tuple[np.ndarray, ...]
    logits: np.ndarray
    relu_active_masks: tuple[np.ndarray, ...]

    def layer_output(self, layer: int) -> np.ndarray:
        if layer == 0:
            return self.input
        return self.relu_outputs[layer - 1]


def init_model(spec: NetworkSpec, seed: int = 0) -> NetworkModel:
    """He-normal weights and zero biases."""
    rng = np.random.default_rng(seed)
    dims = spec.layer_dims
    weights = tuple(
        rng.normal(0.0, np.sqrt(2.0 / dims[i]), size=(dims[i + 1], dims[i])) for i in range(len(dims) - 1)
    )
    biases = tuple(np.zeros(dims[i + 1]) for i in range(len(dims) - 1))
    return NetworkModel(spec, weights, biases)


def check_layer(spec: NetworkSpec, layer: int) -> None:
    if not 0 <= layer <= spec.n_relu:
        raise IndexError(f"layer index {layer} out of range 0..{spec.n_relu}")


def _as_rows(x, width: int, what: str = "input") -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim not in (1, 2) or x.shape[-1] != width:
        raise ShapeError(f"{what} must have trailing dimension {width}, got shape {x.shape}")
    return x


def _run(model: NetworkModel, h: np.ndarray, start: int):
    outs, masks = [], []
    for i in range(start, model.spec.n_relu):
        pre = h @ model.weights[i].T + model.biases[i]
        mask = pre > 0
        h = np.where(mask, pre, 0.0)
        outs.append(h)
        masks.append(mask)
    logits = h @ model.weights[-1].T + model.biases[-1]
    return outs, masks, logits


def forward(model: NetworkModel, x) -> ActivationTrace:
    """Forward pass recording every ReLU output and its active mask."""
    x = _as_rows(x, model.spec.n_inputs)
    outs, masks, logits = _run(model, x, 0)
    return ActivationTrace(x, tuple(outs), logits, tuple(masks))


def preactivations(model: NetworkModel, x) -> list[np.ndarray]:
    """Pre-activation vectors of every ReLU layer, in depth order."""
    h = _as_rows(x, model.spec.n_inputs)
    pres = []
    for i in range(model.spec.n_relu):
        pre = h @ model.weights[i].T + model.biases[i]
        pres.append(pre)
        h = np.maximum(pre, 0.0)
    return pres


def softmax(logits) -> np.ndarray:
    z = np.asarray(logits, dtype=np.float64)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def _check_labels(label, n_classes: int, batch_shape: tuple) -> np.ndarray:
    lab = np.asarray(label)
    if not np.issubdtype(lab.dtype, np.integer):
        raise TypeError(f"labels must be integers, got dtype {lab.dtype}")
    lab = np.broadcast_to(lab, batch_shape)
    if lab.size and (lab.min() < 0 or lab.max() >= n_classes):
        raise IndexError(f"label out of range 0..{n_classes - 1}")
    return lab


def loss_ce(logits, label):
    """Softmax cross-entropy ``-log softmax(logits)[label]``, log-sum-exp stabilised."""
    z = np.asarray(logits, dtype=np.float64)
    lab = _check_labels(label, z.shape[-1], z.shape[:-1])
    zmax = z.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z - zmax).sum(axis=-1)) + zmax[..., 0]
    picked = np.take_along_axis(z, lab[..., None], axis=-1)[..., 0]
    out = lse - picked
    return float(out) if out.ndim == 0 else out


def _backprop(model: NetworkModel, masks, g: np.ndarray, layer: int) -> np.ndarray:
    """Pull a logit-space cotangent ``g`` back to the output of ``layer``.

    ``masks[k-1]`` must be the active mask of ReLU ``k`` for every
    ``k > layer``; shallower entries are never read.
    """
    n_relu = model.spec.n_relu
    g = g @ model.weights[n_relu]
    for k in range(n_relu, layer, -1):
        g = (g * masks[k - 1]) @ model.weights[k - 1]
    return g


def grad_wrt_layer(model: NetworkModel, trace: ActivationTrace, label, layer: int) -> np.ndarray:
    """Gradient of the cross-entropy loss w.r.t. the output of ``layer``."""
    check_layer(model.spec, layer)
    lab = _check_labels(label, model.spec.n_classes, trace.logits.shape[:-1])
    delta = softmax(trace.logits)
    onehot = np.zeros_like(delta)
    np.put_along_axis(onehot, lab[..., None], 1.0, axis=-1)
    return _backprop(model, trace.relu_active_masks, delta - onehot, layer)


def jacobian_logits(model: NetworkModel, trace: ActivationTrace, layer: int) -> np.ndarray:
    """Jacobian of the logits w.r.t. the output of ``layer``.

    Shape ``(c, n)`` for one sample, ``(B, c, n)`` for a batch.  Row ``r`` is
    the gradient of logit ``r``.
    """
    check_layer(model.spec, layer)
    n_relu = model.spec.n_relu
    batch = trace.logits.shape[:-1]
    J = np.broadcast_to(model.weights[n_relu], batch + model.weights[n_relu].shape)
    for k in range(n_relu, layer, -1):
        J = (J * trace.relu_active_masks[k - 1][..., None, :]) @ model.weights[k - 1]
    return np.array(J)


def loss_grad_from_layer(model: NetworkModel, h, layer: int, label) -> np.ndarray:
    """Loss gradient w.r.t. a (possibly perturbed) layer output ``h``.

    Re-runs the network from ``layer`` onward, so ReLU masks deeper than
    ``layer`` follow ``h``.  Used by finite-difference oracles.
    """
    check_layer(model.spec, layer)
    h = _as_rows(h, model.spec.layer_dims[layer], "layer output")
    outs, masks, logits = _run(model, h, layer)
    full_masks = [None] * layer + masks
    lab = _check_labels(label, model.spec.n_classes, logits.shape[:-1])
    delta = softmax(logits)
    np.put_along_axis(delta, lab[..., None], np.take_along_axis(delta, lab[..., None], axis=-1) - 1.0, axis=-1)
    return _backprop(model, full_masks, delta, layer)


def loss_from_layer(model: NetworkModel, h, layer: int, label):
    check_layer(model.spec, layer)
    h = _as_rows(h, model.spec.layer_dims[layer], "layer output")
    _, _, logits = _run(model, h, layer)
    return loss_ce(logits, label)


def predict(model: NetworkModel, x) -> np.ndarray:
    return forward(model, x).logits.argmax(axis=-1)


def accuracy(model: NetworkModel, x, labels) -> float:
    return float(np.mean(predict(model, x) == np.asarray(labels)))


def _param_grads(model: NetworkModel, x: np.ndarray, labels: np.ndarray):
    trace = forward(model, x)
    n = x.shape[0]
    delta = softmax(trace.logits)
    delta[np.arange(n), labels] -= 1.0
    delta /= n
    loss = float(np.mean(loss_ce(trace.logits, labels)))
    n_relu = model.spec.n_relu
    gw = [None] * (n_relu + 1)
    gb = [None] * (n_relu + 1)
    for i in range(n_relu, -1, -1):
        h_in = trace.layer_output(i)
        gw[i] = delta.T @ h_in
        gb[i] = delta.sum(axis=0)
        if i > 0:
            delta = (delta @ model.weights[i]) * trace.relu_active_masks[i - 1]
    return loss, gw, gb


def train_sgd(
    model: NetworkModel,
    x,
    labels,
    epochs: int = 20,
    batch_size: int = 64,
    learning_rate: float = 0.05,
    seed: int = 0,
    momentum: float = 0.9,
    weight_decay: float = 0.0,
    history: list[float] | None = None,
) -> NetworkModel:
    """Minibatch SGD with momentum on the mean cross-entropy.

    The input model is left untouched.  If ``history`` is given, the mean
    training loss of every epoch is appended to it.
    """
    x = _as_rows(x, model.spec.n_inputs)
    labels = np.asarray(labels)
    if x.ndim != 2 or x.shape[0] == 0:
        raise ValueError("training set is empty")
    labels = _check_labels(labels, model.spec.n_classes, (x.shape[0],))
    if learning_rate < 0:
        raise ValueError(f"learning_rate must be >= 0, got {learning_rate}")
    rng = np.random.default_rng(seed)
    ws = [w.copy() for w in model.weights]
    bs = [b.copy() for b in model.biases]
    vw = [np.zeros_like(w) for w in ws]
    vb = [np.zeros_like(b) for b in bs]
    n = x.shape[0]
    for _ in range(epochs):
        order = rng.permutation(n)
        total = 0.0
        for start in range(0, n, batch_size):
            idx = order[start:start + batch_size]
            current = NetworkModel(model.spec, tuple(ws), tuple(bs))
            loss, gw, gb = _param_grads(current, x[idx], labels[idx])
            total += loss * len(idx)
            for i in range(len(ws)):
                vw[i] = momentum * vw[i] - learning_rate * (gw[i] + weight_decay * ws[i])
                vb[i] = momentum * vb[i] - learning_rate * gb[i]
                ws[i] = ws[i] + vw[i]
                bs[i] = bs[i] + vb[i]
        if history is not None:
            history.append(total / n)
    return NetworkModel(model.spec, tuple(ws), tuple(bs))


def save_model(model: NetworkModel, path) -> None:
    dims = model.spec.layer_dims
    parts = [MODEL_MAGIC, struct.pack("<I", len(dims) - 1)]
    for i in range(len(dims) - 1):
        parts.append(struct.pack("<II", dims[i], dims[i + 1]))
    for w, b in zip(model.weights, model.biases):
        parts.append(np.ascontiguousarray(w, dtype="<f8").tobytes())
        parts.append(np.ascontiguousarray(b, dtype="<f8").tobytes())
    Path(path).write_bytes(b"".join(parts))


def load_model(path) -> NetworkModel:
    raw = Path(path).read_bytes()
    if len(raw) < 12:
        raise FormatError(f"{path}: file too short for a model header ({len(raw)} bytes)")
    magic = raw[:8]
    if magic != MODEL_MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}, expected {MODEL_MAGIC!r}")
    (n_layers,) = struct.unpack_from("<I", raw, 8)
    offset = 12
    if n_layers < 1 or len(raw) < offset + 8 * n_layers:
        raise FormatError(f"{path}: truncated layer table (layer count {n_layers})")
    shapes = [struct.unpack_from("<II", raw, offset + 8 * i) for i in range(n_layers)]
    offset += 8 * n_layers
    for i in range(1, n_layers):
        if shapes[i][0] != shapes[i - 1][1]:
            raise FormatError(f"{path}: layer {i} input dim {shapes[i][0]} != previous output dim {shapes[i - 1][1]}")
    expected = offset + 8 * sum(o * i + o for i, o in shapes)
    if len(raw) != expected:
        raise FormatError(f"{path}: expected {expected} bytes for layer table {shapes}, got {len(raw)}")
    ws, bs = [], []
    for n_in, n_out in shapes:
        w = np.frombuffer(raw, dtype="<f8", count=n_in * n_out, offset=offset).reshape(n_out, n_in)
        offset += 8 * n_in * n_out
        b = np.frombuffer(raw, dtype="<f8", count=n_out, offset=offset)
        offset += 8 * n_out
        ws.append(w.astype(np.float64))
        bs.append(b.astype(np.float64))
    try:
        spec = NetworkSpec(tuple([shapes[0][0]] + [o for _, o in shapes]))
    except ValueError as exc:
        raise FormatError(f"{path}: {exc}") from exc
    return NetworkModel(spec, tuple(ws), tuple(bs))
