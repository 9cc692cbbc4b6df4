"""From-scratch multilayer perceptron: forward, backward, SGD and memory profile.

Parameters are a list of ``(weight, bias)`` pairs with ``weight`` shaped
``(d_out, d_in)``.  Hidden layers use ReLU; the final layer emits logits.
All compute is float64 regardless of ``precision_bytes``, which only feeds
the memory profile.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import MissingCache, ShapeMismatch, TDMLError
from .ledger import digest

Layer = tuple[np.ndarray, np.ndarray]
Params = list[Layer]


@dataclass(frozen=True)
class Arch:
    layer_dims: tuple[int, ...]
    precision_bytes: int = 4

    def __post_init__(self):
        object.__setattr__(self, "layer_dims", tuple(int(d) for d in self.layer_dims))
        if len(self.layer_dims) < 3:
            raise ValueError("need at least two layers (three dims)")
        if any(d < 1 for d in self.layer_dims):
            raise ValueError("all layer dims must be >= 1")
        if self.precision_bytes not in (2, 4):
            raise ValueError("precision_bytes must be 2 or 4")

    @property
    def n_layers(self) -> int:
        return len(self.layer_dims) - 1

    def layer_shape(self, l: int) -> tuple[int, int]:
        return self.layer_dims[l + 1], self.layer_dims[l]


@dataclass
class GradientRecord:
    """Gradients for the contiguous layer range ``[lo, lo + len(grads))``."""

    grads: Params
    epoch: int = 0
    trainer: str = ""
    lo: int = 0

    @property
    def hi(self) -> int:
        return self.lo + len(self.grads)

    def flat_layers(self) -> list[np.ndarray]:
        return [np.concatenate([gw.ravel(), gb.ravel()]) for gw, gb in self.grads]


@dataclass
class GlobalModel:
    arch: Arch
    params: Params
    version: int = 0
    graph: tuple[tuple[int, int], ...] = field(default=())

    def __post_init__(self):
        if not self.graph:
            self.graph = sequential_graph(self.arch.n_layers)


def sequential_graph(n_layers: int) -> tuple[tuple[int, int], ...]:
    return tuple((l, l + 1) for l in range(n_layers - 1))


def init_model(arch: Arch, seed: int) -> GlobalModel:
    rng = np.random.default_rng(seed)
    params = []
    for l in range(arch.n_layers):
        d_out, d_in = arch.layer_shape(l)
        s = 1.0 / np.sqrt(d_in)
        params.append((rng.uniform(-s, s, size=(d_out, d_in)), np.zeros(d_out)))
    return GlobalModel(arch, params, 0)


def copy_params(params: Params) -> Params:
    return [(w.copy(), b.copy()) for w, b in params]


def forward_layer(layer: Layer, h_in: np.ndarray, final: bool = False) -> np.ndarray:
    w, b = layer
    if h_in.ndim != 2 or h_in.shape[1] != w.shape[1]:
        raise ShapeMismatch(f"input {h_in.shape} does not fit weight {w.shape}")
    z = h_in @ w.T + b
    return z if final else np.maximum(z, 0.0)


def backward_layer(layer: Layer, h_in: np.ndarray | None, upstream: np.ndarray, final: bool = False):
    """Return ``((grad_w, grad_b), grad_h_in)`` for one layer.

    The pre-activation is recomputed from the cached input to obtain the ReLU
    mask; the derivative at exactly zero is taken as zero.
    """
    if h_in is None:
        raise MissingCache("no cached input for this layer")
    w, b = layer
    if upstream.shape != (h_in.shape[0], w.shape[0]):
        raise ShapeMismatch(f"upstream {upstream.shape} vs output {(h_in.shape[0], w.shape[0])}")
    if final:
        dz = upstream
    else:
        z = h_in @ w.T + b
        dz = upstream * (z > 0.0)
    grad_w = dz.T @ h_in
    grad_b = dz.sum(axis=0)
    return (grad_w, grad_b), dz @ w


def loss_and_grad(logits: np.ndarray, labels: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean softmax cross-entropy and its gradient with respect to the logits."""
    n = logits.shape[0]
    shifted = logits - logits.max(axis=1, keepdims=True)
    log_z = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    log_p = shifted - log_z
    loss = float(-log_p[np.arange(n), labels].mean())
    grad = np.exp(log_p)
    grad[np.arange(n), labels] -= 1.0
    return loss, grad / n


def forward(params: Params, x: np.ndarray) -> tuple[np.ndarray, list[np.ndarray]]:
    """Full forward pass; returns logits and the input to every layer."""
    inputs = []
    h = x
    last = len(params) - 1
    for l, layer in enumerate(params):
        inputs.append(h)
        h = forward_layer(layer, h, final=(l == last))
    return h, inputs


def backward(params: Params, inputs: list[np.ndarray], dlogits: np.ndarray,
             final_is_last: bool = True) -> tuple[Params, np.ndarray]:
    """Backward over a contiguous layer stack; returns grads and d(loss)/d(input)."""
    grads: Params = [None] * len(params)  # type: ignore[list-item]
    up = dlogits
    for i in range(len(params) - 1, -1, -1):
        final = final_is_last and i == len(params) - 1
        grads[i], up = backward_layer(params[i], inputs[i], up, final=final)
    return grads, up


def sgd_update(params: Params, grads: Params, lr: float) -> Params:
    if lr < 0:
        raise ValueError("learning rate must be non-negative")
    if len(params) != len(grads):
        raise ShapeMismatch("parameter and gradient layer counts differ")
    out = []
    for (w, b), (gw, gb) in zip(params, grads):
        if w.shape != gw.shape or b.shape != gb.shape:
            raise ShapeMismatch(f"gradient shape {gw.shape} vs parameter {w.shape}")
        out.append((w - lr * gw, b - lr * gb))
    return out


def mean_grads(records: list[Params]) -> Params:
    """Coordinate-wise mean, summed in the given order then divided once."""
    if not records:
        raise ValueError("no gradients to aggregate")
    n = len(records)
    out = []
    for l in range(len(records[0])):
        gw = records[0][l][0].copy()
        gb = records[0][l][1].copy()
        for r in records[1:]:
            gw += r[l][0]
            gb += r[l][1]
        out.append((gw / n, gb / n))
    return out


def train_step(params: Params, x: np.ndarray, y: np.ndarray, lr: float) -> tuple[Params, float]:
    """Single-node reference SGD step over all layers."""
    logits, inputs = forward(params, x)
    loss, dlogits = loss_and_grad(logits, y)
    grads, _ = backward(params, inputs, dlogits)
    return sgd_update(params, grads, lr), loss


@dataclass(frozen=True)
class LayerMemoryProfile:
    per_layer: tuple[int, ...]

    @property
    def total(self) -> int:
        return sum(self.per_layer)


def layer_memory(arch: Arch) -> LayerMemoryProfile:
    per = []
    for l in range(arch.n_layers):
        d_out, d_in = arch.layer_shape(l)
        per.append((d_out * d_in + d_out) * arch.precision_bytes)
    return LayerMemoryProfile(tuple(per))


@dataclass(frozen=True)
class Evaluation:
    accuracy: float
    loss: float


def evaluate(params: Params, x: np.ndarray, y: np.ndarray) -> Evaluation:
    if len(y) == 0:
        raise ValueError("empty test set")
    logits, _ = forward(params, np.asarray(x, dtype=np.float64))
    loss, _ = loss_and_grad(logits, y)
    correct = int((logits.argmax(axis=1) == y).sum())
    return Evaluation(correct / len(y), loss)


# --------------------------------------------------------------------------
# Checkpoint format: b"TDMC" | u32 n_dims | u32 dims... | u32 a | u32 version |
# float64 LE (w_0, b_0, w_1, b_1, ...)

_MAGIC = b"TDMC"


def encode_checkpoint(model: GlobalModel) -> bytes:
    dims = model.arch.layer_dims
    head = _MAGIC + struct.pack(f"<I{len(dims)}III", len(dims), *dims,
                                model.arch.precision_bytes, model.version)
    body = b"".join(
        np.ascontiguousarray(t, dtype="<f8").tobytes() for layer in model.params for t in layer
    )
    return head + body


def decode_checkpoint(raw: bytes) -> GlobalModel:
    if raw[:4] != _MAGIC:
        raise TDMLError("not a model checkpoint")
    (n,) = struct.unpack_from("<I", raw, 4)
    fields = struct.unpack_from(f"<{n}III", raw, 8)
    dims, a, version = fields[:n], fields[n], fields[n + 1]
    arch = Arch(tuple(dims), a)
    off = 8 + 4 * (n + 2)
    params = []
    for l in range(arch.n_layers):
        d_out, d_in = arch.layer_shape(l)
        w = np.frombuffer(raw, "<f8", d_out * d_in, off).reshape(d_out, d_in).astype(np.float64)
        off += 8 * d_out * d_in
        b = np.frombuffer(raw, "<f8", d_out, off).astype(np.float64)
        off += 8 * d_out
        params.append((w, b))
    if off != len(raw):
        raise TDMLError("trailing bytes in checkpoint")
    return GlobalModel(arch, params, version)


def model_digest(model: GlobalModel) -> str:
    return digest(encode_checkpoint(model)).hex()


def params_equal(a: Params, b: Params) -> bool:
    return len(a) == len(b) and all(
        np.array_equal(wa, wb) and np.array_equal(ba, bb) for (wa, ba), (wb, bb) in zip(a, b)
    )


def encode_gradients(record: GradientRecord) -> bytes:
    head = struct.pack("<III", record.lo, len(record.grads), record.epoch)
    parts = [head]
    for gw, gb in record.grads:
        parts.append(struct.pack("<II", *gw.shape))
        parts.append(np.ascontiguousarray(gw, dtype="<f8").tobytes())
        parts.append(np.ascontiguousarray(gb, dtype="<f8").tobytes())
    return b"".join(parts)


def decode_gradients(raw: bytes, trainer: str = "") -> GradientRecord:
    lo, n, epoch = struct.unpack_from("<III", raw, 0)
    off = 12
    grads = []
    for _ in range(n):
        d_out, d_in = struct.unpack_from("<II", raw, off)
        off += 8
        gw = np.frombuffer(raw, "<f8", d_out * d_in, off).reshape(d_out, d_in).astype(np.float64)
        off += 8 * d_out * d_in
        gb = np.frombuffer(raw, "<f8", d_out, off).astype(np.float64)
        off += 8 * d_out
        grads.append((gw, gb))
    if off != len(raw):
        raise TDMLError("trailing bytes in gradient record")
    return GradientRecord(grads, epoch, trainer, lo)
