"""Pipeline model parallelism over simulated trainers.

A model is split into contiguous layer ranges, one per trainer.  Each batch
traverses the shards in order; activations and boundary gradients cross
trainer boundaries as sealed envelopes.  There is no micro-batching, so an
honest pipeline reproduces single-node training bit for bit.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .errors import InsufficientMemory, MissingCache, ShapeMismatch
from .ledger import SessionKey, open_envelope, seal
from .model import (
    Arch, GlobalModel, GradientRecord, Params, backward, copy_params, forward_layer,
    layer_memory, loss_and_grad, sgd_update,
)
from .store import BlobStore, load_batch


@dataclass(frozen=True)
class NodeSpec:
    uuid: str
    memory_bytes: int
    compute_score: float = 1.0
    address: str = ""
    cpus: int = 1

    def __post_init__(self):
        if self.memory_bytes <= 0:
            raise ValueError("memory_bytes must be positive")


@dataclass(frozen=True)
class ShardAssignment:
    ranges: tuple[tuple[str, int, int], ...]

    @property
    def trainers(self) -> list[str]:
        return [t for t, _, _ in self.ranges]

    def owner(self, layer: int) -> str:
        for t, lo, hi in self.ranges:
            if lo <= layer < hi:
                return t
        raise KeyError(layer)

    def range_of(self, trainer: str) -> tuple[int, int]:
        for t, lo, hi in self.ranges:
            if t == trainer:
                return lo, hi
        raise KeyError(trainer)

    def is_valid(self, n_layers: int) -> bool:
        expect = 0
        for _, lo, hi in self.ranges:
            if lo != expect or hi <= lo:
                return False
            expect = hi
        return expect == n_layers

    def to_json(self) -> list:
        return [[t, lo, hi] for t, lo, hi in self.ranges]

    @classmethod
    def from_json(cls, data) -> "ShardAssignment":
        return cls(tuple((str(t), int(lo), int(hi)) for t, lo, hi in data))


def pack_layers(profile: Sequence[int], specs: Sequence[NodeSpec]) -> ShardAssignment:
    """Greedy in-order packing of consecutive layers onto trainers.

    Layers are assigned to the current trainer until the next one would
    exceed its memory, then packing moves on.  Trainers left over once every
    layer is placed receive no shard.
    """
    ranges = []
    layer = 0
    for spec in specs:
        if layer >= len(profile):
            break
        lo, used = layer, 0
        while layer < len(profile) and used + profile[layer] <= spec.memory_bytes:
            used += profile[layer]
            layer += 1
        if layer > lo:
            ranges.append((spec.uuid, lo, layer))
    if layer < len(profile):
        raise InsufficientMemory(f"layer {layer} could not be placed", first_unplaced=layer)
    return ShardAssignment(tuple(ranges))


def shard_model(model: GlobalModel | Arch, specs: Sequence[NodeSpec]) -> ShardAssignment:
    arch = model.arch if isinstance(model, GlobalModel) else model
    return pack_layers(layer_memory(arch).per_layer, specs)


@dataclass
class ModelShard:
    trainer: str
    lo: int
    hi: int
    params: Params
    final: bool  # holds the output layer

    @property
    def boundary_dims(self) -> tuple[int, int]:
        return self.params[0][0].shape[1], self.params[-1][0].shape[0]


def make_shards(model: GlobalModel, assignment: ShardAssignment) -> list[ModelShard]:
    n = model.arch.n_layers
    if not assignment.is_valid(n):
        raise ValueError("assignment does not cover the model exactly once")
    return [
        ModelShard(t, lo, hi, copy_params(model.params[lo:hi]), hi == n)
        for t, lo, hi in assignment.ranges
    ]


def assemble(shards: Sequence[ModelShard]) -> Params:
    params: Params = []
    for s in shards:
        params.extend(copy_params(s.params))
    return params


class Transport:
    """Sealed hand-off of float64 tensors between consecutive trainers."""

    def __init__(self, key: SessionKey):
        self.key = key
        self.messages = 0

    def send(self, array: np.ndarray) -> bytes:
        array = np.ascontiguousarray(array, dtype="<f8")
        head = struct.pack("<II", *array.shape)
        self.messages += 1
        return seal(head + array.tobytes(), self.key).to_bytes()

    def receive(self, wire: bytes) -> np.ndarray:
        raw = open_envelope(wire, self.key)
        rows, cols = struct.unpack_from("<II", raw)
        return np.frombuffer(raw, "<f8", rows * cols, 8).reshape(rows, cols).astype(np.float64)


def _hand_off(transport: Transport | None, array: np.ndarray) -> np.ndarray:
    if transport is None:
        return array
    return transport.receive(transport.send(array))


def pipeline_forward(shards: Sequence[ModelShard], x: np.ndarray, transport: Transport | None = None):
    """Run one batch through every shard; returns logits and per-shard input caches."""
    caches: list[list[np.ndarray]] = []
    h = np.asarray(x, dtype=np.float64)
    for i, shard in enumerate(shards):
        if i > 0:
            h = _hand_off(transport, h)
        inputs = []
        for j, layer in enumerate(shard.params):
            inputs.append(h)
            h = forward_layer(layer, h, final=shard.final and j == len(shard.params) - 1)
        caches.append(inputs)
    return h, caches


def pipeline_backward(shards: Sequence[ModelShard], caches, dlogits: np.ndarray,
                      transport: Transport | None = None, epoch: int = 0) -> list[GradientRecord]:
    """Backward hand-off in reverse shard order; one record per shard, in shard order."""
    if caches is None or len(caches) != len(shards):
        raise MissingCache("forward caches missing for one or more shards")
    records: list[GradientRecord] = [None] * len(shards)  # type: ignore[list-item]
    up = dlogits
    for i in range(len(shards) - 1, -1, -1):
        shard = shards[i]
        if i < len(shards) - 1:
            up = _hand_off(transport, up)
        grads, up = backward(shard.params, caches[i], up, final_is_last=shard.final)
        records[i] = GradientRecord(grads, epoch, shard.trainer, shard.lo)
    return records


GradientHook = Callable[[GradientRecord, int], GradientRecord]


@dataclass
class PipelineState:
    pipeline_id: str
    shards: list[ModelShard]
    store: BlobStore
    data_key: SessionKey
    transport: Transport | None = None
    hooks: dict[str, GradientHook] = field(default_factory=dict)


@dataclass
class EpochResult:
    params: Params
    mean_loss: float
    batches: int
    records: dict[str, GradientRecord]  # trainer -> uploaded epoch gradient


def batch_order(n: int, seed: int) -> np.ndarray:
    return np.random.default_rng(seed).permutation(n)


def probe_gradients(state: PipelineState, cids: Sequence[str], *, epoch: int = 0) -> dict[str, GradientRecord]:
    """Per-trainer gradient of the local loss at the shards' current parameters.

    This is the mean over every assigned batch of the per-batch gradient, all
    evaluated at the same (epoch-start) parameters, so one shard's record
    never depends on another shard's updates.
    """
    sums: dict[str, Params] = {}
    for cid in cids:
        batch = load_batch(state.store, cid, state.data_key)
        logits, caches = pipeline_forward(state.shards, batch.features, state.transport)
        _, dlogits = loss_and_grad(logits, batch.labels)
        for shard, rec in zip(state.shards, pipeline_backward(state.shards, caches, dlogits,
                                                              state.transport, epoch)):
            acc = sums.get(shard.trainer)
            if acc is None:
                sums[shard.trainer] = [(gw.copy(), gb.copy()) for gw, gb in rec.grads]
            else:
                for (aw, ab), (gw, gb) in zip(acc, rec.grads):
                    aw += gw
                    ab += gb
    n = max(len(cids), 1)
    return {
        s.trainer: GradientRecord([(gw / n, gb / n) for gw, gb in sums[s.trainer]], epoch, s.trainer, s.lo)
        for s in state.shards
    }


def run_epoch(state: PipelineState, cids: Sequence[str], lr: float, *, epoch: int = 0,
              order_seed: int = 0) -> EpochResult:
    """Train every assigned batch once in a seeded order, updating shards per batch.

    A trainer's gradient hook (if any) sees each honest per-batch record and
    returns the one that is actually applied.  The record each trainer
    uploads for the epoch is its local gradient at the epoch-start parameters
    (see :func:`probe_gradients`), passed through the same hook with step -1.
    """
    probes = probe_gradients(state, cids, epoch=epoch)
    losses = []
    for step, idx in enumerate(batch_order(len(cids), order_seed)):
        batch = load_batch(state.store, cids[idx], state.data_key)
        logits, caches = pipeline_forward(state.shards, batch.features, state.transport)
        loss, dlogits = loss_and_grad(logits, batch.labels)
        losses.append(loss)
        records = pipeline_backward(state.shards, caches, dlogits, state.transport, epoch)
        for shard, rec in zip(state.shards, records):
            hook = state.hooks.get(shard.trainer)
            if hook is not None:
                rec = hook(rec, step)
            if len(rec.grads) != len(shard.params):
                raise ShapeMismatch("gradient record does not match shard")
            shard.params = sgd_update(shard.params, rec.grads, lr)
    uploads = {}
    for t, rec in probes.items():
        hook = state.hooks.get(t)
        uploads[t] = rec if hook is None else hook(rec, -1)
    mean_loss = float(np.mean(losses)) if losses else float("nan")
    return EpochResult(assemble(state.shards), mean_loss, len(losses), uploads)
