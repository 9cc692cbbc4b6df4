"""Deterministic end-to-end simulation of a training job.

A single sequencer advances a logical clock.  Every transaction emitted
during one tick is sealed into one block per chain at the end of that tick.
All randomness is derived from the scenario's master seed, so a scenario
always yields byte-identical chains, blobs and metrics.

Modes:

``tdml``
    N pipelines, cross-validation, suspicion flagging, detection and top-K
    aggregation.
``fedavg``
    N pipelines, plain mean over every local model, no validation.
``single_node``
    One pipeline over the whole dataset; attacks are not applied.
"""

from __future__ import annotations

import base64
import dataclasses
import json
import logging
import random
import uuid as uuidlib
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np
import yaml

from .data import DataConfig, make_blobs
from .errors import ConfigError, DegenerateGeometry, IncompleteEvidence, InsufficientMemory, NotFound
from .ledger import Chain, SessionKey, Transaction, TxKind, digest, open_envelope, query, seal
from .model import (
    Arch, GlobalModel, GradientRecord, decode_gradients, encode_checkpoint,
    encode_gradients, evaluate, init_model, layer_memory, model_digest,
)
from .pipeline import (
    NodeSpec, PipelineState, ShardAssignment, Transport, make_shards, run_epoch, shard_model,
)
from .protocol import (
    Baseline, Event, HiringMessage, NodeState, TaskAnnouncement, TrainingConfig, decode_payload,
    derive_session_key, encode_payload, new_node, publish_task, select_servers, select_trainers,
    schedule_validation, step,
)
from .robust import (
    AttackConfig, DetectionReport, aggregate_topk, attack_gaussian, attack_meanshift, attack_zero,
    detect_malicious, fedavg_aggregate, flag_suspicious, gradient_rms,
)
from .store import BlobStore, OverlayStore, batch_dataset, load_batch, split_batches

log = logging.getLogger(__name__)

MODES = ("tdml", "fedavg", "single_node")


# --------------------------------------------------------------------------
# Scenario


@dataclass(frozen=True)
class ValidatorLie:
    """A validator that misreports one model's accuracy in one epoch."""

    validator: str
    epoch: int
    model: str
    accuracy: float


def _spec(d: dict) -> NodeSpec:
    return NodeSpec(str(d["uuid"]), int(d["memory_bytes"]), float(d.get("compute_score", 1.0)),
                    str(d.get("address", "")), int(d.get("cpus", 1)))


def _spec_json(s: NodeSpec) -> dict:
    return {"uuid": s.uuid, "memory_bytes": s.memory_bytes, "compute_score": s.compute_score,
            "address": s.address, "cpus": s.cpus}


@dataclass
class Scenario:
    name: str = "tdml-toy"
    mode: str = "tdml"
    seed: int = 0
    layer_dims: tuple[int, ...] = (16, 32, 32, 32, 4)
    precision_bytes: int = 4
    data: DataConfig = field(default_factory=DataConfig)
    training: TrainingConfig = field(default_factory=TrainingConfig)
    budget: int = 1_000_000
    server_share: float = 0.3
    server_baseline: Baseline = field(default_factory=Baseline)
    trainer_baseline: Baseline = field(default_factory=Baseline)
    client: str = "client"
    servers: list[NodeSpec] = field(default_factory=list)
    trainers: list[NodeSpec] = field(default_factory=list)
    attacks: list[AttackConfig] = field(default_factory=list)
    lies: list[ValidatorLie] = field(default_factory=list)

    def __post_init__(self):
        self.layer_dims = tuple(int(d) for d in self.layer_dims)

    @property
    def arch(self) -> Arch:
        return Arch(self.layer_dims, self.precision_bytes)

    def validate(self) -> None:
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}")
        try:
            arch = self.arch
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
        if arch.layer_dims[0] != self.data.input_dim or arch.layer_dims[-1] != self.data.num_classes:
            raise ConfigError("layer_dims must start at input_dim and end at num_classes")
        if self.mode == "tdml" and self.training.n_pipelines < 2:
            raise ConfigError("tdml mode needs at least two pipelines for cross-validation")
        if self.budget <= 0:
            raise ConfigError("budget must be positive")
        if not 0.0 <= self.server_share <= 1.0:
            raise ConfigError("server_share must lie in [0, 1]")
        ids = [self.client] + [s.uuid for s in self.servers] + [t.uuid for t in self.trainers]
        if len(set(ids)) != len(ids):
            raise ConfigError("node identifiers must be unique")
        trainers = {t.uuid for t in self.trainers}
        servers = {s.uuid for s in self.servers}
        for a in self.attacks:
            if a.target not in trainers:
                raise ConfigError(f"attack target {a.target} is not a trainer")
        for lie in self.lies:
            if lie.validator not in servers or lie.model not in servers:
                raise ConfigError("lie refers to an unknown server")
        needed = 1 if self.mode == "single_node" else self.training.n_pipelines
        if len(self.servers) < needed:
            raise ConfigError(f"need at least {needed} servers")

    def to_dict(self) -> dict:
        t = self.training
        return {
            "name": self.name, "mode": self.mode, "seed": self.seed,
            "layer_dims": list(self.layer_dims), "precision_bytes": self.precision_bytes,
            "data": dataclasses.asdict(self.data),
            "training": {"epochs": t.epochs, "lr": t.lr, "n_pipelines": t.n_pipelines,
                         "topk": t.topk, "batch_size": t.batch_size, "tau": t.tau,
                         "detect_sample": t.detect_sample},
            "budget": self.budget, "server_share": self.server_share,
            "server_baseline": dataclasses.asdict(self.server_baseline),
            "trainer_baseline": dataclasses.asdict(self.trainer_baseline),
            "client": self.client,
            "servers": [_spec_json(s) for s in self.servers],
            "trainers": [_spec_json(s) for s in self.trainers],
            "attacks": [dataclasses.asdict(a) for a in self.attacks],
            "lies": [dataclasses.asdict(l) for l in self.lies],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Scenario":
        """Build from a mapping; see the README for the file format.

        A ``roster`` block (pipeline and trainer counts) may stand in for
        explicit ``servers``/``trainers`` lists.  Attack targets and lie
        parties may then be written as ``trainer:<i>`` or ``server:<i>``.
        """
        try:
            training = TrainingConfig(**d.get("training", {}))
            data = DataConfig(**d.get("data", {}))
            seed = int(d.get("seed", 0))
            mode = str(d.get("mode", "tdml"))
            layer_dims = tuple(d.get("layer_dims", (16, 32, 32, 32, 4)))
            client = str(d.get("client", "client"))
            servers = [_spec(s) for s in d.get("servers", [])]
            trainers = [_spec(s) for s in d.get("trainers", [])]
            if "roster" in d:
                r = dict(d["roster"])
                gen = cls.generate(seed=seed, mode=mode, n_pipelines=training.n_pipelines,
                                   layer_dims=layer_dims, epochs=training.epochs,
                                   trainers_per_pipeline=int(r.get("trainers_per_pipeline", 2)),
                                   spare_servers=int(r.get("spare_servers", 1)),
                                   spare_trainers=int(r.get("spare_trainers", 0)),
                                   data=data)
                client, servers, trainers = gen.client, gen.servers, gen.trainers

            def ref(name: str) -> str:
                role, _, idx = str(name).partition(":")
                if idx.isdigit() and role in ("trainer", "server"):
                    return (trainers if role == "trainer" else servers)[int(idx)].uuid
                return str(name)

            attacks = [AttackConfig(**{**a, "target": ref(a["target"])}) for a in d.get("attacks", [])]
            lies = [ValidatorLie(ref(l["validator"]), int(l["epoch"]), ref(l["model"]), float(l["accuracy"]))
                    for l in d.get("lies", [])]
            sc = cls(
                name=str(d.get("name", "tdml-toy")), mode=mode, seed=seed, layer_dims=layer_dims,
                precision_bytes=int(d.get("precision_bytes", 4)), data=data, training=training,
                budget=int(d.get("budget", 1_000_000)),
                server_share=float(d.get("server_share", 0.3)),
                server_baseline=Baseline(**d.get("server_baseline", {})),
                trainer_baseline=Baseline(**d.get("trainer_baseline", {})),
                client=client, servers=servers, trainers=trainers, attacks=attacks, lies=lies,
            )
        except (TypeError, ValueError, KeyError, IndexError) as exc:
            raise ConfigError(f"invalid scenario: {exc}") from exc
        sc.validate()
        return sc

    def canonical(self) -> bytes:
        return json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":")).encode()

    def digest(self) -> str:
        return digest(self.canonical()).hex()

    @property
    def job_id(self) -> str:
        return digest(b"job", self.canonical()).hex()[:32]

    def with_changes(self, **changes) -> "Scenario":
        sc = dataclasses.replace(self, **changes)
        sc.validate()
        return sc

    @classmethod
    def generate(cls, *, seed: int = 0, mode: str = "tdml", n_pipelines: int = 2,
                 trainers_per_pipeline: int = 2, spare_servers: int = 1, spare_trainers: int = 0,
                 layer_dims=(16, 32, 32, 32, 4), epochs: int = 10, name: str | None = None,
                 **overrides) -> "Scenario":
        """Build a roster with seeded UUIDs sized so each pipeline needs
        ``trainers_per_pipeline`` trainers."""
        rng = random.Random(seed * 7919 + 17)

        def uid() -> str:
            return str(uuidlib.UUID(int=rng.getrandbits(128), version=4))

        arch = Arch(tuple(layer_dims))
        capacity = capacity_for(arch, trainers_per_pipeline)
        n_servers = (1 if mode == "single_node" else n_pipelines) + spare_servers
        servers = [NodeSpec(uid(), 10 * layer_memory(arch).total, round(rng.uniform(1.0, 10.0), 3),
                            f"sim://ps/{i}", 8) for i in range(n_servers)]
        n_tr = trainers_per_pipeline * (1 if mode == "single_node" else n_pipelines) + spare_trainers
        trainers = [NodeSpec(uid(), capacity, 1.0, f"sim://trainer/{i}", 4) for i in range(n_tr)]
        training = overrides.pop("training", None) or TrainingConfig(
            epochs=epochs, n_pipelines=1 if mode == "single_node" else n_pipelines)
        sc = cls(name=name or f"{mode}-{n_pipelines}dp-seed{seed}", mode=mode, seed=seed,
                 layer_dims=tuple(layer_dims), training=training, client=uid(),
                 servers=servers, trainers=trainers, **overrides)
        sc.validate()
        return sc


def capacity_for(arch: Arch, n_shards: int) -> int:
    """Smallest per-trainer memory for which greedy packing uses at most ``n_shards``."""
    profile = layer_memory(arch)
    lo, hi = max(profile.per_layer), profile.total
    while lo < hi:
        mid = (lo + hi) // 2
        try:
            used = len(shard_model(arch, [NodeSpec(f"t{i}", mid) for i in range(arch.n_layers)]).ranges)
        except InsufficientMemory:
            used = arch.n_layers + 1
        if used <= n_shards:
            hi = mid
        else:
            lo = mid + 1
    return lo


def load_scenario(path: str | Path) -> Scenario:
    try:
        raw = yaml.safe_load(Path(path).read_text(encoding="utf-8"))
    except (OSError, yaml.YAMLError) as exc:
        raise ConfigError(f"cannot read scenario {path}: {exc}") from exc
    if not isinstance(raw, dict):
        raise ConfigError("scenario file must contain a mapping")
    return Scenario.from_dict(raw)


# --------------------------------------------------------------------------
# Engine


def seed_for(master: int, *labels: Any) -> int:
    text = "|".join([str(master)] + [str(x) for x in labels]).encode()
    return int.from_bytes(digest(b"seed", text)[:8], "little") >> 1


def job_key_for(scenario: Scenario) -> SessionKey:
    return SessionKey(digest(b"job-key", scenario.job_id.encode(), str(scenario.seed).encode()))


@dataclass
class Evidence:
    """Recorded inputs a replay re-executes against."""

    private: Chain
    store: BlobStore


@dataclass
class Pipeline:
    index: int
    server: str
    cids: list[str]
    trainers: list[NodeSpec] = field(default_factory=list)
    assignment: ShardAssignment | None = None
    transport_key: SessionKey | None = None

    @property
    def active(self) -> bool:
        return self.assignment is not None


@dataclass
class RunResult:
    scenario: Scenario
    public: Chain
    private: Chain
    store: BlobStore
    metrics: list[dict]
    detections: list[DetectionReport]
    event_log: list[tuple[str, Event]]
    initial_states: dict[str, NodeState]
    states: dict[str, NodeState]
    globals: list[GlobalModel]
    blocked: dict[str, int]
    pipelines: list[Pipeline]

    @property
    def detections_fired(self) -> bool:
        return any(d.attributed for d in self.detections)

    @property
    def exit_code(self) -> int:
        return 3 if self.detections_fired else 0

    def final_accuracy(self) -> float:
        return self.metrics[-1]["global_acc"]


class Simulation:
    def __init__(self, scenario: Scenario, store: BlobStore | None = None, *,
                 evidence: Evidence | None = None):
        scenario.validate()
        self.sc = scenario
        self.cfg = scenario.training
        self.arch = scenario.arch
        self.evidence = evidence
        if evidence is not None:
            self.store: BlobStore = OverlayStore(evidence.store)
        else:
            self.store = store if store is not None else BlobStore()
        job = scenario.job_id
        self.public = Chain.new(f"{job}/public")
        self.private = Chain.new(f"{job}/private")
        self.tick = 0
        self._pending: dict[str, list[Transaction]] = {"public": [], "private": []}
        self.job_key = job_key_for(scenario)
        self.keys: dict[tuple[str, str], SessionKey] = {}
        self.states: dict[str, NodeState] = {scenario.client: new_node(scenario.client, "client")}
        for s in scenario.servers:
            self.states[s.uuid] = new_node(s.uuid, "parameter_server")
        for t in scenario.trainers:
            self.states[t.uuid] = new_node(t.uuid, "trainer")
        self.initial_states = dict(self.states)
        self.event_log: list[tuple[str, Event]] = []
        self.metrics: list[dict] = []
        self.detections: list[DetectionReport] = []
        self.globals: list[GlobalModel] = []
        self.blocked: dict[str, int] = {}
        self._shift: dict[str, float] = {}
        self.pipelines: list[Pipeline] = []
        self._recorded_h: dict[tuple[int, str], float] = {}
        self._test_cid = ""

    # ---- plumbing -------------------------------------------------------

    def seed(self, *labels) -> int:
        return seed_for(self.sc.seed, *labels)

    def _advance(self) -> None:
        for name, chain in (("public", self.public), ("private", self.private)):
            txs = self._pending[name]
            if txs:
                chain.append(txs, self.tick)
                self._pending[name] = []
        self.tick += 1

    def _payload(self, obj, sealed: bool) -> bytes:
        raw = encode_payload(obj)
        return seal(raw, self.job_key).to_bytes() if sealed else raw

    def _do(self, node: str, event: str, txs=(), **data) -> None:
        """Drive ``node`` through ``event`` and publish the transactions it emits.

        ``txs`` is a list of ``(channel, kind, payload_obj, sealed)``; their
        kinds must match the state machine's emissions exactly.
        """
        if txs:
            data.setdefault("count", len(txs))
        ev = Event(event, data)
        new, emits = step(self.states[node], ev)
        expected = Counter((e.channel, e.kind) for e in emits if e.channel != "direct")
        got = Counter((ch, kind.value) for ch, kind, _, _ in txs)
        if expected != got:
            raise RuntimeError(f"{node} {event}: emitted {dict(got)} but state machine expects {dict(expected)}")
        self.states[node] = new
        self.event_log.append((node, ev))
        for channel, kind, obj, sealed in txs:
            tx = Transaction.create(self.tick, node, kind, self._payload(obj, sealed))
            self._pending[channel].append(tx)

    def _exchange(self, a: str, b: str) -> tuple:
        nonce = digest(b"kx", str(self.sc.seed).encode(), a.encode(), b.encode())[:16]
        key = derive_session_key(self.sc.job_id, a, b, nonce)
        self.keys[(a, b)] = key
        return ("public", TxKind.KeyExchange, {"a": a, "b": b, "key_id": key.key_id.hex()}, False)

    def open(self, tx: Transaction):
        return decode_payload(open_envelope(tx.payload, self.job_key))

    # ---- setup ----------------------------------------------------------

    def _prepare_data(self) -> tuple[list[str], str]:
        if self.evidence is not None:
            detail = self._recorded_detail()
            return detail["train_cids"], detail["test_cid"]
        x_tr, y_tr, x_te, y_te = make_blobs(self.sc.data, self.seed("data"))
        train = batch_dataset((x_tr, y_tr), self.cfg.batch_size, self.seed("shuffle"),
                              self.job_key, self.store)
        test = batch_dataset((x_te, y_te), len(y_te), self.seed("test-shuffle"), self.job_key,
                             self.store, test=True)
        return train, test[0]

    def _recorded_detail(self) -> dict:
        txs = query(self.evidence.private, TxKind.TaskAnnounce)
        if not txs:
            raise IncompleteEvidence("private chain has no task detail")
        return self.open(txs[0])

    def _setup(self) -> GlobalModel:
        sc, cfg = self.sc, self.cfg
        self._advance()  # tick 0 is genesis
        n = 1 if sc.mode == "single_node" else cfg.n_pipelines
        task = TaskAnnouncement(self.tick, sc.client, sc.name, sc.budget, sc.server_baseline, n)
        tx = publish_task(task)
        self._do(sc.client, "publish", [("public", TxKind.TaskAnnounce, decode_payload(tx.payload), False)])
        self._advance()

        for s in sc.servers:
            self._do(s.uuid, "register", [("public", TxKind.ServerRegister, _spec_json(s), False)])
        self._advance()

        chosen = select_servers(sc.servers, n, sc.server_baseline)
        train_cids, test_cid = self._prepare_data()
        self._test_cid = test_cid
        model = init_model(self.arch, self.seed("init"))
        init_ckpt = encode_checkpoint(model)
        init_cid = self.store.put(seal(init_ckpt, self.job_key).to_bytes())
        splits = split_batches(train_cids, n)
        self.pipelines = [Pipeline(i, ps, splits[i]) for i, ps in enumerate(chosen)]

        self._do(sc.client, "select", [self._exchange(sc.client, ps) for ps in chosen])
        detail = {
            "job_id": sc.job_id, "task": sc.name, "mode": sc.mode,
            "scenario_digest": sc.digest(), "train_cids": train_cids, "test_cid": test_cid,
            "init_model": {"cid": init_cid, "digest": digest(init_ckpt).hex()},
            "pipelines": [{"server": p.server, "cids": p.cids} for p in self.pipelines],
        }
        self._do(sc.client, "open_job", [("private", TxKind.TaskAnnounce, detail, True)])
        for p in self.pipelines:
            self._do(p.server, "connect", [("private", TxKind.ServerRegister,
                                            {"server": p.server, "pipeline": p.index}, True)], pipeline=p.index)
        self._advance()

        share = max(1, int(sc.budget * (1 - sc.server_share)) // n)
        for p in self.pipelines:
            msg = HiringMessage(self.tick, p.server, sc.trainer_baseline, share)
            self._do(p.server, "hire", [("public", TxKind.HiringAnnounce, decode_payload(msg.to_payload()), False)])
        self._advance()

        for t in sc.trainers:
            self._do(t.uuid, "register", [("public", TxKind.TrainerRegister, _spec_json(t), False)])
        self._advance()

        for p in self.pipelines:
            self._hire(p, model, initial=True)
        self._advance()
        return model

    def _pool(self) -> list[NodeSpec]:
        busy = {t.uuid for p in self.pipelines for t in p.trainers}
        return [t for t in self.sc.trainers if t.uuid not in busy and t.uuid not in self.blocked]

    def _hire(self, p: Pipeline, model: GlobalModel, initial: bool) -> None:
        candidates = self._pool()
        try:
            chosen, assignment = select_trainers(candidates, model, self.sc.trainer_baseline)
        except InsufficientMemory:
            log.info("pipeline %d cannot hire enough trainers; halting", p.index)
            p.assignment, p.trainers = None, []
            self._do(p.server, "halt")
            return
        new = [t for t in chosen if (p.server, t.uuid) not in self.keys]
        p.trainers, p.assignment = chosen, assignment
        p.transport_key = SessionKey(digest(b"transport", self.job_key.key, p.server.encode()))
        self._do(p.server, "trainers_selected", [self._exchange(p.server, t.uuid) for t in new],
                 count=len(new))
        for t in new:
            self._do(t.uuid, "enroll", [("private", TxKind.TrainerRegister,
                                         {"trainer": t.uuid, "server": p.server,
                                          "memory_bytes": t.memory_bytes,
                                          "compute_score": t.compute_score}, True)])

    # ---- epoch ----------------------------------------------------------

    def _hooks(self, p: Pipeline, epoch: int):
        if self.sc.mode == "single_node":
            return {}
        hooks = {}
        for attack in self.sc.attacks:
            if attack.target in p.assignment.trainers and epoch >= attack.start_epoch:
                hooks[attack.target] = self._make_hook(attack, epoch)
        return hooks

    def _make_hook(self, attack: AttackConfig, epoch: int):
        if attack.kind == "zero_gradient":
            return lambda rec, step_no: attack_zero(rec)
        if attack.kind == "gaussian":
            return lambda rec, step_no: attack_gaussian(
                rec, attack.sigma2, self.seed("gauss", attack.target, epoch, step_no))

        def shift(rec: GradientRecord, step_no: int) -> GradientRecord:
            if attack.target not in self._shift:
                # relative shifts are pinned once, against the first honest record seen
                self._shift[attack.target] = (attack.delta if attack.delta
                                              else attack.delta_rms * gradient_rms(rec))
            return attack_meanshift(rec, self._shift[attack.target])
        return shift

    def _train(self, p: Pipeline, model: GlobalModel, epoch: int):
        state = PipelineState(
            p.server, make_shards(model, p.assignment), self.store, self.job_key,
            Transport(p.transport_key), self._hooks(p, epoch),
        )
        try:
            return run_epoch(state, p.cids, self.cfg.lr, epoch=epoch,
                             order_seed=self.seed("order", p.index, epoch))
        except NotFound as exc:
            raise IncompleteEvidence(f"batch {exc} missing from store") from exc

    def _test_set(self):
        if not hasattr(self, "_test_cache"):
            try:
                batch = load_batch(self.store, self._test_cid, self.job_key)
            except NotFound as exc:
                raise IncompleteEvidence("test set missing from store") from exc
            self._test_cache = (batch.features.astype(np.float64), batch.labels)
        return self._test_cache

    def _layer_grads(self, epoch: int) -> dict[str, list[np.ndarray]]:
        """Per-pipeline flattened layer gradients, read back from the private chain."""
        by_trainer = {}
        for tx in query(self.private, TxKind.GradientUpload):
            body = self.open(tx)
            if body["epoch"] == epoch:
                rec = decode_gradients(base64.b64decode(body["grads"]), tx.author)
                by_trainer[(body["server"], tx.author)] = rec
        out = {}
        for p in self.pipelines:
            if not p.active:
                continue
            layers = []
            for t, _, _ in p.assignment.ranges:
                layers.extend(by_trainer[(p.server, t)].flat_layers())
            out[p.server] = layers
        return out

    def _epoch(self, epoch: int, model: GlobalModel) -> GlobalModel:
        sc = self.sc
        active = [p for p in self.pipelines if p.active]
        if not active:
            raise RuntimeError("no active pipelines remain")
        gdig = model_digest(model)
        for p in active:
            uploads = [("private", TxKind.ShardUpload,
                        {"epoch": epoch, "server": p.server, "trainer": t, "lo": lo, "hi": hi,
                         "version": model.version, "model_digest": gdig}, True)
                       for t, lo, hi in p.assignment.ranges]
            self._do(p.server, "start_epoch", uploads, epoch=epoch)
            for t in p.assignment.trainers:
                self._do(t, "shard", epoch=epoch, pipeline=p.index)
        self._advance()

        results, locals_ = {}, {}
        for p in active:
            res = self._train(p, model, epoch)
            results[p.server] = res
            local = GlobalModel(self.arch, res.params, model.version)
            locals_[p.server] = local
            for t, lo, hi in p.assignment.ranges:
                rec = res.records[t]
                blob = encode_gradients(rec)
                self._do(t, "train", [("private", TxKind.GradientUpload,
                                       {"epoch": epoch, "server": p.server, "lo": lo, "hi": hi,
                                        "grads": base64.b64encode(blob).decode(),
                                        "digest": digest(blob).hex()}, True)])
            ckpt = encode_checkpoint(local)
            cid = self.store.put(seal(ckpt, self.job_key).to_bytes())
            self._do(p.server, "epoch_done", [("private", TxKind.LocalModelUpload,
                                               {"epoch": epoch, "server": p.server, "cid": cid,
                                                "digest": digest(ckpt).hex(),
                                                "mean_loss": res.mean_loss, "batches": res.batches},
                                               True)], pending=False)
        self._advance()

        honest_acc = {}
        if self.evidence is None:
            tx_, ty_ = self._test_set()
            for ps, local in locals_.items():
                honest_acc[ps] = evaluate(local.params, tx_, ty_)

        if sc.mode == "tdml":
            new = self._validate_and_aggregate(epoch, locals_, honest_acc)
        elif sc.mode == "fedavg":
            new, members = fedavg_aggregate(locals_)
            author = min(p.server for p in active)
            self._publish(author, epoch, new, members, [], state="Idle")
        else:
            only = active[0].server
            new = GlobalModel(self.arch, locals_[only].params, model.version + 1)
            self._publish(only, epoch, new, [only], [], state="Idle")

        if self.evidence is None:
            tx_, ty_ = self._test_set()
            gacc = evaluate(new.params, tx_, ty_).accuracy
            for p in active:
                self.metrics.append({
                    "pipeline": p.index, "epoch": epoch,
                    "train_loss": results[p.server].mean_loss,
                    "test_acc": honest_acc[p.server].accuracy, "global_acc": gacc,
                    "batches": results[p.server].batches,
                    "local_model_digest": model_digest(locals_[p.server]),
                })
        self._rehire(epoch, new)
        self._advance()
        return new

    def _publish(self, author: str, epoch: int, model: GlobalModel, members, flagged, state: str):
        ckpt = encode_checkpoint(model)
        cid = self.store.put(seal(ckpt, self.job_key).to_bytes())
        self._do(author, "aggregate", [("private", TxKind.GlobalModelPublish,
                                        {"epoch": epoch, "version": model.version, "cid": cid,
                                         "digest": digest(ckpt).hex(), "members": list(members),
                                         "flagged": sorted(flagged)}, True)])

    def _validate_and_aggregate(self, epoch, locals_, honest_acc) -> GlobalModel:
        cfg = self.cfg
        servers = {p.server: self.states[p.server] for p in self.pipelines}
        h: dict[str, float] = {}
        validator_of: dict[str, str] = {}
        lies = {(l.validator, l.epoch, l.model): l.accuracy for l in self.sc.lies}
        for author in sorted(locals_):
            idle = {u: self.states[u] for u in servers}
            v = schedule_validation(idle, author)
            if v is None:
                v = next(u for u in sorted(servers) if u != author and u in validator_of.values())
            if self.states[v].phase in ("Idle", "Halted"):
                self._do(v, "validate", epoch=epoch)
            if self.evidence is not None:
                key = (epoch, author)
                if key not in self._recorded_h:
                    raise IncompleteEvidence(f"no recorded validation for {author} at epoch {epoch}")
                acc, loss = self._recorded_h[key]
            else:
                ev = honest_acc[author]
                acc, loss = ev.accuracy, ev.loss
                acc = lies.get((v, epoch, author), acc)
            h[author] = acc
            validator_of[author] = v
            self._do(v, "result", [("private", TxKind.ValidationResult,
                                    {"model_author": author, "epoch": epoch, "accuracy": acc,
                                     "loss": loss, "validator": v, "decode_failed": False}, True)])

        flagged = flag_suspicious(h, cfg.tau) if len(h) >= 2 else set()
        for f in sorted(flagged):
            self._detect(epoch, f, validator_of[f], h)
        self._advance()

        k = cfg.k_for(len(h))
        eligible = len(h) - len(flagged)
        new, members = aggregate_topk(locals_, h, min(k, eligible), exclude=flagged)
        aggregator = validator_of[sorted(locals_)[-1]]
        self._publish(aggregator, epoch, new, members, flagged, state="Validating")
        for v in sorted(set(validator_of.values())):
            self._do(v, "done")
        return new

    def _detect(self, epoch: int, flagged: str, detector: str, h: dict[str, float]) -> None:
        others = sorted(u for u in h if u != flagged)
        kd = min(self.cfg.detect_sample, len(others))
        if kd + 1 < 3:
            log.info("epoch %d: too few models (%d) to run detection", epoch, kd + 1)
            return
        rng = np.random.default_rng(self.seed("sample", epoch))
        sample = sorted(rng.choice(others, size=kd, replace=False).tolist()) + [flagged]
        grads = self._layer_grads(epoch)
        p = next(p for p in self.pipelines if p.server == flagged)
        try:
            report = detect_malicious(sample, flagged, grads, p.assignment, epoch=epoch)
        except DegenerateGeometry:
            log.info("epoch %d: degenerate gradient geometry, no detection", epoch)
            return
        self.detections.append(report)
        self._do(detector, "detect", [("private", TxKind.DetectionReport, report.to_json(), True)])
        for t in report.attributed:
            if t not in self.blocked:
                self.blocked[t] = epoch
                self._do(t, "block", epoch=epoch)

    def _rehire(self, epoch: int, model: GlobalModel) -> None:
        for p in self.pipelines:
            if not p.active or not any(t.uuid in self.blocked for t in p.trainers):
                continue
            for t in p.trainers:
                if t.uuid not in self.blocked:
                    self._do(t.uuid, "release")
            p.trainers, p.assignment = [], None
            self._hire(p, model, initial=False)

    # ---- driver ---------------------------------------------------------

    def run(self) -> RunResult:
        if self.evidence is not None:
            for tx in query(self.evidence.private, TxKind.ValidationResult):
                body = self.open(tx)
                self._recorded_h[(body["epoch"], body["model_author"])] = (body["accuracy"], body["loss"])
        model = self._setup()
        for epoch in range(1, self.cfg.epochs + 1):
            model = self._epoch(epoch, model)
            self.globals.append(model)
        self._finish()
        return RunResult(self.sc, self.public, self.private, self.store, self.metrics,
                         self.detections, self.event_log, self.initial_states, self.states,
                         self.globals, dict(self.blocked), self.pipelines)

    def _finish(self) -> None:
        hired_servers = [p.server for p in self.pipelines]
        hired_trainers = sorted({b for (a, b) in self.keys if a in hired_servers})
        for ps in sorted(hired_servers):
            if self.states[ps].phase in ("Idle", "Halted", "Ready"):
                self._do(ps, "claim", [("public", TxKind.RewardClaim,
                                        {"node": ps, "role": "parameter_server"}, False)])
        for t in hired_trainers:
            self._do(t, "claim", [("public", TxKind.RewardClaim, {"node": t, "role": "trainer"}, False)])
        self._do(self.sc.client, "finish")
        self._advance()


def run_scenario(scenario: Scenario, store: BlobStore | None = None) -> RunResult:
    return Simulation(scenario, store).run()
