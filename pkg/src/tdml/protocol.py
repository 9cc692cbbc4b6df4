"""Client, parameter-server and trainer coordination.

Messages are carried as canonical JSON transaction payloads.  Each node's
lifecycle is a small state machine driven through :func:`step`, which
returns the next state plus the transactions/messages the node must emit.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from typing import Mapping, Sequence

from .errors import ConfigError, IllegalTransition, InsufficientCandidates, InsufficientMemory
from .ledger import SessionKey, Transaction, TxKind, digest
from .model import GlobalModel, layer_memory
from .pipeline import NodeSpec, ShardAssignment, shard_model


def encode_payload(obj) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":")).encode()


def decode_payload(raw: bytes):
    return json.loads(raw.decode())


@dataclass(frozen=True)
class Baseline:
    memory_bytes: int = 0
    cpus: int = 0

    def admits(self, spec: NodeSpec) -> bool:
        # cpus are carried for the record; only memory gates selection
        return spec.memory_bytes >= self.memory_bytes


@dataclass(frozen=True)
class TaskAnnouncement:
    timestamp: int
    client: str
    task: str
    reward_budget: int
    baseline: Baseline
    n_splits: int

    def validate(self) -> None:
        if self.reward_budget <= 0:
            raise ConfigError("reward budget must be positive")
        if self.n_splits < 1:
            raise ConfigError("need at least one data-parallel split")

    def to_payload(self) -> bytes:
        return encode_payload({
            "timestamp": self.timestamp, "client": self.client, "task": self.task,
            "reward_budget": self.reward_budget,
            "baseline": {"memory_bytes": self.baseline.memory_bytes, "cpus": self.baseline.cpus},
            "n_splits": self.n_splits,
        })

    @classmethod
    def from_payload(cls, raw: bytes) -> "TaskAnnouncement":
        d = decode_payload(raw)
        return cls(d["timestamp"], d["client"], d["task"], d["reward_budget"],
                   Baseline(**d["baseline"]), d["n_splits"])


@dataclass(frozen=True)
class HiringMessage:
    timestamp: int
    server: str
    baseline: Baseline
    budget_share: int

    def to_payload(self) -> bytes:
        if self.budget_share <= 0:
            raise ConfigError("budget share must be positive")
        return encode_payload({
            "timestamp": self.timestamp, "server": self.server,
            "baseline": {"memory_bytes": self.baseline.memory_bytes, "cpus": self.baseline.cpus},
            "budget_share": self.budget_share,
        })

    @classmethod
    def from_payload(cls, raw: bytes) -> "HiringMessage":
        d = decode_payload(raw)
        return cls(d["timestamp"], d["server"], Baseline(**d["baseline"]), d["budget_share"])


@dataclass(frozen=True)
class TrainingConfig:
    epochs: int = 10
    lr: float = 0.1
    n_pipelines: int = 2
    topk: int | None = None  # defaults to floor(M / 2)
    batch_size: int = 32
    tau: float = 0.5
    detect_sample: int = 5

    def __post_init__(self):
        if self.epochs < 1 or self.n_pipelines < 1:
            raise ConfigError("epochs and n_pipelines must be >= 1")
        if self.lr < 0:
            raise ConfigError("learning rate must be non-negative")
        if self.topk is not None and not 1 <= self.topk <= self.n_pipelines:
            raise ConfigError("topk must satisfy 1 <= K <= M")

    def k_for(self, m: int) -> int:
        k = self.topk if self.topk is not None else m // 2
        return max(1, min(k, m))


def publish_task(announcement: TaskAnnouncement) -> Transaction:
    announcement.validate()
    return Transaction.create(announcement.timestamp, announcement.client,
                              TxKind.TaskAnnounce, announcement.to_payload())


def select_servers(registrations: Sequence[NodeSpec], n: int, baseline: Baseline = Baseline()) -> list[str]:
    """Filter by baseline, rank by (compute_score desc, uuid asc), take ``n``."""
    eligible = [r for r in registrations if baseline.admits(r)]
    if len(eligible) < n:
        raise InsufficientCandidates(f"{len(eligible)} eligible servers, need {n}")
    ranked = sorted(eligible, key=lambda r: (-r.compute_score, r.uuid))
    return [r.uuid for r in ranked[:n]]


def rank_trainers(candidates: Sequence[NodeSpec]) -> list[NodeSpec]:
    return sorted(candidates, key=lambda c: (-c.memory_bytes, -c.compute_score, c.uuid))


def select_trainers(candidates: Sequence[NodeSpec], model: GlobalModel,
                    baseline: Baseline = Baseline()) -> tuple[list[NodeSpec], ShardAssignment]:
    """Pick the smallest capability-ranked prefix that can hold the model.

    The prefix starts at the shortest one whose summed memory covers the
    model's total; if greedy packing still fails (fragmentation) the prefix
    grows one candidate at a time.
    """
    ranked = rank_trainers([c for c in candidates if baseline.admits(c)])
    total = layer_memory(model.arch).total
    running, k = 0, 0
    for k, c in enumerate(ranked, start=1):
        running += c.memory_bytes
        if running >= total:
            break
    else:
        raise InsufficientMemory(f"candidates offer {running} bytes, model needs {total}")
    last_error: InsufficientMemory | None = None
    for size in range(k, len(ranked) + 1):
        try:
            assignment = shard_model(model, ranked[:size])
        except InsufficientMemory as exc:
            last_error = exc
            continue
        chosen = [c for c in ranked[:size] if c.uuid in set(assignment.trainers)]
        return chosen, assignment
    raise last_error or InsufficientMemory("no feasible packing")


def derive_session_key(job_id: str, a: str, b: str, nonce: bytes) -> SessionKey:
    return SessionKey(digest(job_id.encode(), b"|", a.encode(), b"|", b.encode(), b"|", nonce))


def key_exchange(job_id: str, a: str, b: str, nonce: bytes, tick: int,
                 registered: set[str] | None = None) -> tuple[SessionKey, Transaction]:
    """Both parties derive the same key; only its identifier goes on chain."""
    if registered is not None:
        missing = [p for p in (a, b) if p not in registered]
        if missing:
            raise KeyError(f"unknown party {missing[0]}")
    key = derive_session_key(job_id, a, b, nonce)
    tx = Transaction.create(tick, a, TxKind.KeyExchange,
                            encode_payload({"a": a, "b": b, "key_id": key.key_id.hex()}))
    return key, tx


# --------------------------------------------------------------------------
# State machines

@dataclass(frozen=True)
class Event:
    name: str
    data: Mapping = field(default_factory=dict)


@dataclass(frozen=True)
class Emit:
    kind: str  # a TxKind value or a direct message name such as "ack"
    channel: str  # "public", "private" or "direct"


@dataclass(frozen=True)
class NodeState:
    uuid: str
    role: str  # client | parameter_server | trainer
    phase: str
    epoch: int = 0
    pipeline: str | None = None
    keys: frozenset = frozenset()


INITIAL_PHASE = {"client": "Init", "parameter_server": "Candidate", "trainer": "Candidate"}


def new_node(uuid: str, role: str) -> NodeState:
    return NodeState(uuid, role, INITIAL_PHASE[role])


_PUB, _PRIV = "public", "private"

# (role, phase, event) -> (next phase or None for computed, emissions)
_TABLE: dict[tuple[str, str, str], tuple[str | None, tuple[Emit, ...]]] = {
    ("client", "Init", "publish"): ("Announced", (Emit(TxKind.TaskAnnounce.value, _PUB),)),
    ("client", "Announced", "select"): ("Running", (Emit(TxKind.KeyExchange.value, _PUB),)),
    ("client", "Running", "open_job"): ("Running", (Emit(TxKind.TaskAnnounce.value, _PRIV),)),
    ("client", "Running", "finish"): ("Done", ()),

    ("parameter_server", "Candidate", "register"): ("Registered", (Emit(TxKind.ServerRegister.value, _PUB),)),
    ("parameter_server", "Registered", "connect"): ("Connected", (Emit(TxKind.ServerRegister.value, _PRIV),)),
    ("parameter_server", "Connected", "hire"): ("Hiring", (Emit(TxKind.HiringAnnounce.value, _PUB),)),
    ("parameter_server", "Hiring", "trainers_selected"): ("Ready", (Emit(TxKind.KeyExchange.value, _PUB),)),
    ("parameter_server", "Idle", "trainers_selected"): ("Ready", (Emit(TxKind.KeyExchange.value, _PUB),)),
    ("parameter_server", "Ready", "start_epoch"): ("Training", (Emit(TxKind.ShardUpload.value, _PRIV),)),
    ("parameter_server", "Idle", "start_epoch"): ("Training", (Emit(TxKind.ShardUpload.value, _PRIV),)),
    ("parameter_server", "Training", "epoch_done"): (None, (Emit(TxKind.LocalModelUpload.value, _PRIV),)),
    ("parameter_server", "Idle", "validate"): ("Validating", ()),
    ("parameter_server", "Validating", "result"): ("Validating", (Emit(TxKind.ValidationResult.value, _PRIV),)),
    ("parameter_server", "Validating", "detect"): ("Validating", (Emit(TxKind.DetectionReport.value, _PRIV),)),
    ("parameter_server", "Validating", "aggregate"): ("Validating", (Emit(TxKind.GlobalModelPublish.value, _PRIV),)),
    ("parameter_server", "Idle", "aggregate"): ("Idle", (Emit(TxKind.GlobalModelPublish.value, _PRIV),)),
    ("parameter_server", "Validating", "done"): ("Idle", ()),
    ("parameter_server", "Idle", "halt"): ("Halted", ()),
    ("parameter_server", "Ready", "halt"): ("Halted", ()),
    ("parameter_server", "Hiring", "halt"): ("Halted", ()),
    ("parameter_server", "Halted", "validate"): ("HaltedValidating", ()),
    ("parameter_server", "HaltedValidating", "result"): ("HaltedValidating", (Emit(TxKind.ValidationResult.value, _PRIV),)),
    ("parameter_server", "HaltedValidating", "detect"): ("HaltedValidating", (Emit(TxKind.DetectionReport.value, _PRIV),)),
    ("parameter_server", "HaltedValidating", "aggregate"): ("HaltedValidating", (Emit(TxKind.GlobalModelPublish.value, _PRIV),)),
    ("parameter_server", "HaltedValidating", "done"): ("Halted", ()),
    ("parameter_server", "Idle", "claim"): ("Done", (Emit(TxKind.RewardClaim.value, _PUB),)),
    ("parameter_server", "Halted", "claim"): ("Done", (Emit(TxKind.RewardClaim.value, _PUB),)),
    ("parameter_server", "Ready", "claim"): ("Done", (Emit(TxKind.RewardClaim.value, _PUB),)),
    ("parameter_server", "Registered", "claim"): ("Done", ()),

    ("trainer", "Candidate", "register"): ("Registered", (Emit(TxKind.TrainerRegister.value, _PUB),)),
    ("trainer", "Registered", "enroll"): ("Registered", (Emit(TxKind.TrainerRegister.value, _PRIV),)),
    ("trainer", "Registered", "shard"): ("ShardLoaded", (Emit("ack", "direct"),)),
    ("trainer", "Trained", "shard"): ("ShardLoaded", (Emit("ack", "direct"),)),
    ("trainer", "ShardLoaded", "train"): ("Trained", (Emit(TxKind.GradientUpload.value, _PRIV),)),
    ("trainer", "Trained", "release"): ("Registered", ()),
    ("trainer", "Registered", "block"): ("Blocked", ()),
    ("trainer", "Trained", "block"): ("Blocked", ()),
    ("trainer", "ShardLoaded", "block"): ("Blocked", ()),
    ("trainer", "Registered", "claim"): ("Done", (Emit(TxKind.RewardClaim.value, _PUB),)),
    ("trainer", "Trained", "claim"): ("Done", (Emit(TxKind.RewardClaim.value, _PUB),)),
    ("trainer", "Blocked", "claim"): ("Done", (Emit(TxKind.RewardClaim.value, _PUB),)),
    ("trainer", "Candidate", "claim"): ("Candidate", ()),
}


def step(node: NodeState, event: Event) -> tuple[NodeState, list[Emit]]:
    """Pure transition.  ``event.data['count']`` repeats the emissions."""
    entry = _TABLE.get((node.role, node.phase, event.name))
    if entry is None:
        raise IllegalTransition(node.phase, event.name)
    phase, emits = entry
    if phase is None:  # epoch_done
        phase = "Validating" if event.data.get("pending") else "Idle"
    changes: dict = {"phase": phase}
    if "epoch" in event.data:
        changes["epoch"] = int(event.data["epoch"])
    if "pipeline" in event.data:
        changes["pipeline"] = event.data["pipeline"]
    if "key_id" in event.data:
        changes["keys"] = node.keys | {event.data["key_id"]}
    count = int(event.data.get("count", 1))
    return dataclasses.replace(node, **changes), list(emits) * count


def replay_events(initial: Mapping[str, NodeState], log: Sequence[tuple[str, Event]]):
    """Re-drive a recorded event log; returns final states and per-node phase paths."""
    states = dict(initial)
    paths = {u: [s.phase] for u, s in states.items()}
    for uuid, event in log:
        states[uuid], _ = step(states[uuid], event)
        paths[uuid].append(states[uuid].phase)
    return states, paths


def schedule_validation(servers: Mapping[str, NodeState] | Mapping[str, str], pending_author: str) -> str | None:
    """Lowest-UUID idle server that did not author the pending model."""
    for uuid in sorted(servers):
        s = servers[uuid]
        phase = s.phase if isinstance(s, NodeState) else s
        if phase in ("Idle", "Halted") and uuid != pending_author:
            return uuid
    return None
