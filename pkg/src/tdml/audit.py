"""Proof-of-training replay, composite verification and reward settlement.

Everything here is a pure function of recorded evidence: the two chain
dumps, the blob store and the scenario file that seeded the run.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import AuthFailure, IncompleteEvidence, NoPayout, NotFound, TDMLError
from .ledger import Chain, TxKind, VerificationReport, load_chain, open_envelope, query, verify_chain, verify_dump
from .model import decode_checkpoint, evaluate
from .protocol import decode_payload
from .simulation import Evidence, Scenario, Simulation, job_key_for, load_scenario
from .store import BlobStore, load_batch

ARTIFACTS = ("public_chain.jsonl", "private_chain.jsonl", "scenario.json")


def _opener(scenario: Scenario):
    key = job_key_for(scenario)
    return lambda tx: decode_payload(open_envelope(tx.payload, key))


@dataclass(frozen=True)
class Divergence:
    epoch: int
    pipeline: str
    field: str
    recorded: str | None
    reproduced: str | None


@dataclass
class ReplayReport:
    ok: bool
    divergences: list[Divergence] = field(default_factory=list)
    global_digests: dict[int, str] = field(default_factory=dict)
    error: str | None = None

    @property
    def first_divergence(self) -> Divergence | None:
        return self.divergences[0] if self.divergences else None

    def to_json(self) -> dict:
        return {
            "ok": self.ok, "error": self.error,
            "divergences": [vars(d) for d in self.divergences],
            "global_digests": {str(k): v for k, v in sorted(self.global_digests.items())},
        }


def _recorded_digests(chain: Chain, open_tx) -> dict[tuple[int, str, str], str]:
    out = {}
    for tx in query(chain, TxKind.LocalModelUpload):
        body = open_tx(tx)
        out[(body["epoch"], body["server"], "local_model_digest")] = body["digest"]
    for tx in query(chain, TxKind.GlobalModelPublish):
        body = open_tx(tx)
        out[(body["epoch"], "", "global_model_digest")] = body["digest"]
    return out


def replay(private: Chain, store: BlobStore, scenario: Scenario) -> ReplayReport:
    """Re-execute the job from recorded inputs and compare every model digest.

    Raises :class:`IncompleteEvidence` when a referenced blob is missing.
    """
    open_tx = _opener(scenario)
    detail = query(private, TxKind.TaskAnnounce)
    if not detail:
        raise IncompleteEvidence("private chain carries no task detail")
    divergences = []
    try:
        recorded_sc = open_tx(detail[0]).get("scenario_digest")
    except AuthFailure:
        # a different scenario derives a different job key
        return ReplayReport(False, [Divergence(0, "", "scenario_digest", None, scenario.digest())],
                            error="chain was not produced by this scenario")
    if recorded_sc != scenario.digest():
        divergences.append(Divergence(0, "", "scenario_digest", recorded_sc, scenario.digest()))
    result = Simulation(scenario, evidence=Evidence(private, store)).run()
    recorded = _recorded_digests(private, open_tx)
    reproduced = _recorded_digests(result.private, open_tx)
    for key in sorted(set(recorded) | set(reproduced)):
        a, b = recorded.get(key), reproduced.get(key)
        if a != b:
            divergences.append(Divergence(key[0], key[1], key[2], a, b))
    globals_ = {k[0]: v for k, v in reproduced.items() if k[2] == "global_model_digest"}
    return ReplayReport(not divergences, divergences, globals_)


@dataclass(frozen=True)
class ValidationMismatch:
    epoch: int
    model_author: str
    validator: str
    recorded: float
    recomputed: float | None

    def to_json(self) -> dict:
        return vars(self)


def check_validations(private: Chain, store: BlobStore, scenario: Scenario,
                      atol: float = 1e-12) -> list[ValidationMismatch]:
    """Recompute every recorded ValidationResult against the stored local model."""
    open_tx = _opener(scenario)
    key = job_key_for(scenario)
    detail = open_tx(query(private, TxKind.TaskAnnounce)[0])
    test = load_batch(store, detail["test_cid"], key)
    x, y = test.features.astype(np.float64), test.labels
    locals_ = {}
    for tx in query(private, TxKind.LocalModelUpload):
        body = open_tx(tx)
        locals_[(body["epoch"], body["server"])] = body["cid"]
    out = []
    for tx in query(private, TxKind.ValidationResult):
        body = open_tx(tx)
        cid = locals_.get((body["epoch"], body["model_author"]))
        try:
            model = decode_checkpoint(open_envelope(store.get(cid), key))
            acc = evaluate(model.params, x, y).accuracy
        except (TDMLError, ValueError, TypeError):
            acc = None
        if acc is None or abs(acc - body["accuracy"]) > atol:
            out.append(ValidationMismatch(body["epoch"], body["model_author"], tx.author,
                                          body["accuracy"], acc))
    return out


@dataclass
class TrainingReport:
    public: VerificationReport
    private: VerificationReport
    replay: ReplayReport | None
    validation: list[ValidationMismatch] | None
    notes: list[str] = field(default_factory=list)

    @property
    def chain_ok(self) -> bool:
        return self.public.ok and self.private.ok

    @property
    def ok(self) -> bool:
        return (self.chain_ok and self.replay is not None and self.replay.ok
                and self.validation is not None and not self.validation)

    def to_json(self) -> dict:
        def chain(r: VerificationReport) -> dict:
            return {"ok": r.ok, "first_bad_block": r.first_bad_block, "reason": r.reason}
        return {
            "ok": self.ok,
            "chain": {"public": chain(self.public), "private": chain(self.private)},
            "replay": None if self.replay is None else self.replay.to_json(),
            "validation": None if self.validation is None else [m.to_json() for m in self.validation],
            "notes": self.notes,
        }


def verify_training(public: Chain | VerificationReport, private: Chain, store: BlobStore,
                    scenario: Scenario, *, private_report: VerificationReport | None = None) -> TrainingReport:
    """Chain integrity, then replay, then validation re-derivation.

    Replay and validation are skipped (reported as ``None``) when either
    chain fails verification.
    """
    pub = public if isinstance(public, VerificationReport) else verify_chain(public)
    priv = private_report or verify_chain(private)
    report = TrainingReport(pub, priv, None, None)
    if not report.chain_ok:
        report.notes.append("chain verification failed; replay skipped")
        return report
    try:
        report.replay = replay(private, store, scenario)
    except (IncompleteEvidence, NotFound) as exc:
        report.replay = ReplayReport(False, error=f"incomplete evidence: {exc}")
    try:
        report.validation = check_validations(private, store, scenario)
    except (TDMLError, IndexError, KeyError) as exc:
        report.notes.append(f"validation check failed: {exc}")
    return report


def verify_directory(directory: str | Path) -> TrainingReport:
    """Verify a run's output directory; raises FileNotFoundError if artifacts are missing."""
    d = Path(directory)
    missing = [name for name in ARTIFACTS if not (d / name).is_file()]
    if missing:
        raise FileNotFoundError(f"missing {', '.join(missing)} in {d}")
    scenario = load_scenario(d / "scenario.json")
    pub = verify_dump(d / "public_chain.jsonl")
    priv = verify_dump(d / "private_chain.jsonl")
    if not (pub.ok and priv.ok):
        return TrainingReport(pub, priv, None, None, ["chain verification failed; replay skipped"])
    store = BlobStore.load(d / "blobs") if (d / "blobs").is_dir() else BlobStore()
    return verify_training(pub, load_chain(d / "private_chain.jsonl"), store, scenario, private_report=priv)


# --------------------------------------------------------------------------
# Settlement


@dataclass
class RewardEntry:
    node: str
    role: str
    work_units: int
    payout: int

    def to_json(self) -> dict:
        return vars(self)


@dataclass
class RewardLedger:
    budget: int
    entries: list[RewardEntry]

    @property
    def payouts(self) -> dict[str, int]:
        return {e.node: e.payout for e in self.entries}

    @property
    def total(self) -> int:
        return sum(e.payout for e in self.entries)

    @property
    def burned(self) -> int:
        return self.budget - self.total

    def to_json(self) -> dict:
        return {"budget": self.budget, "total": self.total, "burned": self.burned,
                "entries": [e.to_json() for e in self.entries]}


def _split(pool: int, units: dict[str, int], possible: int, exact: bool) -> dict[str, int]:
    """Floor each pro-rata share; hand leftovers out by largest remainder when ``exact``."""
    if possible == 0:
        return {k: 0 for k in units}
    shares = {k: pool * u // possible for k, u in units.items()}
    if exact:
        left = pool - sum(shares.values())
        order = sorted(units, key=lambda k: (-((pool * units[k]) % possible), k))
        for k in order[:left]:
            shares[k] += 1
    return shares


def settle_rewards(public: Chain, private: Chain, scenario: Scenario, *,
                   report: TrainingReport | None = None) -> RewardLedger:
    """Split the budget into server and trainer pools and pay each pro rata.

    A server earns one unit per ValidationResult it authored.  A trainer earns
    one unit per GradientUpload from an epoch before it was blocked.  The
    price of a unit is fixed by the number of uploads actually made, so the
    shares of blocked trainers are burned rather than redistributed.
    """
    if report is not None and not report.ok:
        raise NoPayout("training verification failed")
    if report is None and not (verify_chain(public).ok and verify_chain(private).ok):
        raise NoPayout("chain verification failed")
    open_tx = _opener(scenario)
    budget = scenario.budget
    server_pool = int(budget * scenario.server_share)
    trainer_pool = budget - server_pool

    blocked: dict[str, int] = {}
    for tx in query(private, TxKind.DetectionReport):
        body = open_tx(tx)
        for t in body["attributed"]:
            blocked.setdefault(t, body["epoch"])

    servers: dict[str, int] = {}
    for tx in query(private, TxKind.ServerRegister):
        servers.setdefault(tx.author, 0)
    for tx in query(private, TxKind.ValidationResult):
        servers[tx.author] = servers.get(tx.author, 0) + 1

    trainers: dict[str, int] = {}
    uploads = 0
    for tx in query(private, TxKind.TrainerRegister):
        trainers.setdefault(tx.author, 0)
    for tx in query(private, TxKind.GradientUpload):
        uploads += 1
        epoch = open_tx(tx)["epoch"]
        accepted = tx.author not in blocked or epoch < blocked[tx.author]
        trainers[tx.author] = trainers.get(tx.author, 0) + int(accepted)

    withheld = sum(trainers.values()) < uploads
    s_pay = _split(server_pool, servers, sum(servers.values()), exact=True)
    t_pay = _split(trainer_pool, trainers, uploads, exact=not withheld)
    if sum(servers.values()) == 0:
        # no validation happened (fedavg / single node): the server pool goes unspent
        s_pay = {k: 0 for k in servers}
    entries = [RewardEntry(k, "parameter_server", servers[k], s_pay[k]) for k in sorted(servers)]
    entries += [RewardEntry(k, "trainer", trainers[k], t_pay[k]) for k in sorted(trainers)]
    return RewardLedger(budget, entries)


def dumps_json(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True) + "\n"
