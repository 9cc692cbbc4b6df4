"""Append-only, hash-chained block store with Merkle-rooted transaction bodies.

One :class:`Chain` is kept for the public coordination chain and one per
training job for the private chain.  Blocks are sealed by a single sequencer
(the simulation harness); verification happens on read.

Hashes are SHA-256 throughout.  Transactions and block headers are hashed over
a canonical byte layout: every variable-size field is prefixed by its length
as a little-endian ``u32`` and integers are little-endian ``u64``.
"""

from __future__ import annotations

import base64
import dataclasses
import hashlib
import hmac
import json
import struct
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Iterable, Sequence

from .errors import AuthFailure, ChainFormatError, ClockRegression, EmptyBody

DIGEST_NAME = "sha256"
DIGEST_SIZE = 32
ZERO_DIGEST = bytes(DIGEST_SIZE)
DUMP_FORMAT = 1


def digest(*parts: bytes) -> bytes:
    h = hashlib.new(DIGEST_NAME)
    for part in parts:
        h.update(part)
    return h.digest()


def _u64(n: int) -> bytes:
    return struct.pack("<Q", n)


def _field(b: bytes) -> bytes:
    return struct.pack("<I", len(b)) + b


class TxKind(str, Enum):
    TaskAnnounce = "TaskAnnounce"
    ServerRegister = "ServerRegister"
    HiringAnnounce = "HiringAnnounce"
    TrainerRegister = "TrainerRegister"
    KeyExchange = "KeyExchange"
    ShardUpload = "ShardUpload"
    GradientUpload = "GradientUpload"
    LocalModelUpload = "LocalModelUpload"
    ValidationResult = "ValidationResult"
    GlobalModelPublish = "GlobalModelPublish"
    DetectionReport = "DetectionReport"
    RewardClaim = "RewardClaim"


@dataclass(frozen=True)
class Transaction:
    timestamp: int
    author: str
    kind: TxKind
    payload: bytes
    tx_id: bytes = b""

    @classmethod
    def create(cls, timestamp: int, author: str, kind: TxKind | str, payload: bytes) -> "Transaction":
        tx = cls(timestamp, author, TxKind(kind), bytes(payload))
        return dataclasses.replace(tx, tx_id=tx.compute_id())

    def canonical(self) -> bytes:
        return (
            _u64(self.timestamp)
            + _field(self.author.encode())
            + _field(self.kind.value.encode())
            + _field(self.payload)
        )

    def compute_id(self) -> bytes:
        return digest(self.canonical())


@dataclass(frozen=True)
class BlockHeader:
    prev_id: bytes
    block_id: bytes
    timestamp: int
    merkle_root: bytes


@dataclass(frozen=True)
class Block:
    header: BlockHeader
    body: tuple[Transaction, ...]


def merkle_root(txs: Sequence[Transaction]) -> bytes:
    """Pairwise-hash the transaction ids up a binary tree.

    An unpaired node is promoted unchanged to the next level.  A single-leaf
    tree hashes its leaf so that the root is never a bare transaction id.
    """
    if not txs:
        raise EmptyBody("merkle_root of an empty body")
    level = [tx.tx_id for tx in txs]
    if len(level) == 1:
        return digest(level[0])
    while len(level) > 1:
        nxt = [digest(level[i], level[i + 1]) for i in range(0, len(level) - 1, 2)]
        if len(level) % 2:
            nxt.append(level[-1])
        level = nxt
    return level[0]


def block_id(prev_id: bytes, timestamp: int, root: bytes) -> bytes:
    return digest(prev_id, _u64(timestamp), root)


def genesis_root(tag: str) -> bytes:
    return digest(b"genesis", tag.encode())


@dataclass
class Chain:
    genesis_tag: str
    blocks: list[Block] = field(default_factory=list)

    @classmethod
    def new(cls, genesis_tag: str) -> "Chain":
        root = genesis_root(genesis_tag)
        header = BlockHeader(ZERO_DIGEST, block_id(ZERO_DIGEST, 0, root), 0, root)
        return cls(genesis_tag, [Block(header, ())])

    @property
    def head(self) -> Block:
        return self.blocks[-1]

    def __len__(self) -> int:
        return len(self.blocks)

    def transactions(self) -> Iterable[Transaction]:
        for block in self.blocks:
            yield from block.body

    def append(self, txs: Sequence[Transaction], tick: int) -> "Chain":
        return append_block(self, txs, tick)


def append_block(chain: Chain, txs: Sequence[Transaction], tick: int) -> Chain:
    txs = tuple(txs)
    if not txs:
        raise EmptyBody("cannot seal a block without transactions")
    head = chain.head.header
    if tick < head.timestamp:
        raise ClockRegression(f"tick {tick} precedes head timestamp {head.timestamp}")
    latest = max((tx.timestamp for tx in chain.head.body), default=head.timestamp)
    for tx in txs:
        if tx.timestamp < latest or tx.timestamp > tick:
            raise ClockRegression(f"transaction timestamp {tx.timestamp} outside [{latest}, {tick}]")
    root = merkle_root(txs)
    header = BlockHeader(head.block_id, block_id(head.block_id, tick, root), tick, root)
    chain.blocks.append(Block(header, txs))
    return chain


@dataclass(frozen=True)
class VerificationReport:
    ok: bool
    first_bad_block: int | None = None
    reason: str = ""


def _check_block(chain: Chain, i: int, prev: Block | None, latest_ts: int) -> str:
    block = chain.blocks[i]
    h = block.header
    if prev is None:
        if h.prev_id != ZERO_DIGEST:
            return "genesis prev_id is not the zero digest"
        if block.body:
            return "genesis block carries transactions"
        if h.merkle_root != genesis_root(chain.genesis_tag):
            return "genesis root does not match the chain tag"
    else:
        if h.prev_id != prev.header.block_id:
            return "prev_id does not link to the preceding block"
        if h.timestamp < prev.header.timestamp:
            return "block timestamp regresses"
        if not block.body:
            return "empty block body"
        for tx in block.body:
            if not isinstance(tx.kind, TxKind):
                return "unknown transaction kind"
            if tx.tx_id != tx.compute_id():
                return "tx_id does not match transaction contents"
            if tx.timestamp < latest_ts or tx.timestamp > h.timestamp:
                return "transaction timestamp out of order"
        if h.merkle_root != merkle_root(block.body):
            return "merkle root mismatch"
    if h.block_id != block_id(h.prev_id, h.timestamp, h.merkle_root):
        return "block_id mismatch"
    return ""


def verify_chain(chain: Chain) -> VerificationReport:
    if not chain.blocks:
        return VerificationReport(False, 0, "chain has no genesis block")
    prev = None
    latest_ts = 0
    for i, block in enumerate(chain.blocks):
        reason = _check_block(chain, i, prev, latest_ts)
        if reason:
            return VerificationReport(False, i, reason)
        latest_ts = max([latest_ts] + [tx.timestamp for tx in block.body])
        prev = block
    return VerificationReport(True)


def query(chain: Chain, kind: TxKind | str, author: str | None = None) -> list[Transaction]:
    kind = TxKind(kind)
    return [
        tx for tx in chain.transactions()
        if tx.kind is kind and (author is None or tx.author == author)
    ]


# --------------------------------------------------------------------------
# Simulated authenticated encryption

ENVELOPE_MAGIC = b"ENV1"
KEY_ID_SIZE = 16
NONCE_SIZE = 16


@dataclass(frozen=True)
class Envelope:
    key_id: bytes
    nonce: bytes
    ciphertext: bytes
    auth_tag: bytes

    def to_bytes(self) -> bytes:
        return ENVELOPE_MAGIC + self.key_id + self.nonce + self.auth_tag + self.ciphertext

    @classmethod
    def from_bytes(cls, raw: bytes) -> "Envelope":
        head = len(ENVELOPE_MAGIC)
        if raw[:head] != ENVELOPE_MAGIC or len(raw) < head + KEY_ID_SIZE + NONCE_SIZE + DIGEST_SIZE:
            raise AuthFailure("not an envelope")
        a = head + KEY_ID_SIZE
        b = a + NONCE_SIZE
        c = b + DIGEST_SIZE
        return cls(raw[head:a], raw[a:b], raw[c:], raw[b:c])


def is_envelope(raw: bytes) -> bool:
    return raw[: len(ENVELOPE_MAGIC)] == ENVELOPE_MAGIC


class SessionKey:
    """A 32-byte symmetric key with a deterministic nonce counter."""

    def __init__(self, key: bytes):
        if len(key) != DIGEST_SIZE:
            raise ValueError("session keys are 32 bytes")
        self.key = bytes(key)
        self.key_id = digest(b"key-id", self.key)[:KEY_ID_SIZE]
        self.counter = 0

    def next_nonce(self) -> bytes:
        nonce = digest(self.key_id, _u64(self.counter))[:NONCE_SIZE]
        self.counter += 1
        return nonce

    def __repr__(self) -> str:
        return f"SessionKey(key_id={self.key_id.hex()})"


def _keystream_xor(key: bytes, nonce: bytes, data: bytes) -> bytes:
    if not data:
        return b""
    stream = hashlib.shake_256(key + nonce).digest(len(data))
    x = int.from_bytes(data, "little") ^ int.from_bytes(stream, "little")
    return x.to_bytes(len(data), "little")


def _tag(key: bytes, nonce: bytes, ciphertext: bytes) -> bytes:
    return hmac.new(key, nonce + ciphertext, DIGEST_NAME).digest()


def seal(payload: bytes, key: SessionKey) -> Envelope:
    nonce = key.next_nonce()
    ct = _keystream_xor(key.key, nonce, bytes(payload))
    return Envelope(key.key_id, nonce, ct, _tag(key.key, nonce, ct))


def open_envelope(envelope: Envelope | bytes, key: SessionKey) -> bytes:
    if isinstance(envelope, (bytes, bytearray)):
        envelope = Envelope.from_bytes(bytes(envelope))
    if envelope.key_id != key.key_id:
        raise AuthFailure("envelope sealed under a different key")
    expected = _tag(key.key, envelope.nonce, envelope.ciphertext)
    if not hmac.compare_digest(expected, envelope.auth_tag):
        raise AuthFailure("authentication tag mismatch")
    return _keystream_xor(key.key, envelope.nonce, envelope.ciphertext)


# --------------------------------------------------------------------------
# JSON-lines dump

def _dumps(obj) -> str:
    return json.dumps(obj, separators=(",", ":"))


def _header_line(chain: Chain) -> str:
    return _dumps({"chain": chain.genesis_tag, "digest": DIGEST_NAME, "format": DUMP_FORMAT})


def _block_line(height: int, block: Block) -> str:
    h = block.header
    return _dumps({
        "height": height,
        "prev": h.prev_id.hex(),
        "id": h.block_id.hex(),
        "ts": h.timestamp,
        "root": h.merkle_root.hex(),
        "txs": [
            {
                "kind": tx.kind.value,
                "author": tx.author,
                "ts": tx.timestamp,
                "payload_b64": base64.b64encode(tx.payload).decode(),
                "txid": tx.tx_id.hex(),
            }
            for tx in block.body
        ],
    })


def dumps_chain(chain: Chain) -> str:
    lines = [_header_line(chain)]
    lines += [_block_line(i, b) for i, b in enumerate(chain.blocks)]
    return "\n".join(lines) + "\n"


def dump_chain(chain: Chain, path: str | Path) -> None:
    Path(path).write_text(dumps_chain(chain), encoding="utf-8")


def _hex(s, n: int = DIGEST_SIZE) -> bytes:
    if not isinstance(s, str) or len(s) != 2 * n:
        raise ChainFormatError(f"bad digest field {s!r}")
    return bytes.fromhex(s)


def _parse_block(obj: dict) -> Block:
    txs = []
    for t in obj["txs"]:
        tx = Transaction(
            int(t["ts"]), str(t["author"]), TxKind(t["kind"]),
            base64.b64decode(t["payload_b64"], validate=True), _hex(t["txid"]),
        )
        txs.append(tx)
    header = BlockHeader(_hex(obj["prev"]), _hex(obj["id"]), int(obj["ts"]), _hex(obj["root"]))
    return Block(header, tuple(txs))


def loads_chain(text: str) -> Chain:
    """Parse a dump produced by :func:`dumps_chain`.

    The dump must be in canonical form: every line has to re-serialize to
    exactly the same characters, so encodings that parse to equal values
    (upper-case hex, reordered keys, extra whitespace) are rejected.
    """
    if not text.endswith("\n"):
        raise ChainFormatError("dump must end with a newline")
    lines = text[:-1].split("\n")
    try:
        head = json.loads(lines[0])
        if head.get("digest") != DIGEST_NAME or head.get("format") != DUMP_FORMAT:
            raise ChainFormatError("unsupported digest or dump format")
        chain = Chain(str(head["chain"]))
        if _header_line(chain) != lines[0]:
            raise ChainFormatError("non-canonical header line")
        for height, line in enumerate(lines[1:]):
            obj = json.loads(line)
            if obj.get("height") != height:
                raise ChainFormatError(f"unexpected height at line {height + 1}")
            block = _parse_block(obj)
            if _block_line(height, block) != line:
                raise ChainFormatError(f"non-canonical block line {height}")
            chain.blocks.append(block)
    except ChainFormatError:
        raise
    except (ValueError, KeyError, TypeError, AttributeError) as exc:
        raise ChainFormatError(str(exc)) from exc
    return chain


def load_chain(path: str | Path) -> Chain:
    try:
        text = Path(path).read_bytes().decode("utf-8")
    except UnicodeDecodeError as exc:
        raise ChainFormatError("dump is not valid UTF-8") from exc
    return loads_chain(text)


def verify_dump(path: str | Path) -> VerificationReport:
    """Parse and verify a dump file; parse failures are reported, not raised."""
    try:
        chain = load_chain(path)
    except ChainFormatError as exc:
        return VerificationReport(False, None, f"malformed dump: {exc}")
    return verify_chain(chain)
