"""Content-addressed blob store standing in for an IPFS file server."""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import NotFound, TDMLError
from .ledger import SessionKey, digest, open_envelope, seal

BLOB_SUFFIX = ".blob"
_BATCH_HEADER = struct.Struct("<IIII")  # rows, cols, batch_index, flags
FLAG_TEST = 1


def cid_of(blob: bytes) -> str:
    return digest(blob).hex()


class BlobStore:
    """In-memory CID -> bytes map, optionally spilled to ``<dir>/<cid>.blob``."""

    def __init__(self, directory: str | Path | None = None):
        self.directory = Path(directory) if directory is not None else None
        self._blobs: dict[str, bytes] = {}
        self._meta: dict[str, dict] = {}
        if self.directory is not None:
            self.directory.mkdir(parents=True, exist_ok=True)

    @classmethod
    def load(cls, directory: str | Path) -> "BlobStore":
        """Open an existing spill directory; blobs are read lazily."""
        return cls(directory)

    def put(self, blob: bytes, meta: dict | None = None) -> str:
        blob = bytes(blob)
        cid = cid_of(blob)
        if cid not in self._blobs:
            self._blobs[cid] = blob
            if self.directory is not None:
                (self.directory / f"{cid}{BLOB_SUFFIX}").write_bytes(blob)
        if meta:
            self._meta.setdefault(cid, {}).update(meta)
        return cid

    def get(self, cid: str) -> bytes:
        if cid in self._blobs:
            return self._blobs[cid]
        if self.directory is not None:
            path = self.directory / f"{cid}{BLOB_SUFFIX}"
            if path.is_file():
                blob = path.read_bytes()
                self._blobs[cid] = blob
                return blob
        raise NotFound(cid)

    def meta(self, cid: str) -> dict:
        return dict(self._meta.get(cid, {}))

    def delete(self, cid: str) -> None:
        self._blobs.pop(cid, None)
        self._meta.pop(cid, None)
        if self.directory is not None:
            (self.directory / f"{cid}{BLOB_SUFFIX}").unlink(missing_ok=True)

    def __contains__(self, cid: str) -> bool:
        try:
            self.get(cid)
        except NotFound:
            return False
        return True

    def __len__(self) -> int:
        if self.directory is None:
            return len(self._blobs)
        on_disk = {p.name[: -len(BLOB_SUFFIX)] for p in self.directory.glob(f"*{BLOB_SUFFIX}")}
        return len(on_disk | set(self._blobs))


def put(store: BlobStore, blob: bytes) -> str:
    return store.put(blob)


def get(store: BlobStore, cid: str) -> bytes:
    return store.get(cid)


class OverlayStore(BlobStore):
    """Reads fall through to ``base``; writes stay in this store."""

    def __init__(self, base: BlobStore):
        super().__init__(None)
        self.base = base

    def get(self, cid: str) -> bytes:
        if cid in self._blobs:
            return self._blobs[cid]
        return self.base.get(cid)


@dataclass(frozen=True)
class Batch:
    features: np.ndarray  # (rows, cols) float32
    labels: np.ndarray  # (rows,) int
    batch_index: int
    test: bool = False

    def __post_init__(self):
        if self.features.ndim != 2 or self.features.shape[0] != len(self.labels):
            raise ValueError("features rows must equal label count")


def encode_batch(batch: Batch) -> bytes:
    rows, cols = batch.features.shape
    header = _BATCH_HEADER.pack(rows, cols, batch.batch_index, FLAG_TEST if batch.test else 0)
    feats = np.ascontiguousarray(batch.features, dtype="<f4").tobytes()
    labels = np.ascontiguousarray(batch.labels, dtype="<u4").tobytes()
    return header + feats + labels


def decode_batch(raw: bytes) -> Batch:
    if len(raw) < _BATCH_HEADER.size:
        raise TDMLError("truncated batch")
    rows, cols, index, flags = _BATCH_HEADER.unpack_from(raw)
    n_feat = rows * cols * 4
    expected = _BATCH_HEADER.size + n_feat + rows * 4
    if len(raw) != expected:
        raise TDMLError(f"batch length {len(raw)} != {expected}")
    off = _BATCH_HEADER.size
    feats = np.frombuffer(raw, dtype="<f4", count=rows * cols, offset=off).reshape(rows, cols)
    labels = np.frombuffer(raw, dtype="<u4", count=rows, offset=off + n_feat).astype(np.int64)
    return Batch(feats.astype(np.float32), labels, index, bool(flags & FLAG_TEST))


def store_batch(store: BlobStore, batch: Batch, key: SessionKey) -> str:
    blob = seal(encode_batch(batch), key).to_bytes()
    return store.put(blob, meta={"test": batch.test, "batch_index": batch.batch_index})


def load_batch(store: BlobStore, cid: str, key: SessionKey) -> Batch:
    return decode_batch(open_envelope(store.get(cid), key))


def batch_dataset(
    dataset: tuple[np.ndarray, np.ndarray],
    batch_size: int,
    seed: int,
    key: SessionKey,
    store: BlobStore,
    *,
    test: bool = False,
) -> list[str]:
    """Shuffle, partition into ceil(n / batch_size) batches, seal and store.

    Returns the CIDs in batch order.
    """
    features, labels = dataset
    n = len(labels)
    if n == 0:
        raise ValueError("empty dataset")
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    order = np.random.default_rng(seed).permutation(n)
    cids = []
    for i, start in enumerate(range(0, n, batch_size)):
        idx = order[start:start + batch_size]
        batch = Batch(np.asarray(features[idx], dtype=np.float32), np.asarray(labels[idx]), i, test)
        cids.append(store_batch(store, batch, key))
    return cids


def split_batches(cids: list[str], n: int) -> list[list[str]]:
    """Contiguous chunks; the first ``len % n`` chunks get one extra batch."""
    if n < 1:
        raise ValueError("need at least one split")
    base, extra = divmod(len(cids), n)
    out, start = [], 0
    for i in range(n):
        size = base + (1 if i < extra else 0)
        out.append(list(cids[start:start + size]))
        start += size
    return out
