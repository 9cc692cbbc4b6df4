import hashlib
from collections import Counter

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from tdml.errors import AuthFailure, NotFound
from tdml.ledger import SessionKey
from tdml.store import (
    Batch, BlobStore, OverlayStore, batch_dataset, cid_of, decode_batch, encode_batch, load_batch,
    split_batches,
)

KEY = SessionKey(hashlib.sha256(b"job").digest())


def dataset(n: int, d: int = 3, seed: int = 0):
    rng = np.random.default_rng(seed)
    return rng.normal(size=(n, d)).astype(np.float32), rng.integers(0, 4, size=n)


def test_put_get_round_trip_and_dedup():
    s = BlobStore()
    cid = s.put(b"hello")
    assert cid == hashlib.sha256(b"hello").hexdigest()
    assert s.get(cid) == b"hello"
    assert s.put(b"hello") == cid and len(s) == 1


def test_unknown_cid():
    with pytest.raises(NotFound):
        BlobStore().get("00" * 32)


def test_one_byte_difference_gives_distinct_cids():
    corpus = [bytes([i]) * 8 for i in range(64)] + [b"abc", b"abd", b"abc\x00"]
    assert len({cid_of(b) for b in corpus}) == len(corpus)


def test_spill_directory(tmp_path):
    s = BlobStore(tmp_path)
    cid = s.put(b"on disk")
    assert (tmp_path / f"{cid}.blob").read_bytes() == b"on disk"
    fresh = BlobStore.load(tmp_path)
    assert fresh.get(cid) == b"on disk" and cid in fresh and len(fresh) == 1
    fresh.delete(cid)
    assert cid not in BlobStore.load(tmp_path)


def test_overlay_keeps_writes_local():
    base = BlobStore()
    old = base.put(b"old")
    over = OverlayStore(base)
    new = over.put(b"new")
    assert over.get(old) == b"old" and over.get(new) == b"new"
    assert new not in base


@given(st.integers(1, 20), st.integers(1, 6), st.integers(0, 1000), st.booleans())
def test_batch_codec_round_trip(rows, cols, index, test):
    x, y = dataset(rows, cols, seed=index)
    back = decode_batch(encode_batch(Batch(x, y, index, test)))
    assert np.array_equal(back.features, x) and np.array_equal(back.labels, y)
    assert back.batch_index == index and back.test == test


def test_batch_header_is_sixteen_bytes():
    x, y = dataset(5, 3)
    assert len(encode_batch(Batch(x, y, 0))) == 16 + 5 * 3 * 4 + 5 * 4


def test_batch_shape_invariant():
    with pytest.raises(ValueError):
        Batch(np.zeros((3, 2), np.float32), np.zeros(4, int), 0)


@pytest.mark.parametrize("n,bs,expected,last", [(100, 10, 10, 10), (105, 10, 11, 5)])
def test_ceiling_partition(n, bs, expected, last):
    s = BlobStore()
    cids = batch_dataset(dataset(n), bs, seed=1, key=KEY, store=s)
    assert len(cids) == expected
    assert len(load_batch(s, cids[-1], KEY).labels) == last


def test_batching_is_deterministic():
    a = batch_dataset(dataset(50), 8, seed=3, key=SessionKey(KEY.key), store=BlobStore())
    b = batch_dataset(dataset(50), 8, seed=3, key=SessionKey(KEY.key), store=BlobStore())
    assert a == b


def test_stored_batches_are_sealed():
    s = BlobStore()
    cid = batch_dataset(dataset(10), 10, seed=0, key=SessionKey(KEY.key), store=s)[0]
    with pytest.raises(AuthFailure):
        load_batch(s, cid, SessionKey(hashlib.sha256(b"other").digest()))
    assert isinstance(load_batch(s, cid, KEY), Batch)


@given(st.integers(1, 80), st.integers(1, 17), st.integers(0, 50))
def test_batches_reassemble_the_dataset(n, bs, seed):
    x, y = dataset(n, seed=seed)
    s = BlobStore()
    cids = batch_dataset((x, y), bs, seed=seed, key=SessionKey(KEY.key), store=s)
    rows = Counter()
    for cid in cids:
        b = load_batch(s, cid, KEY)
        rows.update((r.tobytes(), int(l)) for r, l in zip(b.features, b.labels))
    assert rows == Counter((r.tobytes(), int(l)) for r, l in zip(x, y))


def test_empty_dataset_and_bad_batch_size():
    with pytest.raises(ValueError):
        batch_dataset(dataset(0), 4, 0, KEY, BlobStore())
    with pytest.raises(ValueError):
        batch_dataset(dataset(4), 0, 0, KEY, BlobStore())


@given(st.lists(st.integers(), max_size=40), st.integers(1, 9))
def test_split_is_contiguous_and_balanced(items, n):
    parts = split_batches(items, n)
    assert len(parts) == n and sum(parts, []) == items
    sizes = [len(p) for p in parts]
    assert max(sizes) - min(sizes) <= 1 and sizes == sorted(sizes, reverse=True)
