import hashlib

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from tdml.errors import InsufficientMemory, MissingCache
from tdml.ledger import SessionKey
from tdml.model import (
    Arch, backward, copy_params, forward, init_model, layer_memory, loss_and_grad, params_equal,
    train_step,
)
from tdml.pipeline import (
    NodeSpec, PipelineState, Transport, assemble, batch_order, make_shards, pack_layers,
    pipeline_backward, pipeline_forward, probe_gradients, run_epoch, shard_model,
)
from tdml.store import BlobStore, batch_dataset, load_batch

DEEP = Arch((16, 32, 32, 32, 32, 32, 32, 32, 4))


def key(tag=b"k"):
    return SessionKey(hashlib.sha256(tag).digest())


def specs(*mems):
    return [NodeSpec(f"t{i}", int(m)) for i, m in enumerate(mems)]


def even_split(arch: Arch, n: int):
    """Specs whose memories equal the bytes of n near-equal contiguous layer groups."""
    per = layer_memory(arch).per_layer
    bounds = np.linspace(0, len(per), n + 1).round().astype(int)
    return specs(*[sum(per[a:b]) for a, b in zip(bounds[:-1], bounds[1:])])


def setup_data(n=200, bs=20, seed=0):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(n, 16)).astype(np.float32)
    y = rng.integers(0, 4, n)
    store, k = BlobStore(), key()
    return store, k, batch_dataset((x, y), bs, seed, SessionKey(k.key), store)


# ---- sharding -------------------------------------------------------------

def test_greedy_trace_by_hand():
    a = pack_layers([160, 160, 160], specs(160, 160, 1e9))
    assert a.ranges == (("t0", 0, 1), ("t1", 1, 2), ("t2", 2, 3))


def test_symmetric_split_of_uniform_model():
    arch = Arch((8, 8, 8, 8, 8))
    total = layer_memory(arch).total
    assert len(set(layer_memory(arch).per_layer)) == 1
    a = shard_model(arch, specs(total // 2, total // 2))
    assert [(lo, hi) for _, lo, hi in a.ranges] == [(0, 2), (2, 4)]


def test_one_large_trainer_takes_everything():
    a = shard_model(DEEP, specs(layer_memory(DEEP).total, 10 ** 9))
    assert a.ranges == (("t0", 0, DEEP.n_layers),)


def test_insufficient_memory_names_first_unplaced_layer():
    with pytest.raises(InsufficientMemory) as exc:
        pack_layers([100, 100, 100], specs(150, 150))
    assert exc.value.first_unplaced == 2


@settings(max_examples=60)
@given(st.lists(st.integers(1, 50), min_size=2, max_size=8), st.lists(st.integers(1, 200), min_size=1, max_size=8))
def test_packing_is_complete_and_respects_memory(profile, mems):
    try:
        a = pack_layers(profile, specs(*mems))
    except InsufficientMemory as exc:
        assert exc.first_unplaced is not None
        return
    assert a.is_valid(len(profile))
    cap = {s.uuid: s.memory_bytes for s in specs(*mems)}
    for t, lo, hi in a.ranges:
        assert sum(profile[lo:hi]) <= cap[t]


# ---- forward / backward ---------------------------------------------------

def test_shards_reassemble_parameters():
    model = init_model(DEEP, 0)
    shards = make_shards(model, shard_model(model, even_split(DEEP, 4)))
    assert params_equal(assemble(shards), model.params)
    assert shards[1].boundary_dims == (32, 32)


@pytest.mark.parametrize("n", [1, 2, 4, 8])
def test_sharded_forward_and_backward_are_bit_exact(n):
    model = init_model(DEEP, 1)
    shards = make_shards(model, shard_model(model, even_split(DEEP, n)))
    assert len(shards) == n
    x = np.random.default_rng(0).normal(size=(9, 16))
    y = np.arange(9) % 4
    logits, caches = pipeline_forward(shards, x, Transport(key()))
    ref_logits, inputs = forward(model.params, x)
    assert np.array_equal(logits, ref_logits)
    for i, s in enumerate(shards[1:], start=1):
        assert caches[i][0].shape == (9, s.params[0][0].shape[1])
    _, dl = loss_and_grad(logits, y)
    records = pipeline_backward(shards, caches, dl, Transport(key()))
    ref, _ = backward(model.params, inputs, dl)
    got = [g for r in records for g in r.grads]
    assert params_equal(got, ref)
    assert [r.lo for r in records] == [s.lo for s in shards]


def test_zero_upstream_gives_zero_records():
    model = init_model(DEEP, 0)
    shards = make_shards(model, shard_model(model, even_split(DEEP, 4)))
    x = np.random.default_rng(0).normal(size=(3, 16))
    _, caches = pipeline_forward(shards, x)
    for rec in pipeline_backward(shards, caches, np.zeros((3, 4))):
        assert all(not gw.any() and not gb.any() for gw, gb in rec.grads)


def test_backward_without_caches():
    model = init_model(DEEP, 0)
    shards = make_shards(model, shard_model(model, even_split(DEEP, 2)))
    with pytest.raises(MissingCache):
        pipeline_backward(shards, None, np.zeros((1, 4)))


def test_transport_is_sealed():
    t = Transport(key())
    arr = np.arange(6, dtype=float).reshape(2, 3)
    wire = t.send(arr)
    assert arr.tobytes() not in wire
    assert np.array_equal(t.receive(wire), arr) and t.messages == 1


# ---- epochs ---------------------------------------------------------------

def single_node_epoch(params, store, k, cids, lr, order_seed):
    losses = []
    for idx in batch_order(len(cids), order_seed):
        b = load_batch(store, cids[idx], k)
        params, loss = train_step(params, b.features.astype(np.float64), b.labels, lr)
        losses.append(loss)
    return params, float(np.mean(losses))


def state_for(model, n, store, k, hooks=None):
    shards = make_shards(model, shard_model(model, even_split(model.arch, n)))
    return PipelineState("ps", shards, store, SessionKey(k.key), Transport(key(b"wire")), hooks or {})


def test_zero_learning_rate_keeps_model():
    store, k, cids = setup_data()
    model = init_model(DEEP, 0)
    res = run_epoch(state_for(model, 2, store, k), cids, 0.0, order_seed=1)
    assert params_equal(res.params, model.params) and res.batches == len(cids)


def test_two_shard_epoch_equals_single_node():
    store, k, cids = setup_data()
    model = init_model(DEEP, 0)
    state = state_for(model, 2, store, k)
    ref = copy_params(model.params)
    for epoch in range(1, 3):
        res = run_epoch(state, cids, 0.1, epoch=epoch, order_seed=epoch)
        ref, loss = single_node_epoch(ref, store, k, cids, 0.1, epoch)
        assert params_equal(res.params, ref) and res.mean_loss == loss


def test_uploaded_record_is_mean_gradient_at_epoch_start():
    store, k, cids = setup_data(n=60, bs=20)
    model = init_model(DEEP, 0)
    res = run_epoch(state_for(model, 2, store, k), cids, 0.1, epoch=3, order_seed=0)
    total = None
    for cid in cids:
        b = load_batch(store, cid, k)
        logits, inputs = forward(model.params, b.features.astype(np.float64))
        g, _ = backward(model.params, inputs, loss_and_grad(logits, b.labels)[1])
        total = g if total is None else [(a + c, d + e) for (a, d), (c, e) in zip(total, g)]
    expected = [(gw / len(cids), gb / len(cids)) for gw, gb in total]
    got = [g for t in sorted(res.records, key=lambda t: res.records[t].lo) for g in res.records[t].grads]
    for (a, b), (c, d) in zip(got, expected):
        np.testing.assert_allclose(a, c, rtol=1e-12, atol=1e-15)
        np.testing.assert_allclose(b, d, rtol=1e-12, atol=1e-15)
    assert all(r.epoch == 3 for r in res.records.values())


def test_hooks_alter_training_and_upload():
    store, k, cids = setup_data(n=60, bs=20)
    model = init_model(DEEP, 0)
    seen = []

    def zero(rec, step):
        seen.append(step)
        return type(rec)([(gw * 0, gb * 0) for gw, gb in rec.grads], rec.epoch, rec.trainer, rec.lo)

    state = state_for(model, 2, store, k, hooks={"t0": zero})
    res = run_epoch(state, cids, 0.5, order_seed=0)
    lo, hi = res.records["t0"].lo, res.records["t0"].hi
    assert params_equal(res.params[lo:hi], model.params[lo:hi])
    assert not params_equal(res.params[hi:], model.params[hi:])
    assert sorted(seen) == [-1, 0, 1, 2]
    assert all(not gw.any() for gw, _ in res.records["t0"].grads)


def test_probe_does_not_move_parameters():
    store, k, cids = setup_data(n=40, bs=20)
    model = init_model(DEEP, 0)
    state = state_for(model, 4, store, k)
    probe_gradients(state, cids)
    assert params_equal(assemble(state.shards), model.params)
