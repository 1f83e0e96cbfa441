from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from hybridann.errors import BadParam
from hybridann.index import probe_centroids
from hybridann.planner import make_plan
from hybridann.router import (
    LoadTracker,
    VisitOrder,
    hot_block,
    map_to_shards,
    rotation,
    schedule_order,
    shard_sequence,
    split_query,
)


def test_visit_order_must_permute():
    assert VisitOrder(0, (2, 0, 1)).position(0) == 1
    with pytest.raises(BadParam):
        VisitOrder(0, (0, 0, 1))
    with pytest.raises(BadParam):
        VisitOrder(0, (1, 2))


def test_map_to_shards(small_index):
    plan = make_plan(4, 2, 32, small_index.list_sizes())
    q = np.random.default_rng(0).normal(size=32)
    assert len(map_to_shards(q, small_index, plan, 1)) == 1
    full = map_to_shards(q, small_index, plan, small_index.nlist)
    owners = {s for s in plan.shard_of_list}
    assert set(full) == owners
    expect: dict = {}
    for c in probe_centroids(q, small_index, 8):
        expect.setdefault(plan.shard_of_list[c], []).append(int(c))
    assert map_to_shards(q, small_index, plan, 8) == expect


def test_split_query_shapes(small_index):
    q = np.arange(32, dtype=np.float32)
    vec_plan = make_plan(2, 1, 32, small_index.list_sizes())
    chunks = split_query(q, vec_plan, {0: [1], 1: [2, 3]}, VisitOrder(7, (0,)))
    assert len(chunks) == 2 and all(np.array_equal(c.block_values, q) for c in chunks)

    six = make_plan(1, 3, 6, [1])
    parts = split_query(np.arange(6), six, {0: [0]}, VisitOrder(1, (2, 0, 1)))
    assert [c.block_values.size for c in parts] == [2, 2, 2]
    assert [(c.dim_block_id, c.order_index) for c in parts] == [(2, 0), (0, 1), (1, 2)]


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 6), st.integers(1, 4), st.integers(6, 40), st.integers(0, 1000))
def test_chunks_reassemble_query(n_dim, n_vec, d, seed):
    if n_dim > d:
        return
    rng = np.random.default_rng(seed)
    q = rng.normal(size=d).astype(np.float32)
    plan = make_plan(n_vec, n_dim, d, np.ones(8, dtype=int))
    shard_map = {s: [0] for s in rng.choice(n_vec, size=rng.integers(1, n_vec + 1), replace=False).tolist()}
    order = VisitOrder(0, tuple(rng.permutation(n_dim)))
    chunks = split_query(q, plan, shard_map, order)
    assert len(chunks) == len(shard_map) * n_dim
    assert sum(c.block_values.size for c in chunks) == len(shard_map) * d
    for s in shard_map:
        mine = sorted((c for c in chunks if c.shard_id == s), key=lambda c: c.dim_block_id)
        assert np.array_equal(np.concatenate([c.block_values for c in mine]), q)
        assert [order.blocks[c.order_index] for c in mine] == [c.dim_block_id for c in mine]


def test_equal_loads_rotate():
    plan = make_plan(1, 3, 9, [1])
    loads = {n: 5.0 for n in range(3)}
    orders = schedule_order(loads, plan, query_ids=range(6))
    assert [orders[i].blocks for i in range(6)] == [rotation(i, 3) for i in range(6)]
    assert rotation(1, 3) == (1, 2, 0)


def test_hot_block_goes_last():
    plan = make_plan(1, 3, 9, [1])
    loads = {0: 2.0, 1: 1.0, 2: 1.0}
    orders = schedule_order(loads, plan, query_ids=range(5))
    assert all(o.blocks[-1] == 0 for o in orders.values())
    assert hot_block({0: 1.2, 1: 1.0, 2: 1.0}, plan) is None  # below the trigger
    with pytest.raises(BadParam):
        schedule_order({0: 1.0}, plan)


def test_hot_block_share_tracks_overload():
    plan = make_plan(2, 4, 16, [1, 1])
    rng = np.random.default_rng(3)
    last_hot = 0
    hot_cases = 0
    for i in range(100):
        loads = {n: float(v) for n, v in enumerate(rng.uniform(1, 2, size=8))}
        if i % 2:
            loads[5] = 10.0  # node 5 is (shard 1, block 1)
        order = schedule_order(loads, plan, query_ids=[i], start_index=i)[i]
        assert sorted(order.blocks) == [0, 1, 2, 3]
        if hot_block(loads, plan) is not None:
            hot_cases += 1
            last_hot += order.blocks[-1] == hot_block(loads, plan)
    assert last_hot == hot_cases >= 50


def test_load_tracker_half_life():
    t = LoadTracker(2, half_life=64)
    for _ in range(64):
        t.observe([1.0, 0.0])
    assert t.snapshot()[0] == pytest.approx(0.5)
    assert t.snapshot()[1] == 0.0


def test_shard_sequence_is_cyclic():
    shard_map = {0: [1], 2: [3], 3: [4]}
    assert shard_sequence(shard_map, 0, 4) == [0, 2, 3]
    assert shard_sequence(shard_map, 1, 4) == [2, 3, 0]
    assert shard_sequence(shard_map, 3, 4) == [3, 0, 2]
