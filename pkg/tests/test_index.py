from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from hybridann.errors import BadParam, DimMismatch, EmptyDataset, FormatError
from hybridann.index import (
    ClusterIndex,
    TopKResult,
    VectorBatch,
    as_vector,
    assign_to_lists,
    exact_topk,
    exact_topk_probed,
    load_index,
    probe_centroids,
    save_index,
    train_centroids,
)


def quadratic_scan(data, q, k):
    """Independent oracle: python loops, sort on (distance, id)."""
    scored = []
    for i, row in enumerate(np.asarray(data, dtype=np.float64)):
        d = 0.0
        for a, b in zip(row, np.asarray(q, dtype=np.float64)):
            d += (a - b) * (a - b)
        scored.append((d, i))
    scored.sort()
    return [i for _, i in scored[:k]]


def test_vector_batch_validation():
    with pytest.raises(BadParam):
        VectorBatch.from_array(np.zeros((3, 2)), ids=[1, 1, 2])
    with pytest.raises(BadParam):
        VectorBatch.from_array(np.array([[0.0, np.nan]]))
    with pytest.raises(BadParam):
        VectorBatch.from_array(np.zeros(4))
    b = VectorBatch.from_array(np.ones((2, 3)))
    assert b.data.dtype == np.float32 and not b.data.flags.writeable
    with pytest.raises(BadParam):
        as_vector([np.inf, 1.0])
    with pytest.raises(DimMismatch):
        as_vector([1.0, 2.0], dim=3)


def test_four_points_four_lists():
    pts = VectorBatch.from_array([[0, 0], [5, 0], [0, 5], [5, 5]])
    for iters in (1, 3):
        idx = train_centroids(pts, 4, iters=iters, seed=2)
        assert sorted(map(tuple, idx.centroids.tolist())) == sorted(map(tuple, pts.data.tolist()))
        assert (idx.list_sizes() == 1).all()


def test_train_structure_and_determinism():
    rng = np.random.default_rng(0)
    base = VectorBatch.from_array(rng.normal(size=(10_000, 64)))
    a = train_centroids(base, 64, iters=20, seed=7)
    b = train_centroids(base, 64, iters=20, seed=7)
    assert a.list_sizes().sum() == 10_000
    assert (a.list_sizes() > 0).all()
    assert np.array_equal(a.centroids, b.centroids)
    assert all(np.array_equal(x, y) for x, y in zip(a.lists, b.lists))
    ids = np.concatenate(a.lists)
    assert np.array_equal(np.sort(ids), base.ids)


def test_train_errors():
    with pytest.raises(EmptyDataset):
        train_centroids(VectorBatch.from_array(np.empty((0, 3))), 1)
    base = VectorBatch.from_array(np.eye(3))
    with pytest.raises(BadParam):
        train_centroids(base, 0)
    with pytest.raises(BadParam):
        train_centroids(base, 4)
    with pytest.raises(BadParam):
        train_centroids(base, 2, iters=0)


def test_assign_tie_and_exact_match():
    idx = ClusterIndex(np.array([[0, 0], [2, 0], [-2, 0], [0, 7]], dtype=np.float32))
    base = VectorBatch.from_array([[0, 7], [1, 0], [-1, 0]], ids=[10, 11, 12])
    out = assign_to_lists(base, idx)
    assert out.lists[3].tolist() == [10]  # equal to centroid 3
    assert out.lists[0].tolist() == [11, 12]  # equidistant to 0 and 1 / 0 and 2 -> lowest id
    with pytest.raises(DimMismatch):
        assign_to_lists(VectorBatch.from_array(np.zeros((1, 3))), idx)
    with pytest.raises(BadParam):
        assign_to_lists(base, ClusterIndex(idx.centroids, trained=False))


def test_assign_matches_bruteforce(small_base, small_index):
    C = small_index.centroids.astype(np.float64)
    X = small_base.data.astype(np.float64)
    d = ((X[:, None, :] - C[None, :, :]) ** 2).sum(-1)
    expect = np.argmin(d, axis=1)
    got = np.empty(small_base.count, dtype=np.int64)
    for c, lst in enumerate(small_index.lists):
        got[small_base.rows_of(lst)] = c
    assert np.array_equal(got, expect)


def test_probe_centroids(small_index):
    rng = np.random.default_rng(4)
    q = rng.normal(size=32).astype(np.float32)
    all_probes = probe_centroids(q, small_index, small_index.nlist)
    assert sorted(all_probes.tolist()) == list(range(small_index.nlist))
    assert probe_centroids(small_index.centroids[5], small_index, 1).tolist() == [5]
    d = ((small_index.centroids.astype(np.float64) - q) ** 2).sum(1)
    assert probe_centroids(q, small_index, 4).tolist() == sorted(range(small_index.nlist), key=lambda c: (d[c], c))[:4]
    with pytest.raises(BadParam):
        probe_centroids(q, small_index, 0)
    with pytest.raises(DimMismatch):
        probe_centroids(q[:5], small_index, 1)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31 - 1), st.integers(1, 32), st.integers(1, 32))
def test_probe_prefix_property(small_index, seed, a, b):
    a, b = sorted((a, b))
    q = np.random.default_rng(seed).normal(size=32)
    assert probe_centroids(q, small_index, b)[:a].tolist() == probe_centroids(q, small_index, a).tolist()


def test_exact_topk_oracles():
    rng = np.random.default_rng(9)
    base = VectorBatch.from_array(rng.normal(size=(1000, 8)))
    q = rng.normal(size=8)
    assert exact_topk(base, q, 10).ids.tolist() == quadratic_scan(base.data, q, 10)
    self_hit = exact_topk(base, base.data[17], 3)
    assert self_hit.pairs()[0] == (17, 0.0)
    everything = exact_topk(VectorBatch.from_array(base.data[:5]), q, 50)
    assert len(everything) == 5 and everything.is_sorted()
    with pytest.raises(DimMismatch):
        exact_topk(base, q[:3], 1)
    with pytest.raises(BadParam):
        exact_topk(base, q, 0)


@settings(max_examples=40, deadline=None)
@given(
    arrays(np.float32, st.tuples(st.integers(1, 30), st.just(3)), elements=st.integers(-4, 4).map(float)),
    arrays(np.float32, 3, elements=st.integers(-4, 4).map(float)),
)
def test_exact_topk_k1_is_argmin_with_ties(data, q):
    base = VectorBatch.from_array(data)
    got = exact_topk(base, q, 1).ids[0]
    d = ((data.astype(np.float64) - q) ** 2).sum(1)
    assert got == int(np.flatnonzero(d == d.min())[0])
    full = exact_topk(base, q, data.shape[0])
    assert full.is_sorted()
    assert full.ids.tolist() == quadratic_scan(data, q, data.shape[0])


def test_topk_result_rules():
    r = TopKResult.from_candidates([5, 3, 9, 1], [2.0, 1.0, 1.0, 3.0], 3)
    assert r.pairs() == [(3, 1.0), (9, 1.0), (5, 2.0)]
    with pytest.raises(BadParam):
        TopKResult(1, np.array([1, 2]), np.array([0.0, 1.0]))


def test_exact_topk_probed_restricts(small_base, small_index, small_queries):
    q = small_queries.data[0]
    r = exact_topk_probed(small_base, small_index, q, 5, 1)
    lst = small_index.lists[probe_centroids(q, small_index, 1)[0]]
    assert set(r.ids.tolist()) <= set(lst.tolist())
    full = exact_topk_probed(small_base, small_index, q, 5, small_index.nlist)
    assert full.ids.tolist() == exact_topk(small_base, q, 5).ids.tolist()


def test_index_dump_roundtrip(tmp_path, small_base, small_index):
    p = tmp_path / "ix.bin"
    save_index(p, small_index, small_base)
    idx, base = load_index(p)
    assert np.array_equal(idx.centroids, small_index.centroids)
    assert all(np.array_equal(a, b) for a, b in zip(idx.lists, small_index.lists))
    assert np.array_equal(base.data, small_base.data) and np.array_equal(base.ids, small_base.ids)
    save_index(tmp_path / "again.bin", idx, base)
    assert (tmp_path / "again.bin").read_bytes() == p.read_bytes()
    raw = p.read_bytes()
    (tmp_path / "cut.bin").write_bytes(raw[:-7])
    with pytest.raises(FormatError):
        load_index(tmp_path / "cut.bin")
    (tmp_path / "bad.bin").write_bytes(b"NOTIDX" + raw[6:])
    with pytest.raises(FormatError):
        load_index(tmp_path / "bad.bin")
