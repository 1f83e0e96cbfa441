"""Pipelined query execution with dimension-level pruning.

Execution per query:

1. Prewarm: exact distances to a few client-cached members of the probed lists
   seed a bounded max-heap, so the pruning threshold starts finite.
2. Vector pipeline: the query's probed shards are visited one after another.
   Query batches start on different shards so they overlap (batch ``j`` starts at
   shard ``j mod n_vec``); every finished shard tightens the heap before the next.
3. Dimension pipeline: inside a shard the dimension blocks are visited in the
   query's visit order. After each block, candidates whose running sum exceeds
   the threshold are dropped and never reach later blocks.

This module is the single-process executor; the distributed runtime drives the
same kernel calls through messages and must return the same ids.
"""

from __future__ import annotations

import heapq
import math
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .errors import BadParam, MetricMismatch
from .index import ClusterIndex, TopKResult, VectorBatch, probe_centroids
from .kernel import DimBlockSpec, advance_block, blocked_sq_dists
from .planner import PartitionPlan
from .router import LoadTracker, VisitOrder, hot_block, map_to_shards, order_for, shard_sequence


class TopKHeap:
    """Bounded max-heap of (squared distance, id) with unique ids."""

    def __init__(self, k: int):
        if k < 1:
            raise BadParam("k must be >= 1")
        self.k = k
        self._heap: list[tuple[float, int]] = []  # (-dist, -id): root is the worst entry
        self._members: dict[int, float] = {}

    def __len__(self) -> int:
        return len(self._heap)

    @property
    def tau_sq(self) -> float:
        if len(self._heap) < self.k:
            return math.inf
        return -self._heap[0][0]

    def worst(self) -> tuple[float, int] | None:
        if not self._heap:
            return None
        d, i = self._heap[0]
        return -d, -i

    def push(self, vid: int, dist: float) -> bool:
        """Offer one candidate; returns True if the heap changed."""
        vid, dist = int(vid), float(dist)
        old = self._members.get(vid)
        if old is not None:
            if dist >= old:
                return False
            self._heap.remove((-old, -vid))
            heapq.heapify(self._heap)
            del self._members[vid]
        if len(self._heap) < self.k:
            heapq.heappush(self._heap, (-dist, -vid))
        elif (dist, vid) < self.worst():
            _, evicted = heapq.heapreplace(self._heap, (-dist, -vid))
            del self._members[-evicted]
        else:
            return False
        self._members[vid] = dist
        return True

    def result(self) -> TopKResult:
        ids = np.fromiter(self._members.keys(), dtype=np.int64, count=len(self._members))
        dists = np.fromiter(self._members.values(), dtype=np.float64, count=len(self._members))
        return TopKResult.from_candidates(ids, dists, self.k)

    def copy(self) -> "TopKHeap":
        h = TopKHeap(self.k)
        h._heap = list(self._heap)
        h._members = dict(self._members)
        return h


@dataclass
class PruneState:
    """Per-query heap plus the threshold version it implies."""

    heap: TopKHeap
    epoch: int = 0

    @property
    def tau_sq(self) -> float:
        return self.heap.tau_sq

    def offer(self, ids, dists) -> bool:
        before = self.heap.tau_sq
        for i, d in zip(np.asarray(ids).tolist(), np.asarray(dists).tolist()):
            self.heap.push(i, d)
        tightened = self.heap.tau_sq < before
        if tightened:
            self.epoch += 1
        return tightened

    def copy(self) -> "PruneState":
        return PruneState(self.heap.copy(), self.epoch)


class PrewarmCache:
    """Seeded sample of members from every inverted list, held by the client."""

    def __init__(self, members: list[np.ndarray], vectors: list[np.ndarray]):
        self.members = members
        self.vectors = vectors

    @classmethod
    def build(cls, base: VectorBatch, index: ClusterIndex, per_list: int, seed: int = 0) -> "PrewarmCache":
        rng = np.random.default_rng(seed)
        members, vectors = [], []
        for lst in index.lists:
            take = min(per_list, lst.size)
            pick = np.sort(rng.choice(lst.size, size=take, replace=False)) if take else np.empty(0, np.int64)
            ids = lst[pick]
            members.append(ids)
            vectors.append(base.data[base.rows_of(ids)] if take else np.empty((0, base.dim), np.float32))
        return cls(members, vectors)

    @property
    def resident_floats(self) -> int:
        return int(sum(v.size for v in self.vectors))

    def pool(self, probes: Sequence[int], rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
        """Cached members of the nearest list first, then the other probed lists, shuffled."""
        if len(probes) == 0:
            return np.empty(0, np.int64), np.empty((0, 0), np.float32)
        first = int(probes[0])
        p1 = rng.permutation(self.members[first].size)
        ids = [self.members[first][p1]]
        vecs = [self.vectors[first][p1]]
        rest_ids = [self.members[int(c)] for c in probes[1:]]
        if rest_ids:
            rest_vecs = np.concatenate([self.vectors[int(c)] for c in probes[1:]])
            rest_ids = np.concatenate(rest_ids)
            p2 = rng.permutation(rest_ids.size)
            ids.append(rest_ids[p2])
            vecs.append(rest_vecs[p2])
        return np.concatenate(ids), np.concatenate(vecs)


def prewarm_one(
    q,
    probes: Sequence[int],
    cache: PrewarmCache,
    sample_size: int,
    k: int,
    spec: DimBlockSpec,
    order: Sequence[int] | None = None,
    seed: int = 0,
    query_id: int = 0,
) -> PruneState:
    state = PruneState(TopKHeap(k))
    if sample_size <= 0:
        return state
    rng = np.random.default_rng([seed, query_id])
    ids, vecs = cache.pool(probes, rng)
    ids, vecs = ids[:sample_size], vecs[:sample_size]
    if ids.size:
        # same block-by-block summation as the pipeline so each id has one distance
        state.offer(ids, blocked_sq_dists(q, vecs, spec, order))
    return state


def prewarm_heap(
    queries: VectorBatch,
    index: ClusterIndex,
    sample_size: int,
    k: int,
    *,
    cache: PrewarmCache,
    nprobe: int,
    spec: DimBlockSpec | None = None,
    seed: int = 0,
) -> dict[int, PruneState]:
    """Initial heaps for every query from client-cached members of its probed lists."""
    if sample_size < 0 or k < 1:
        raise BadParam("sample_size must be >= 0 and k >= 1")
    spec = spec or DimBlockSpec.equal(index.dim, 1)
    out = {}
    for qid, q in zip(queries.ids.tolist(), queries.data):
        probes = probe_centroids(q, index, nprobe)
        out[qid] = prewarm_one(q, probes, cache, sample_size, k, spec, seed=seed, query_id=qid)
    return out


@dataclass
class SliceCounts:
    """Candidates entering each slice position (visit-order index) of the dimension pipeline."""

    entered: np.ndarray
    work: float = 0.0

    @classmethod
    def zeros(cls, n_dim: int) -> "SliceCounts":
        return cls(np.zeros(n_dim, dtype=np.int64))

    def add(self, other: "SliceCounts") -> None:
        self.entered += other.entered
        self.work += other.work


@dataclass
class DimOutcome:
    ids: np.ndarray
    dists: np.ndarray
    counts: SliceCounts
    per_block_work: np.ndarray  # floats processed per dimension block id


def dimension_pipeline(
    q,
    cand_ids: np.ndarray,
    cand_vectors: np.ndarray,
    spec: DimBlockSpec,
    order: Sequence[int],
    state: PruneState,
    prune: bool = True,
) -> DimOutcome:
    """Run one (query, shard) through its dimension blocks in visit order."""
    q = np.asarray(q, dtype=np.float32)
    n_dim = spec.block_count
    counts = SliceCounts.zeros(n_dim)
    per_block = np.zeros(n_dim)
    alive = np.arange(cand_ids.size)
    s_sq = np.zeros(cand_ids.size)
    for pos, b in enumerate(order):
        counts.entered[pos] = alive.size
        if alive.size == 0:
            break
        sl = spec.slice(b)
        keep = advance_block(q[sl], cand_vectors[alive, sl], s_sq, state.tau_sq if prune else math.inf, prune)
        per_block[b] += alive.size * spec.width(b)
        alive, s_sq = alive[keep], s_sq[keep]
    counts.work = float(per_block.sum())
    return DimOutcome(cand_ids[alive], s_sq, counts, per_block)


def local_topk(ids: np.ndarray, dists: np.ndarray, k: int) -> TopKResult:
    return TopKResult.from_candidates(ids, dists, k)


def merge_topk(partials: Iterable[TopKResult], k: int) -> TopKResult:
    """Global k best under (distance, id); duplicate ids keep their minimum distance."""
    partials = list(partials)
    metrics = {p.metric for p in partials}
    if len(metrics) > 1:
        raise MetricMismatch(f"cannot merge results of metrics {sorted(metrics)}")
    metric = metrics.pop() if metrics else "l2"
    if not partials:
        return TopKResult(k, np.empty(0, np.int64), np.empty(0), metric)
    ids = np.concatenate([p.ids for p in partials])
    dists = np.concatenate([p.dists for p in partials])
    order = np.lexsort((dists, ids))
    ids, dists = ids[order], dists[order]
    first = np.ones(ids.size, dtype=bool)
    first[1:] = ids[1:] != ids[:-1]
    return TopKResult.from_candidates(ids[first], dists[first], k, metric)


@dataclass(frozen=True)
class StagePlan:
    """Work items ``(query, shard, block)`` per node for one pipeline stage."""

    stage: int
    assignments: dict[int, tuple[tuple[int, int, int], ...]]

    def is_legal(self) -> bool:
        seen = set()
        for items in self.assignments.values():
            for q, s, _ in items:
                if (q, s) in seen:
                    return False
                seen.add((q, s))
        return True


def build_stage_plans(
    plan: PartitionPlan,
    orders: dict[int, VisitOrder],
    visits: dict[int, Sequence[int]],
) -> list[StagePlan]:
    """Lock-step schedule: in stage t every active (query, shard) runs its t-th block.

    ``visits[q]`` lists the shards query ``q`` visits, one per vector round; the
    rounds run back to back so stage ``r * n_dim + t`` is block ``t`` of round ``r``.
    """
    stages: list[StagePlan] = []
    rounds = max((len(v) for v in visits.values()), default=0)
    for r in range(rounds):
        for t in range(plan.n_dim):
            per_node: dict[int, list[tuple[int, int, int]]] = {}
            for q in sorted(visits):
                if r < len(visits[q]):
                    s = visits[q][r]
                    b = orders[q].blocks[t]
                    per_node.setdefault(plan.node(s, b), []).append((q, s, b))
            stages.append(StagePlan(r * plan.n_dim + t, {n: tuple(v) for n, v in sorted(per_node.items())}))
    return stages


@dataclass
class EngineResult:
    results: dict[int, TopKResult]
    counts: SliceCounts
    node_work: np.ndarray
    orders: dict[int, VisitOrder] = field(default_factory=dict)
    visits: dict[int, list[int]] = field(default_factory=dict)
    pruned_audit: list[tuple[int, int, float]] = field(default_factory=list)


def batch_of(position: int, q_count: int, n_vec: int, batch_size: int | None = None) -> int:
    size = batch_size or max(1, math.ceil(q_count / n_vec))
    return position // size


def query_pipeline(
    queries: VectorBatch,
    base: VectorBatch,
    index: ClusterIndex,
    plan: PartitionPlan,
    k: int,
    nprobe: int,
    *,
    prune: bool = True,
    cache: PrewarmCache | None = None,
    sample_size: int | None = None,
    fixed_order: Sequence[int] | None = None,
    stage_shift: int = 0,
    batch_size: int | None = None,
    seed: int = 0,
    audit: bool = False,
) -> EngineResult:
    """Single-process execution of the full prewarm / vector / dimension pipeline."""
    sample_size = 2 * k if sample_size is None else sample_size
    if cache is None:
        cache = PrewarmCache.build(base, index, max(sample_size, 1), seed)
    spec = plan.dim_spec
    tracker = LoadTracker(plan.n_nodes)
    counts = SliceCounts.zeros(plan.n_dim)
    node_work = np.zeros(plan.n_nodes)
    results, orders, visits = {}, {}, {}
    audit_log = []

    for pos, (qid, q) in enumerate(zip(queries.ids.tolist(), queries.data)):
        probes = probe_centroids(q, index, nprobe)
        shard_map = map_to_shards(q, index, plan, nprobe)
        if fixed_order is not None:
            order = VisitOrder(qid, tuple(fixed_order))
        else:
            order = order_for(pos, plan, hot_block(tracker.snapshot(), plan), qid)
        seq = shard_sequence(shard_map, batch_of(pos, queries.count, plan.n_vec, batch_size) + stage_shift, plan.n_vec)
        state = prewarm_one(q, probes, cache, sample_size, k, spec, order.blocks, seed, qid)
        if not prune:
            state = PruneState(TopKHeap(k))
        query_work = np.zeros(plan.n_nodes)
        for shard in seq:
            ids = np.concatenate([index.lists[c] for c in shard_map[shard]])
            vecs = base.data[base.rows_of(ids)]
            out = dimension_pipeline(q, ids, vecs, spec, order.blocks, state, prune)
            if audit and prune:
                dropped = np.setdiff1d(ids, out.ids)
                exact = blocked_sq_dists(q, base.data[base.rows_of(dropped)], spec)
                audit_log.extend((qid, int(i), float(d)) for i, d in zip(dropped, exact))
            local = local_topk(out.ids, out.dists, k)
            state.offer(local.ids, local.dists)
            counts.add(out.counts)
            for b in range(plan.n_dim):
                query_work[plan.node(shard, b)] += out.per_block_work[b]
        node_work += query_work
        tracker.observe(query_work)
        results[qid] = state.heap.result()
        orders[qid] = order
        visits[qid] = seq
    return EngineResult(results, counts, node_work, orders, visits, audit_log)
