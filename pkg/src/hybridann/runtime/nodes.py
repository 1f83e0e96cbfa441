"""Worker and client node state machines.

``node_step(state, msg)`` never performs I/O and never mutates ``state``: it
returns a new state, the outbound messages, and trace records describing the
work done. Resident vector data is shared read-only between successive states.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from ..errors import BlockNotResident, UnknownNode
from ..index import ClusterIndex, TopKResult, VectorBatch, probe_centroids
from ..kernel import advance_block
from ..pipeline import PrewarmCache, PruneState, TopKHeap, batch_of, prewarm_one
from ..planner import PartitionPlan
from ..router import LoadTracker, VisitOrder, hot_block, map_to_shards, order_for, shard_sequence, split_query
from .messages import (
    Handoff,
    Kind,
    Message,
    TopKPartial,
    decode_chunk,
    decode_handoff,
    decode_threshold,
    decode_topk,
    encode_chunk,
    encode_handoff,
    encode_topk,
    encode_threshold,
)

CONTROL_START = b"start"


@dataclass(frozen=True)
class WorkerCell:
    """The (shard, dimension block) slice of the base data held by one node."""

    shard: int
    block: int
    lo: int
    hi: int
    rows: np.ndarray  # (shard rows, hi - lo) float32, read-only
    ids: np.ndarray  # (shard rows,) int64
    offsets: dict  # cluster id -> (start, end) row range

    @property
    def width(self) -> int:
        return self.hi - self.lo

    @property
    def resident_floats(self) -> int:
        return int(self.rows.size)

    def candidate_rows(self, clusters: Sequence[int]) -> np.ndarray:
        ranges = []
        for c in clusters:
            if c not in self.offsets:
                raise BlockNotResident(f"cluster {c} is not stored in shard {self.shard}")
            start, end = self.offsets[c]
            ranges.append(np.arange(start, end, dtype=np.int64))
        return np.concatenate(ranges) if ranges else np.empty(0, np.int64)


@dataclass(frozen=True)
class WorkerState:
    node_id: int
    client_id: int
    plan: PartitionPlan
    cell: WorkerCell
    k: int
    prune: bool = True
    audit: bool = False  # list pruned candidate ids in trace records
    chunks: dict = field(default_factory=dict)  # qid -> (QueryChunk, tau)
    handoffs: dict = field(default_factory=dict)  # qid -> Handoff
    tau_cache: dict = field(default_factory=dict)  # qid -> tightest tau seen
    work: int = 0


@dataclass(frozen=True)
class ClientConfig:
    node_id: int
    plan: PartitionPlan
    index: ClusterIndex
    queries: VectorBatch
    k: int
    nprobe: int
    cache: PrewarmCache
    prune: bool = True
    sample_size: int = 20
    seed: int = 0
    fixed_order: tuple[int, ...] | None = None
    stage_shift: int = 0
    batch_size: int | None = None
    window: int | None = None
    hot_factor: float = 1.25


@dataclass(frozen=True)
class ActiveQuery:
    pos: int
    state: PruneState
    order: tuple[int, ...]
    remaining: tuple[int, ...]
    shard_map: dict
    work: np.ndarray


@dataclass(frozen=True)
class ClientState:
    cfg: ClientConfig
    next_pos: int = 0
    active: dict = field(default_factory=dict)  # pos -> ActiveQuery
    ewma: np.ndarray | None = None
    results: dict = field(default_factory=dict)  # pos -> TopKResult
    orders: dict = field(default_factory=dict)  # pos -> visit order

    @property
    def complete(self) -> bool:
        return len(self.results) == self.cfg.queries.count

    def results_by_id(self) -> dict[int, TopKResult]:
        ids = self.cfg.queries.ids
        return {int(ids[p]): r for p, r in sorted(self.results.items())}


# -- worker -------------------------------------------------------------------


def _worker_compute(state: WorkerState, qid: int) -> tuple[WorkerState, list[Message], list[dict]]:
    chunk, chunk_tau = state.chunks[qid]
    handoff = state.handoffs.get(qid)
    cell = state.cell
    tau = min(chunk_tau, state.tau_cache.get(qid, math.inf), handoff.tau if handoff else math.inf)
    if chunk.order_index == 0:
        rows = cell.candidate_rows(chunk.probe_lists)
        s_sq = np.zeros(rows.size)
        work_log: tuple = ()
    else:
        rows, s_sq, work_log = handoff.rows, handoff.s_sq.copy(), handoff.work
    order = chunk.order if chunk.order_index == 0 else handoff.order
    n_in = rows.size
    keep = advance_block(chunk.block_values, cell.rows[rows], s_sq, tau if state.prune else math.inf, state.prune)
    dropped = cell.ids[rows[~keep]] if state.audit else None
    rows, s_sq = rows[keep], s_sq[keep]
    work = n_in * cell.width
    work_log = work_log + ((state.node_id, work),)

    if chunk.order_index < len(order) - 1:
        nxt = state.plan.node(cell.shard, order[chunk.order_index + 1])
        payload = encode_handoff(Handoff(qid, cell.shard, chunk.order_index + 1, order, tau, work_log, rows, s_sq))
        out = [Message(Kind.PARTIAL_HANDOFF, state.node_id, nxt, payload)]
    else:
        local = TopKResult.from_candidates(cell.ids[rows], s_sq, state.k)
        tau_out = tau
        if len(local) == state.k:
            tau_out = min(tau, float(local.dists[-1]))
        payload = encode_topk(TopKPartial(qid, cell.shard, tau_out, work_log, local.ids, local.dists))
        out = [Message(Kind.TOPK_PARTIAL, state.node_id, state.client_id, payload)]

    chunks = dict(state.chunks)
    handoffs = dict(state.handoffs)
    tau_cache = dict(state.tau_cache)
    del chunks[qid]
    handoffs.pop(qid, None)
    tau_cache.pop(qid, None)
    rec = {
        "ev": "compute",
        "node": state.node_id,
        "q": qid,
        "shard": cell.shard,
        "block": cell.block,
        "slice": chunk.order_index,
        "n_in": int(n_in),
        "n_out": int(rows.size),
        "tau": tau,
        "work": int(work),
    }
    if dropped is not None:
        rec["pruned_ids"] = dropped.tolist()
    new = replace(state, chunks=chunks, handoffs=handoffs, tau_cache=tau_cache, work=state.work + work)
    return new, out, [rec]


def worker_step(state: WorkerState, msg: Message):
    if msg.kind == Kind.QUERY_CHUNK:
        chunk, tau = decode_chunk(msg.payload)
        if chunk.shard_id != state.cell.shard or chunk.dim_block_id != state.cell.block:
            raise BlockNotResident(
                f"node {state.node_id} holds ({state.cell.shard}, {state.cell.block}), "
                f"got chunk for ({chunk.shard_id}, {chunk.dim_block_id})"
            )
        chunks = dict(state.chunks)
        chunks[chunk.query_id] = (chunk, tau)
        state = replace(state, chunks=chunks)
        if chunk.order_index == 0 or chunk.query_id in state.handoffs:
            return _worker_compute(state, chunk.query_id)
        return state, [], []
    if msg.kind == Kind.PARTIAL_HANDOFF:
        h = decode_handoff(msg.payload)
        if h.shard != state.cell.shard:
            raise BlockNotResident(f"handoff for shard {h.shard} reached node {state.node_id}")
        handoffs = dict(state.handoffs)
        handoffs[h.query_id] = h
        state = replace(state, handoffs=handoffs)
        if h.query_id in state.chunks:
            return _worker_compute(state, h.query_id)
        return state, [], []
    if msg.kind == Kind.THRESHOLD_UPDATE:
        qid, tau = decode_threshold(msg.payload)
        if tau >= state.tau_cache.get(qid, math.inf):
            return state, [], []
        cache = dict(state.tau_cache)
        cache[qid] = tau
        return replace(state, tau_cache=cache), [], []
    return state, [], []


# -- client -------------------------------------------------------------------


def _dispatch_shard(cfg: ClientConfig, pos: int, aq: ActiveQuery, shard: int) -> tuple[list[Message], list[dict]]:
    q = cfg.queries.data[pos]
    order = VisitOrder(pos, aq.order)
    chunks = split_query(q, cfg.plan, {shard: aq.shard_map[shard]}, order)
    tau = aq.state.tau_sq if cfg.prune else math.inf
    out = [
        Message(
            Kind.QUERY_CHUNK,
            cfg.node_id,
            cfg.plan.node(c.shard_id, c.dim_block_id),
            encode_chunk(c, tau),
        )
        for c in chunks
    ]
    rec = {"ev": "dispatch", "q": pos, "shard": shard, "tau": tau, "epoch": aq.state.epoch, "work": 0}
    return out, [rec]


def _start_query(state: ClientState, pos: int):
    cfg = state.cfg
    q = cfg.queries.data[pos]
    plan = cfg.plan
    probes = probe_centroids(q, cfg.index, cfg.nprobe)
    shard_map = map_to_shards(q, cfg.index, plan, cfg.nprobe)
    if cfg.fixed_order is not None:
        order = tuple(cfg.fixed_order)
    else:
        loads = {n: float(v) for n, v in enumerate(state.ewma)}
        order = order_for(pos, plan, hot_block(loads, plan, cfg.hot_factor), pos).blocks
    batch = batch_of(pos, cfg.queries.count, plan.n_vec, cfg.batch_size) + cfg.stage_shift
    seq = shard_sequence(shard_map, batch, plan.n_vec)
    if cfg.prune:
        ps = prewarm_one(q, probes, cfg.cache, cfg.sample_size, cfg.k, plan.dim_spec, order, cfg.seed, int(cfg.queries.ids[pos]))
    else:
        ps = PruneState(TopKHeap(cfg.k))
    aq = ActiveQuery(pos, ps, order, tuple(seq[1:]), shard_map, np.zeros(plan.n_nodes))
    client_work = (cfg.index.nlist + (cfg.sample_size if cfg.prune else 0)) * cfg.index.dim
    start_rec = {"ev": "start", "q": pos, "order": list(order), "shards": list(seq), "tau": ps.tau_sq, "epoch": ps.epoch, "work": int(client_work)}
    if not seq:
        return aq, [], [start_rec]
    msgs, recs = _dispatch_shard(cfg, pos, aq, seq[0])
    return aq, msgs, [start_rec] + recs


def _finish(state: ClientState, aq: ActiveQuery, active: dict, results: dict, ewma: np.ndarray):
    results[aq.pos] = aq.state.heap.result()
    tracker = LoadTracker(len(ewma))
    tracker.ewma = ewma.copy()
    tracker.observe(aq.work)
    active.pop(aq.pos, None)
    return tracker.ewma


def client_step(state: ClientState, msg: Message):
    cfg = state.cfg
    if state.ewma is None:
        state = replace(state, ewma=np.zeros(cfg.plan.n_nodes))
    out: list[Message] = []
    recs: list[dict] = []
    active = dict(state.active)
    results = dict(state.results)
    orders = dict(state.orders)
    ewma = state.ewma
    next_pos = state.next_pos
    to_start = 0

    if msg.kind == Kind.CONTROL and msg.payload == CONTROL_START:
        window = cfg.window or cfg.queries.count
        to_start = min(window, cfg.queries.count) - len(active)
    elif msg.kind == Kind.TOPK_PARTIAL:
        t = decode_topk(msg.payload)
        aq = active[t.query_id]
        ps = aq.state.copy()
        ps.offer(t.ids, t.dists)
        work = aq.work.copy()
        for node, floats in t.work:
            work[node] += floats
        aq = replace(aq, state=ps, work=work)
        recs.append({"ev": "merge", "q": t.query_id, "shard": t.shard, "tau": ps.tau_sq, "epoch": ps.epoch, "work": int(t.ids.size)})
        if aq.remaining:
            shard, rest = aq.remaining[0], aq.remaining[1:]
            aq = replace(aq, remaining=rest)
            active[aq.pos] = aq
            m, r = _dispatch_shard(cfg, aq.pos, aq, shard)
            out += m
            recs += r
        else:
            ewma = _finish(state, aq, active, results, ewma)
            recs.append({"ev": "done", "q": aq.pos, "work": 0})
            to_start = 1
    else:
        return state, [], []

    for _ in range(max(to_start, 0)):
        if next_pos >= cfg.queries.count:
            break
        pos = next_pos
        next_pos += 1
        snapshot = replace(state, ewma=ewma)
        aq, m, r = _start_query(snapshot, pos)
        orders[pos] = aq.order
        out += m
        recs += r
        if aq.remaining or m:
            active[pos] = aq
        else:
            # no probed shard holds data: the prewarm heap is the answer
            ewma = _finish(state, aq, active, results, ewma)
            recs.append({"ev": "done", "q": pos, "work": 0})
    new = replace(state, next_pos=next_pos, active=active, results=results, ewma=ewma, orders=orders)
    return new, out, recs


def node_step(state, msg: Message):
    """Pure transition: returns ``(new_state, outbound_messages, trace_records)``."""
    if isinstance(state, WorkerState):
        if msg.dst != state.node_id:
            raise UnknownNode(f"message for {msg.dst} delivered to worker {state.node_id}")
        return worker_step(state, msg)
    if isinstance(state, ClientState):
        if msg.dst != state.cfg.node_id:
            raise UnknownNode(f"message for {msg.dst} delivered to client {state.cfg.node_id}")
        return client_step(state, msg)
    raise TypeError(f"unknown node state {type(state).__name__}")


# -- cluster construction -----------------------------------------------------


def build_cells(base: VectorBatch, index: ClusterIndex, plan: PartitionPlan) -> dict[int, WorkerCell]:
    """Cut the base data into one (shard, block) cell per worker node."""
    cells = {}
    for s in range(plan.n_vec):
        clusters = plan.lists_of_shard(s)
        ids = np.concatenate([index.lists[c] for c in clusters]) if clusters else np.empty(0, np.int64)
        data = base.data[base.rows_of(ids)] if ids.size else np.empty((0, base.dim), np.float32)
        offsets, start = {}, 0
        for c in clusters:
            offsets[c] = (start, start + index.lists[c].size)
            start += index.lists[c].size
        ids.flags.writeable = False
        for b in range(plan.n_dim):
            lo, hi = plan.dim_spec.bounds(b)
            rows = np.ascontiguousarray(data[:, lo:hi])
            rows.flags.writeable = False
            cells[plan.node(s, b)] = WorkerCell(s, b, lo, hi, rows, ids, offsets)
    return cells


def build_nodes(
    base: VectorBatch,
    index: ClusterIndex,
    plan: PartitionPlan,
    queries: VectorBatch,
    k: int,
    nprobe: int,
    *,
    prune: bool = True,
    sample_size: int | None = None,
    seed: int = 0,
    cache: PrewarmCache | None = None,
    cells: dict | None = None,
    audit: bool = False,
    **client_opts,
) -> dict[int, object]:
    """Initial states for workers ``0..N-1`` and the client (node ``N``)."""
    sample_size = 2 * k if sample_size is None else sample_size
    client_id = plan.n_nodes
    cells = cells or build_cells(base, index, plan)
    if cache is None:
        cache = PrewarmCache.build(base, index, max(sample_size, 1), seed)
    nodes: dict[int, object] = {
        n: WorkerState(n, client_id, plan, cell, k, prune, audit) for n, cell in cells.items()
    }
    cfg = ClientConfig(
        node_id=client_id,
        plan=plan,
        index=index,
        queries=queries,
        k=k,
        nprobe=nprobe,
        cache=cache,
        prune=prune,
        sample_size=sample_size,
        seed=seed,
        **client_opts,
    )
    nodes[client_id] = ClientState(cfg, ewma=np.zeros(plan.n_nodes))
    return nodes


def threshold_update(src: int, dst: int, query_id: int, tau: float) -> Message:
    return Message(Kind.THRESHOLD_UPDATE, src, dst, encode_threshold(query_id, tau))
