"""Build a cluster for a plan and run a query batch on either transport."""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from ..errors import BadParam
from ..index import ClusterIndex, TopKResult, VectorBatch
from ..pipeline import PrewarmCache
from ..planner import PartitionPlan
from .messages import Kind, Message
from .nodes import CONTROL_START, ClientState, WorkerState, build_cells, build_nodes
from .sim import SimConfig, SimResult, TrafficLedger, sim_run
from .sockets import socket_run

TRANSPORTS = ("sim", "socket")


@dataclass
class ClusterRun:
    plan: PartitionPlan
    results: dict[int, TopKResult]  # query id -> result
    ledger: TrafficLedger
    trace: list[str]
    makespan_us: float
    node_work: np.ndarray  # partial-distance floats per worker node
    resident_floats: np.ndarray  # per worker node
    client_cache_floats: int
    transport: str = "sim"
    orders: dict[int, tuple[int, ...]] = field(default_factory=dict)

    @property
    def n_queries(self) -> int:
        return len(self.results)

    @property
    def throughput_qps(self) -> float:
        return self.n_queries / (self.makespan_us * 1e-6) if self.makespan_us > 0 else float("inf")

    def inter_node_bytes(self) -> int:
        return self.ledger.inter_node_bytes(exclude={self.plan.n_nodes})

    def chunk_bytes(self) -> int:
        return self.ledger.bytes_by_kind(Kind.QUERY_CHUNK)

    def records(self, ev: str | None = None) -> list[dict]:
        out = [json.loads(line) for line in self.trace]
        return [r for r in out if ev is None or r.get("ev") == ev]

    def trace_text(self) -> str:
        return "".join(line + "\n" for line in self.trace)


def run_cluster(
    base: VectorBatch,
    index: ClusterIndex,
    plan: PartitionPlan,
    queries: VectorBatch,
    k: int,
    nprobe: int,
    *,
    prune: bool = True,
    transport: str = "sim",
    config: SimConfig | None = None,
    sample_size: int | None = None,
    seed: int = 0,
    cache: PrewarmCache | None = None,
    cells: dict | None = None,
    timeout_s: float = 120.0,
    **client_opts,
) -> ClusterRun:
    """Execute every query through the worker grid; the client is node ``N``."""
    if transport not in TRANSPORTS:
        raise BadParam(f"transport must be one of {TRANSPORTS}, got {transport!r}")
    if plan.nlist != index.nlist or plan.dim != index.dim:
        raise BadParam("plan does not match the index")
    nodes = build_nodes(
        base, index, plan, queries, k, nprobe,
        prune=prune, sample_size=sample_size, seed=seed, cache=cache, cells=cells, **client_opts,
    )
    client = plan.n_nodes
    script = [(0.0, Message(Kind.CONTROL, client, client, CONTROL_START))]
    if transport == "sim":
        config = config or SimConfig(n_nodes=plan.n_nodes + 1, seed=seed)
        res: SimResult = sim_run(config, nodes, script)
    else:
        res = socket_run(nodes, script, timeout_s=timeout_s)

    cstate: ClientState = res.states[client]
    workers = [res.states[n] for n in range(plan.n_nodes)]
    assert all(isinstance(w, WorkerState) for w in workers)
    return ClusterRun(
        plan=plan,
        results=cstate.results_by_id(),
        ledger=res.ledger,
        trace=res.trace,
        makespan_us=res.makespan_us,
        node_work=np.array([res.node_work.get(n, 0) for n in range(plan.n_nodes)], dtype=np.float64),
        resident_floats=np.array([w.cell.resident_floats for w in workers], dtype=np.int64),
        client_cache_floats=cstate.cfg.cache.resident_floats,
        transport=transport,
        orders={int(queries.ids[p]): o for p, o in cstate.orders.items()},
    )


def resident_floats(base: VectorBatch, index: ClusterIndex, plan: PartitionPlan) -> int:
    """Total base-data floats held by the workers of ``plan``."""
    return sum(c.resident_floats for c in build_cells(base, index, plan).values())
