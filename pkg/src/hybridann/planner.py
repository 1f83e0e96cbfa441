"""Cost-model driven choice of a (vector shards x dimension blocks) partition grid.

Work units used by the cost terms (all coefficients are milliseconds per unit):

* ``comp_dim`` - per float of partial-distance work, i.e. candidates x block width.
* ``comm_dim`` - per partial accumulator handed from one dimension block to the next.
  A query whose shard is split into ``n_dim`` blocks hands every candidate across
  ``n_dim - 1`` boundaries; with rotated visit orders each block receives that
  traffic in ``(n_dim - 1) / n_dim`` of the visits.
* ``comp_vec`` - per candidate entering a shard's local top-k selection.
* ``comm_vec`` - per float of query payload dispatched to a probed shard (``d`` per shard).
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from .errors import BadParam, NoCandidates
from .index import ClusterIndex, probe_centroids
from .kernel import DimBlockSpec, block_sq_dists

MODES = ("harmony", "harmony-vector", "harmony-dimension")

# payload bytes per candidate in a partial handoff: u32 row + f64 running sum
HANDOFF_BYTES_PER_CANDIDATE = 12


@dataclass(frozen=True)
class PartitionPlan:
    n_vec: int
    n_dim: int
    dim_spec: DimBlockSpec
    shard_of_list: tuple[int, ...]
    node_grid: tuple[tuple[int, ...], ...]  # node_grid[shard][block] -> node id

    def __post_init__(self) -> None:
        object.__setattr__(self, "shard_of_list", tuple(int(s) for s in self.shard_of_list))
        object.__setattr__(self, "node_grid", tuple(tuple(int(n) for n in row) for row in self.node_grid))
        self.validate()

    def validate(self) -> None:
        if self.n_vec < 1 or self.n_dim < 1:
            raise BadParam("plan needs at least one shard and one block")
        if self.dim_spec.block_count != self.n_dim:
            raise BadParam("dim_spec block count disagrees with n_dim")
        if len(self.node_grid) != self.n_vec or any(len(r) != self.n_dim for r in self.node_grid):
            raise BadParam("node grid shape must be n_vec x n_dim")
        nodes = sorted(n for row in self.node_grid for n in row)
        if nodes != list(range(self.n_vec * self.n_dim)):
            raise BadParam("node grid must be a bijection onto 0..N-1")
        if any(not 0 <= s < self.n_vec for s in self.shard_of_list):
            raise BadParam("cluster mapped to a nonexistent shard")

    @property
    def n_nodes(self) -> int:
        return self.n_vec * self.n_dim

    @property
    def nlist(self) -> int:
        return len(self.shard_of_list)

    @property
    def dim(self) -> int:
        return self.dim_spec.dim

    @property
    def shape(self) -> tuple[int, int]:
        return self.n_vec, self.n_dim

    def node(self, shard: int, block: int) -> int:
        return self.node_grid[shard][block]

    def cell_of(self, node: int) -> tuple[int, int]:
        for s, row in enumerate(self.node_grid):
            for b, n in enumerate(row):
                if n == node:
                    return s, b
        raise BadParam(f"node {node} not in plan")

    def lists_of_shard(self, shard: int) -> list[int]:
        return [c for c, s in enumerate(self.shard_of_list) if s == shard]

    def to_dict(self) -> dict:
        return {
            "version": 1,
            "n_vec": self.n_vec,
            "n_dim": self.n_dim,
            "boundaries": list(self.dim_spec.boundaries),
            "shard_of_list": list(self.shard_of_list),
            "node_of_block": [
                {"shard": s, "block": b, "node": self.node(s, b)}
                for s in range(self.n_vec)
                for b in range(self.n_dim)
            ],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, doc: dict) -> "PartitionPlan":
        n_vec, n_dim = int(doc["n_vec"]), int(doc["n_dim"])
        grid = [[-1] * n_dim for _ in range(n_vec)]
        for entry in doc["node_of_block"]:
            grid[entry["shard"]][entry["block"]] = entry["node"]
        return cls(n_vec, n_dim, DimBlockSpec(tuple(doc["boundaries"])), tuple(doc["shard_of_list"]), tuple(map(tuple, grid)))

    @classmethod
    def from_json(cls, text: str) -> "PartitionPlan":
        return cls.from_dict(json.loads(text))


@dataclass(frozen=True)
class CostCoefficients:
    comp_dim: float
    comm_dim: float
    comp_vec: float
    comm_vec: float

    def __post_init__(self) -> None:
        vals = (self.comp_dim, self.comm_dim, self.comp_vec, self.comm_vec)
        if any(not np.isfinite(v) or v < 0 for v in vals):
            raise BadParam("cost coefficients must be finite and >= 0")


@dataclass(frozen=True)
class WorkloadProfile:
    """Which clusters each (sampled) query probes, plus the inverted-list sizes."""

    probes: np.ndarray  # (Q, nprobe) cluster ids
    list_sizes: np.ndarray  # (nlist,)
    dim: int

    def __post_init__(self) -> None:
        probes = np.asarray(self.probes, dtype=np.int64).reshape(len(self.probes), -1)
        sizes = np.asarray(self.list_sizes, dtype=np.int64)
        if probes.size and (probes.min() < 0 or probes.max() >= sizes.size):
            raise BadParam("probe refers to unknown cluster")
        object.__setattr__(self, "probes", probes)
        object.__setattr__(self, "list_sizes", sizes)

    @classmethod
    def from_queries(cls, queries: np.ndarray, index: ClusterIndex, nprobe: int) -> "WorkloadProfile":
        probes = np.array([probe_centroids(q, index, nprobe) for q in queries], dtype=np.int64)
        return cls(probes.reshape(len(queries), nprobe), index.list_sizes(), index.dim)

    @property
    def q_count(self) -> int:
        return self.probes.shape[0]

    @property
    def nprobe(self) -> int:
        return self.probes.shape[1]

    @property
    def hits(self) -> np.ndarray:
        return np.bincount(self.probes.ravel(), minlength=self.list_sizes.size)

    def subset(self, rows) -> "WorkloadProfile":
        return WorkloadProfile(self.probes[rows], self.list_sizes, self.dim)

    def shard_candidates(self, plan: PartitionPlan) -> tuple[np.ndarray, np.ndarray]:
        """Per (query, shard): candidate count and whether the shard is probed at all."""
        shard = np.asarray(plan.shard_of_list, dtype=np.int64)[self.probes]
        counts = np.zeros((self.q_count, plan.n_vec))
        probed = np.zeros((self.q_count, plan.n_vec), dtype=bool)
        rows = np.repeat(np.arange(self.q_count), self.nprobe)
        np.add.at(counts, (rows, shard.ravel()), self.list_sizes[self.probes].ravel())
        probed[rows, shard.ravel()] = True
        return counts, probed


@dataclass(frozen=True)
class QueryWork:
    """Work units a single query induces on each dimension block and vector shard."""

    dim_comp: np.ndarray
    dim_comm: np.ndarray
    vec_comp: np.ndarray
    vec_comm: np.ndarray

    @classmethod
    def uniform(cls, plan: PartitionPlan, units: float = 1.0) -> "QueryWork":
        d = np.full(plan.n_dim, float(units))
        v = np.full(plan.n_vec, float(units))
        return cls(d, d.copy(), v, v.copy())


def query_work(plan: PartitionPlan, profile: WorkloadProfile, qi: int) -> QueryWork:
    counts, probed = profile.shard_candidates(plan)
    return _work_from_counts(plan, counts[qi], probed[qi])


def _work_from_counts(plan: PartitionPlan, n_s: np.ndarray, probed: np.ndarray) -> QueryWork:
    total = float(n_s.sum())
    widths = np.asarray(plan.dim_spec.widths(), dtype=np.float64)
    handed = total * (plan.n_dim - 1) / plan.n_dim
    return QueryWork(
        dim_comp=total * widths,
        dim_comm=np.full(plan.n_dim, handed),
        vec_comp=n_s.astype(np.float64),
        vec_comm=np.where(probed, float(plan.dim), 0.0),
    )


def query_cost(plan: PartitionPlan, work: QueryWork, coeffs: CostCoefficients) -> float:
    """Dimension-block terms plus vector-shard terms for one query."""
    dim_part = sum(
        coeffs.comp_dim * float(work.dim_comp[b]) + coeffs.comm_dim * float(work.dim_comm[b])
        for b in range(plan.n_dim)
    )
    vec_part = sum(
        coeffs.comp_vec * float(work.vec_comp[s]) + coeffs.comm_vec * float(work.vec_comm[s])
        for s in range(plan.n_vec)
    )
    return dim_part + vec_part


def node_load(plan: PartitionPlan, workload: WorkloadProfile, coeffs: CostCoefficients) -> np.ndarray:
    """Computation-only load per node id, summed over the workload."""
    counts, _ = workload.shard_candidates(plan)
    per_shard = counts.sum(axis=0)
    widths = plan.dim_spec.widths()
    loads = np.zeros(plan.n_nodes)
    for s in range(plan.n_vec):
        for b in range(plan.n_dim):
            loads[plan.node(s, b)] = per_shard[s] * (coeffs.comp_dim * widths[b] + coeffs.comp_vec / plan.n_dim)
    return loads


def imbalance(loads) -> float:
    """Population standard deviation of per-node loads."""
    x = np.asarray(list(loads.values()) if isinstance(loads, dict) else loads, dtype=np.float64)
    if x.size == 0:
        raise BadParam("need at least one node load")
    return float(np.sqrt(np.mean((x - x.mean()) ** 2)))


def workload_cost(plan: PartitionPlan, workload: WorkloadProfile, coeffs: CostCoefficients) -> float:
    """Sum of per-query costs (the alpha-free part of the objective)."""
    counts, probed = workload.shard_candidates(plan)
    total = 0.0
    for qi in range(workload.q_count):
        total += query_cost(plan, _work_from_counts(plan, counts[qi], probed[qi]), coeffs)
    return total


def total_cost(plan: PartitionPlan, workload: WorkloadProfile, coeffs: CostCoefficients, alpha: float) -> float:
    if alpha < 0:
        raise BadParam("alpha must be >= 0")
    cost = workload_cost(plan, workload, coeffs)
    if alpha == 0:
        return cost
    return cost + alpha * imbalance(node_load(plan, workload, coeffs))


def _factor_pairs(n: int) -> list[tuple[int, int]]:
    return [(v, n // v) for v in range(1, n + 1) if n % v == 0]


def assign_shards(list_sizes: Sequence[int], n_vec: int) -> tuple[int, ...]:
    """Greedy size-balanced bin packing: largest list first onto the lightest shard."""
    sizes = np.asarray(list_sizes, dtype=np.int64)
    order = np.lexsort((np.arange(sizes.size), -sizes))
    fill = [0] * n_vec
    shard = [0] * sizes.size
    for c in order:
        s = min(range(n_vec), key=lambda i: (fill[i], i))
        shard[c] = s
        fill[s] += int(sizes[c])
    return tuple(shard)


def make_plan(n_vec: int, n_dim: int, dim: int, list_sizes: Sequence[int]) -> PartitionPlan:
    grid = tuple(tuple(s * n_dim + b for b in range(n_dim)) for s in range(n_vec))
    return PartitionPlan(n_vec, n_dim, DimBlockSpec.equal(dim, n_dim), assign_shards(list_sizes, n_vec), grid)


def enumerate_plans(n_nodes: int, d: int, nlist: int, list_sizes: Sequence[int] | None = None) -> list[PartitionPlan]:
    """Every n_vec x n_dim == n_nodes grid with n_dim <= d and n_vec <= nlist."""
    if n_nodes < 1:
        raise BadParam("n_nodes must be >= 1")
    sizes = np.ones(nlist, dtype=np.int64) if list_sizes is None else np.asarray(list_sizes)
    return [
        make_plan(v, m, d, sizes)
        for v, m in _factor_pairs(n_nodes)
        if m <= d and v <= nlist
    ]


def plans_for_mode(mode: str, n_nodes: int, d: int, nlist: int, list_sizes=None) -> list[PartitionPlan]:
    mode = normalize_mode(mode)
    plans = enumerate_plans(n_nodes, d, nlist, list_sizes)
    if mode == "harmony-vector":
        plans = [p for p in plans if p.n_dim == 1]
    elif mode == "harmony-dimension":
        plans = [p for p in plans if p.n_vec == 1]
    return plans


def normalize_mode(mode: str) -> str:
    m = mode.strip().lower()
    if m not in MODES:
        raise BadParam(f"unknown mode {mode!r}; expected one of {', '.join(MODES)}")
    return m


def select_plan(
    candidates: Iterable[PartitionPlan],
    workload: WorkloadProfile,
    coeffs: CostCoefficients,
    alpha: float,
) -> PartitionPlan:
    """Lowest total cost; ties go to more shards, then fewer blocks."""
    candidates = list(candidates)
    if not candidates:
        raise NoCandidates("no partition plans to choose from")
    scored = [(total_cost(p, workload, coeffs, alpha), -p.n_vec, p.n_dim, i) for i, p in enumerate(candidates)]
    return candidates[min(scored)[3]]


def cost_table(candidates, workload, coeffs, alpha) -> list[dict]:
    rows = []
    for p in candidates:
        loads = node_load(p, workload, coeffs)
        rows.append(
            {
                "n_vec": p.n_vec,
                "n_dim": p.n_dim,
                "query_cost_ms": workload_cost(p, workload, coeffs),
                "imbalance_ms": imbalance(loads),
                "total_cost": total_cost(p, workload, coeffs, alpha),
            }
        )
    return rows


def coefficients_from_rates(us_per_float: float, bytes_per_us: float, us_per_candidate: float = 0.0) -> CostCoefficients:
    """Translate machine rates into per-unit costs in milliseconds."""
    if bytes_per_us <= 0:
        raise BadParam("bandwidth must be positive")
    return CostCoefficients(
        comp_dim=us_per_float * 1e-3,
        comm_dim=HANDOFF_BYTES_PER_CANDIDATE / bytes_per_us * 1e-3,
        comp_vec=us_per_candidate * 1e-3,
        comm_vec=4.0 / bytes_per_us * 1e-3,
    )


def measure_coefficients(dim: int = 128, rows: int = 4096, payload: int = 1 << 20, seed: int = 0) -> CostCoefficients:
    """Wall-clock micro-probe: one block-distance batch and one socket round trip."""
    import socket

    rng = np.random.default_rng(seed)
    X = rng.standard_normal((rows, dim)).astype(np.float32)
    q = X[0]
    t0 = time.perf_counter()
    d = block_sq_dists(q, X)
    t_dist = time.perf_counter() - t0
    order = np.argsort(d)  # stand-in for per-candidate selection work
    t_sel = time.perf_counter() - t0 - t_dist
    del order

    a, b = socket.socketpair()
    try:
        buf = b"\0" * payload
        t0 = time.perf_counter()
        a.sendall(buf)
        got = 0
        while got < payload:
            got += len(b.recv(min(1 << 16, payload - got)))
        b.sendall(b"\0")
        a.recv(1)
        t_rtt = time.perf_counter() - t0
    finally:
        a.close()
        b.close()
    us_per_float = max(t_dist, 1e-9) * 1e6 / (rows * dim)
    bytes_per_us = payload / max(t_rtt * 1e6, 1e-6)
    return coefficients_from_rates(us_per_float, bytes_per_us, max(t_sel, 0.0) * 1e6 / rows)
