"""Recall, skewed workloads, pruning ratios and benchmark reports."""

from __future__ import annotations

import csv
import io
import json
import math
import time
from dataclasses import asdict, dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np

from .datasets import Dataset
from .errors import BadParam, WidthMismatch
from .index import ClusterIndex, TopKResult, VectorBatch, exact_topk, train_centroids
from .planner import (
    CostCoefficients,
    WorkloadProfile,
    coefficients_from_rates,
    cost_table,
    imbalance,
    normalize_mode,
    plans_for_mode,
    select_plan,
)
from .runtime import ClusterRun, SimConfig, run_cluster


@dataclass(frozen=True)
class GroundTruth:
    ids: np.ndarray  # (Q, width)

    def __post_init__(self) -> None:
        ids = np.asarray(self.ids, dtype=np.int64)
        if ids.ndim != 2:
            raise WidthMismatch("ground truth rows must all have the same width")
        object.__setattr__(self, "ids", ids)

    @property
    def width(self) -> int:
        return self.ids.shape[1]

    def validate(self, base: VectorBatch) -> None:
        if self.ids.size and not np.isin(self.ids, base.ids).all():
            raise BadParam("ground truth names ids missing from the base set")

    @classmethod
    def compute(cls, base: VectorBatch, queries: VectorBatch, k: int) -> "GroundTruth":
        return cls(np.stack([exact_topk(base, q, k).ids for q in queries.data]) if queries.count else np.empty((0, k)))


def _result_rows(results) -> list[np.ndarray]:
    if isinstance(results, Mapping):
        results = [results[q] for q in sorted(results)]
    return [np.asarray(r.ids if isinstance(r, TopKResult) else r, dtype=np.int64) for r in results]


def recall_at_k(results, truth, k: int) -> float:
    """Mean over queries of |returned ∩ true top-k| / k."""
    truth_ids = truth.ids if isinstance(truth, GroundTruth) else np.asarray(truth, dtype=np.int64)
    if truth_ids.ndim != 2:
        raise WidthMismatch("ground truth must be a 2-d array")
    if k < 1 or k > truth_ids.shape[1]:
        raise WidthMismatch(f"k={k} exceeds ground-truth width {truth_ids.shape[1]}")
    rows = _result_rows(results)
    if len(rows) != truth_ids.shape[0]:
        raise WidthMismatch(f"{len(rows)} results for {truth_ids.shape[0]} ground-truth rows")
    if not rows:
        return 0.0
    hits = [np.intersect1d(r[:k], t[:k]).size for r, t in zip(rows, truth_ids)]
    return float(np.mean(hits) / k)


def zipf_weights(n: int, s: float) -> np.ndarray:
    if s < 0:
        raise BadParam("zipf exponent must be >= 0")
    w = 1.0 / np.arange(1, n + 1, dtype=np.float64) ** s
    return w / w.sum()


def zipf_workload(
    index: ClusterIndex,
    q_count: int,
    s: float,
    seed: int = 0,
    base: VectorBatch | None = None,
    noise: float = 0.1,
) -> VectorBatch:
    """Queries near clusters drawn by Zipf(s) rank; the rank order is a seeded shuffle.

    With ``base`` a query is a random member of the chosen cluster plus noise
    scaled to the cluster's radius; without it, the centroid plus noise.
    """
    p = zipf_weights(index.nlist, s)
    rng = np.random.default_rng(seed)
    ranked = rng.permutation(index.nlist)
    picks = ranked[rng.choice(index.nlist, size=q_count, p=p)]
    d = index.dim
    out = np.empty((q_count, d), dtype=np.float32)
    for i, c in enumerate(picks):
        centre = index.centroids[c].astype(np.float64)
        members = index.lists[c]
        if base is not None and members.size:
            rows = base.data[base.rows_of(members)].astype(np.float64)
            radius = math.sqrt(float(((rows - centre) ** 2).sum(axis=1).mean()) / d)
            anchor = rows[rng.integers(rows.shape[0])]
        else:
            radius = float(np.linalg.norm(centre)) / math.sqrt(d) or 1.0
            anchor = centre
        out[i] = anchor + rng.normal(scale=noise * radius, size=d)
    return VectorBatch.from_array(out)


@dataclass(frozen=True)
class PruneReport:
    slice_ratios: tuple[float, ...]  # percent, cumulative, slice 1 first
    average: float
    entered: tuple[int, ...]

    def monotone(self) -> bool:
        r = self.slice_ratios
        return bool(r) and r[0] == 0.0 and all(a <= b for a, b in zip(r, r[1:]))

    def to_dict(self) -> dict:
        return asdict(self)


def prune_report(trace) -> PruneReport:
    """Cumulative share of candidates pruned before each slice position.

    ``trace`` is a ``ClusterRun``, trace lines, or parsed records; slice ``k``
    counts what entered visit-order position ``k - 1`` across all chains.
    """
    if isinstance(trace, ClusterRun):
        records = trace.records("compute")
    else:
        records = [json.loads(r) if isinstance(r, str) else r for r in trace]
        records = [r for r in records if r.get("ev") == "compute"]
    if not records:
        return PruneReport((), 0.0, ())
    n_slices = max(r["slice"] for r in records) + 1
    entered = np.zeros(n_slices, dtype=np.int64)
    for r in records:
        entered[r["slice"]] += r["n_in"]
    if entered[0] == 0:
        ratios = np.zeros(n_slices)
    else:
        ratios = 100.0 * (1.0 - entered / entered[0])
    ratios = tuple(float(x) for x in ratios)
    return PruneReport(ratios, float(np.mean(ratios)), tuple(int(x) for x in entered))


PRUNE_TABLE_HEADER = ["Dataset", "First Slice (%)", "Second Slice (%)", "Third Slice (%)", "Fourth Slice (%)", "Average Pruning Ratio (%)"]


def prune_table_csv(rows: Iterable[tuple[str, PruneReport]]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(PRUNE_TABLE_HEADER)
    for name, rep in rows:
        slices = list(rep.slice_ratios[:4]) + [0.0] * max(0, 4 - len(rep.slice_ratios))
        w.writerow([name] + [f"{x:.2f}" for x in slices] + [f"{rep.average:.2f}"])
    return buf.getvalue()


# -- benchmark driver ---------------------------------------------------------


@dataclass
class BenchKnobs:
    n_machine: int = 4
    nlist: int = 64
    nprobe: int = 8
    k: int = 10
    pruning: bool = True
    alpha: float = 1.0
    seed: int = 0
    transport: str = "sim"
    skew: float | None = None  # Zipf exponent; None keeps the dataset's queries
    q_count: int | None = None
    sample_size: int | None = None
    kmeans_iters: int = 25
    latency_us: float = 5.0
    bandwidth_bytes_per_us: float = 12500.0
    us_per_float: float = 0.001
    msg_overhead_us: float = 1.0


@dataclass
class BenchReport:
    doc: dict
    run: ClusterRun = field(repr=False)
    prune: PruneReport = field(repr=False)

    def to_json(self) -> str:
        return json.dumps(self.doc, sort_keys=True, indent=2)

    def table(self) -> str:
        d = self.doc
        lines = [
            f"dataset           {d['dataset']}",
            f"mode              {d['mode']}  plan {d['plan']['n_vec']}x{d['plan']['n_dim']}",
            f"queries           {d['n_queries']}",
            f"recall@{d['knobs']['k']:<10} {d['recall']:.4f}",
            f"qps ({d['qps_label']})  {d['qps']:.1f}",
            f"chunk bytes/visit {d['traffic']['chunk_bytes_per_visit']:.1f}",
            f"inter-node bytes  {d['traffic']['inter_node_bytes']}",
            f"load stddev       {d['load']['stddev']:.1f}",
            "pruning (%)       " + " / ".join(f"{x:.2f}" for x in d["pruning"]["slice_ratios"]),
        ]
        return "\n".join(lines)


def sim_coefficients(knobs: BenchKnobs) -> CostCoefficients:
    return coefficients_from_rates(knobs.us_per_float, knobs.bandwidth_bytes_per_us)


def bench_run(
    dataset: Dataset,
    mode: str,
    knobs: BenchKnobs | None = None,
    *,
    index: ClusterIndex | None = None,
    truth: GroundTruth | None = None,
    coeffs: CostCoefficients | None = None,
) -> BenchReport:
    """Plan, execute and measure one configuration; returns a JSON-ready report."""
    knobs = knobs or BenchKnobs()
    mode = normalize_mode(mode)
    base = dataset.base
    if index is None:
        index = train_centroids(base, knobs.nlist, iters=knobs.kmeans_iters, seed=knobs.seed)
    if knobs.skew is not None:
        queries = zipf_workload(index, knobs.q_count or dataset.queries.count, knobs.skew, knobs.seed, base=base)
        truth = None
    else:
        queries = dataset.queries
        if knobs.q_count is not None:
            queries = VectorBatch(queries.data[: knobs.q_count], queries.ids[: knobs.q_count])
    if truth is None:
        if dataset.truth is not None and knobs.skew is None:
            truth = GroundTruth(dataset.truth[: queries.count])
        else:
            truth = GroundTruth.compute(base, queries, knobs.k)
    truth.validate(base)

    if coeffs is None:
        coeffs = sim_coefficients(knobs)
    profile = WorkloadProfile.from_queries(queries.data, index, knobs.nprobe)
    candidates = plans_for_mode(mode, knobs.n_machine, index.dim, index.nlist, index.list_sizes())
    plan = select_plan(candidates, profile, coeffs, knobs.alpha)

    config = SimConfig(
        n_nodes=plan.n_nodes + 1,
        latency_us=knobs.latency_us,
        bandwidth_bytes_per_us=knobs.bandwidth_bytes_per_us,
        seed=knobs.seed,
        us_per_float=knobs.us_per_float,
        msg_overhead_us=knobs.msg_overhead_us,
    )
    wall0 = time.perf_counter()
    run = run_cluster(
        base, index, plan, queries, knobs.k, knobs.nprobe,
        prune=knobs.pruning, transport=knobs.transport, config=config,
        sample_size=knobs.sample_size, seed=knobs.seed,
    )
    wall = time.perf_counter() - wall0
    rep = prune_report(run)
    visits = len(run.records("dispatch"))
    loads = run.node_work
    if knobs.transport == "sim":
        qps, label = run.throughput_qps, "simulated"
    else:
        qps, label = queries.count / wall if wall > 0 else float("inf"), "wall-clock"

    resident = int(run.resident_floats.sum())
    audits = {
        "space_no_duplication": resident == base.count * base.dim,
        "ledger_consistent": run.ledger.consistent(),
        "prune_monotone": rep.monotone() if knobs.pruning else all(r == 0.0 for r in rep.slice_ratios),
        "all_queries_answered": len(run.results) == queries.count,
    }
    doc = {
        "dataset": dataset.name,
        "mode": mode,
        "transport": knobs.transport,
        "knobs": asdict(knobs),
        "plan": {"n_vec": plan.n_vec, "n_dim": plan.n_dim},
        "n_queries": queries.count,
        "recall": recall_at_k(run.results, truth, knobs.k),
        "qps": qps,
        "qps_label": label,
        "makespan_us": run.makespan_us if knobs.transport == "sim" else wall * 1e6,
        "traffic": {
            "ledger": run.ledger.to_dict(),
            "chunk_bytes": run.chunk_bytes(),
            "chunk_visits": visits,
            "chunk_bytes_per_visit": run.chunk_bytes() / visits if visits else 0.0,
            "inter_node_bytes": run.inter_node_bytes(),
        },
        "pruning": rep.to_dict(),
        "load": {
            "per_node_work": loads.tolist(),
            "stddev": imbalance(loads),
            "variance": imbalance(loads) ** 2,
        },
        "space": {"worker_resident_floats": resident, "client_cache_floats": run.client_cache_floats},
        "cost_table": cost_table(candidates, profile, coeffs, knobs.alpha),
        "coefficients_ms": asdict(coeffs),
        "audits": audits,
    }
    return BenchReport(doc, run, rep)
