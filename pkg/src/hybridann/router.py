"""Query load distribution: probe centroids, group by shard, split by dimension block.

Visit orders rotate round-robin by arrival index. When some node's smoothed load
runs hotter than ``hot_factor`` times the mean, that node's dimension block is
moved to the end of the next query's order, where pruning removes most work.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import BadParam
from .index import ClusterIndex, probe_centroids
from .planner import PartitionPlan

HOT_FACTOR = 1.25
LOAD_HALF_LIFE = 64


@dataclass(frozen=True)
class VisitOrder:
    query_id: int
    blocks: tuple[int, ...]

    def __post_init__(self) -> None:
        blocks = tuple(int(b) for b in self.blocks)
        if sorted(blocks) != list(range(len(blocks))):
            raise BadParam(f"visit order {blocks} is not a permutation")
        object.__setattr__(self, "blocks", blocks)

    def position(self, block: int) -> int:
        return self.blocks.index(block)


@dataclass(frozen=True)
class QueryChunk:
    query_id: int
    shard_id: int
    dim_block_id: int
    block_values: np.ndarray
    probe_lists: tuple[int, ...]
    order_index: int
    order: tuple[int, ...]


def map_to_shards(q, index: ClusterIndex, plan: PartitionPlan, nprobe: int) -> dict[int, list[int]]:
    """Probed cluster ids grouped by owning shard, each group in probe-rank order."""
    grouped: dict[int, list[int]] = {}
    for c in probe_centroids(q, index, nprobe):
        grouped.setdefault(plan.shard_of_list[int(c)], []).append(int(c))
    return grouped


def split_query(q, plan: PartitionPlan, shard_map: dict[int, list[int]], order: VisitOrder) -> list[QueryChunk]:
    """One chunk per (probed shard, dimension block), in visit order within each shard."""
    q = np.asarray(q, dtype=np.float32)
    if len(order.blocks) != plan.n_dim:
        raise BadParam("visit order length differs from the plan's block count")
    chunks = []
    for shard in sorted(shard_map):
        for pos, b in enumerate(order.blocks):
            chunks.append(
                QueryChunk(
                    query_id=order.query_id,
                    shard_id=shard,
                    dim_block_id=b,
                    block_values=q[plan.dim_spec.slice(b)].copy(),
                    probe_lists=tuple(shard_map[shard]),
                    order_index=pos,
                    order=order.blocks,
                )
            )
    return chunks


def rotation(arrival: int, n_dim: int) -> tuple[int, ...]:
    r = arrival % n_dim
    return tuple((r + j) % n_dim for j in range(n_dim))


def hot_block(load_stats, plan: PartitionPlan, hot_factor: float = HOT_FACTOR) -> int | None:
    """Block of the hottest node if it exceeds ``hot_factor`` x mean load, else None."""
    loads = np.array([float(load_stats[n]) for n in range(plan.n_nodes)])
    mean = loads.mean()
    if plan.n_dim == 1 or mean <= 0:
        return None
    hottest = int(np.argmax(loads))
    if loads[hottest] <= hot_factor * mean:
        return None
    return plan.cell_of(hottest)[1]


def order_for(arrival: int, plan: PartitionPlan, hot: int | None, query_id: int) -> VisitOrder:
    base = rotation(arrival, plan.n_dim)
    if hot is None:
        return VisitOrder(query_id, base)
    return VisitOrder(query_id, tuple(b for b in base if b != hot) + (hot,))


def schedule_order(
    load_stats,
    plan: PartitionPlan,
    query_ids=None,
    start_index: int = 0,
    hot_factor: float = HOT_FACTOR,
) -> dict[int, VisitOrder]:
    """Visit orders for queries arriving at ``start_index, start_index + 1, ...``."""
    missing = [n for n in range(plan.n_nodes) if n not in load_stats]
    if missing:
        raise BadParam(f"load stats missing nodes {missing}")
    query_ids = [0] if query_ids is None else list(query_ids)
    hot = hot_block(load_stats, plan, hot_factor)
    return {qid: order_for(start_index + i, plan, hot, qid) for i, qid in enumerate(query_ids)}


class LoadTracker:
    """EWMA of per-node processed partial-distance work, updated once per finished query."""

    def __init__(self, n_nodes: int, half_life: float = LOAD_HALF_LIFE):
        self.weight = 1.0 - 0.5 ** (1.0 / half_life)
        self.ewma = np.zeros(n_nodes)

    def observe(self, per_node_work) -> None:
        w = np.asarray(per_node_work, dtype=np.float64)
        self.ewma += self.weight * (w - self.ewma)

    def snapshot(self) -> dict[int, float]:
        return {n: float(v) for n, v in enumerate(self.ewma)}


def shard_sequence(shard_map: dict[int, list[int]], batch: int, n_vec: int) -> list[int]:
    """Probed shards visited cyclically, batch ``j`` starting at shard ``j mod n_vec``."""
    start = batch % n_vec
    return sorted(shard_map, key=lambda s: (s - start) % n_vec)
