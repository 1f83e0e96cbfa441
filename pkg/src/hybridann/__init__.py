"""Distributed IVF search over a hybrid vector-shard x dimension-block grid."""

from __future__ import annotations

__version__ = "0.1.0"

from .index import (
    ClusterIndex,
    TopKResult,
    VectorBatch,
    assign_to_lists,
    exact_topk,
    exact_topk_probed,
    load_index,
    probe_centroids,
    save_index,
    train_centroids,
)
from .kernel import DimBlockSpec, PartialAccumulator, accumulate, partial_dot, partial_l2, should_prune
from .pipeline import PrewarmCache, merge_topk, prewarm_heap, query_pipeline
from .planner import (
    CostCoefficients,
    PartitionPlan,
    WorkloadProfile,
    enumerate_plans,
    imbalance,
    query_cost,
    select_plan,
)
from .router import VisitOrder, map_to_shards, schedule_order, split_query

__all__ = [
    "ClusterIndex",
    "CostCoefficients",
    "DimBlockSpec",
    "PartialAccumulator",
    "PartitionPlan",
    "PrewarmCache",
    "TopKResult",
    "VectorBatch",
    "VisitOrder",
    "WorkloadProfile",
    "accumulate",
    "assign_to_lists",
    "enumerate_plans",
    "exact_topk",
    "exact_topk_probed",
    "imbalance",
    "load_index",
    "map_to_shards",
    "merge_topk",
    "partial_dot",
    "partial_l2",
    "prewarm_heap",
    "probe_centroids",
    "query_cost",
    "query_pipeline",
    "save_index",
    "schedule_order",
    "select_plan",
    "should_prune",
    "split_query",
    "train_centroids",
]
