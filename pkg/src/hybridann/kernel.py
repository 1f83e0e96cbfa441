"""Blocked partial distances and the monotone pruning predicate.

A vector of dimension d is cut into contiguous dimension blocks. The squared L2
distance is the sum of per-block contributions, each nonnegative, so the running
sum over visited blocks is a lower bound on the full distance. A candidate whose
running sum already exceeds the current k-th best distance can be dropped.

Dot products decompose the same way but their partial sums are signed, so they
are aggregated without any pruning.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import AlreadyPruned, BadBlock, BadParam, DimMismatch, NegativePartial


@dataclass(frozen=True)
class DimBlockSpec:
    """Contiguous, disjoint dimension blocks covering ``[0, d)``."""

    boundaries: tuple[int, ...]

    def __post_init__(self) -> None:
        b = tuple(int(x) for x in self.boundaries)
        if len(b) < 2 or b[0] != 0:
            raise BadParam("boundaries must start at 0 and define at least one block")
        if any(hi <= lo for lo, hi in zip(b, b[1:])):
            raise BadParam("block boundaries must be strictly ascending")
        object.__setattr__(self, "boundaries", b)

    @classmethod
    def equal(cls, dim: int, block_count: int) -> "DimBlockSpec":
        """Equal-width blocks; the remainder goes to the last block."""
        if block_count < 1 or block_count > dim:
            raise BadParam(f"block_count must be in [1, {dim}], got {block_count}")
        width = dim // block_count
        bounds = [i * width for i in range(block_count)] + [dim]
        return cls(tuple(bounds))

    @property
    def block_count(self) -> int:
        return len(self.boundaries) - 1

    @property
    def dim(self) -> int:
        return self.boundaries[-1]

    def bounds(self, block: int) -> tuple[int, int]:
        if not 0 <= block < self.block_count:
            raise BadBlock(f"block {block} outside [0, {self.block_count})")
        return self.boundaries[block], self.boundaries[block + 1]

    def width(self, block: int) -> int:
        lo, hi = self.bounds(block)
        return hi - lo

    def widths(self) -> list[int]:
        return [hi - lo for lo, hi in zip(self.boundaries, self.boundaries[1:])]

    def slice(self, block: int) -> slice:
        lo, hi = self.bounds(block)
        return slice(lo, hi)


def _check_pair(q, v, spec: DimBlockSpec) -> tuple[np.ndarray, np.ndarray]:
    q = np.asarray(q, dtype=np.float32)
    v = np.asarray(v, dtype=np.float32)
    if q.shape != (spec.dim,) or v.shape != (spec.dim,):
        raise DimMismatch(f"vectors {q.shape}/{v.shape} do not match block spec dim {spec.dim}")
    return q, v


def partial_l2(q, v, spec: DimBlockSpec, block: int) -> float:
    """Squared L2 contribution of one dimension block."""
    q, v = _check_pair(q, v, spec)
    sl = spec.slice(block)
    diff = q[sl].astype(np.float64) - v[sl].astype(np.float64)
    return float(np.dot(diff, diff))


def partial_dot(q, v, spec: DimBlockSpec, block: int) -> float:
    """Signed dot-product contribution of one dimension block."""
    q, v = _check_pair(q, v, spec)
    sl = spec.slice(block)
    return float(np.dot(q[sl].astype(np.float64), v[sl].astype(np.float64)))


def block_sq_dists(q_block: np.ndarray, rows: np.ndarray) -> np.ndarray:
    """Vectorised partial L2: one block of the query against many block rows."""
    diff = rows.astype(np.float64) - q_block.astype(np.float64)
    return np.einsum("ij,ij->i", diff, diff)


def blocked_sq_dists(q, X: np.ndarray, spec: DimBlockSpec, order=None) -> np.ndarray:
    """Full squared L2 accumulated block by block in ``order`` (default ascending)."""
    q = np.asarray(q, dtype=np.float32)
    order = range(spec.block_count) if order is None else order
    total = np.zeros(X.shape[0])
    for b in order:
        sl = spec.slice(b)
        total += block_sq_dists(q[sl], X[:, sl])
    return total


@dataclass
class PartialAccumulator:
    """Running sum of block contributions for one (query, candidate) pair."""

    query_id: int
    candidate_id: int
    s_sq: float = 0.0
    visited_mask: int = 0
    pruned: bool = False

    def visited(self, block: int) -> bool:
        return bool(self.visited_mask >> block & 1)


def accumulate(acc: PartialAccumulator, d_k_sq: float, block: int) -> PartialAccumulator:
    """Add one block's contribution; sums are applied in call order."""
    if acc.pruned:
        raise AlreadyPruned(f"candidate {acc.candidate_id} of query {acc.query_id} was pruned")
    if d_k_sq < 0:
        raise NegativePartial(f"negative partial {d_k_sq!r}; signed metrics cannot be accumulated")
    if acc.visited(block):
        raise BadBlock(f"block {block} already accumulated")
    acc.s_sq += float(d_k_sq)
    acc.visited_mask |= 1 << block
    return acc


def should_prune(acc: PartialAccumulator, tau_sq: float) -> bool:
    """True iff the running sum strictly exceeds the threshold."""
    return acc.s_sq > tau_sq


def advance_block(
    q_block: np.ndarray,
    rows: np.ndarray,
    s_sq: np.ndarray,
    tau_sq: float,
    prune: bool = True,
) -> np.ndarray:
    """Accumulate one block for many candidates and return the survivor mask.

    ``s_sq`` is updated in place. With ``prune`` off every candidate survives.
    """
    s_sq += block_sq_dists(q_block, rows)
    if not prune:
        return np.ones(s_sq.shape[0], dtype=bool)
    return s_sq <= tau_sq
