"""Cluster-based (IVF) index: k-means training, inverted lists, exact oracle.

All distances are squared L2 computed in float64 from float32 storage; ties are
broken by ascending id everywhere so distributed and single-node answers can be
compared id-for-id.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import BadParam, DimMismatch, EmptyDataset, FormatError

DEFAULT_KMEANS_ITERS = 25

# rows processed per block when scanning against all centroids
_SCAN_CHUNK = 4096


def as_vector(q, dim: int | None = None) -> np.ndarray:
    """Validate a single query/base vector and return it as float32."""
    v = np.asarray(q, dtype=np.float32)
    if v.ndim != 1 or v.size == 0:
        raise BadParam(f"expected a non-empty 1-d vector, got shape {v.shape}")
    if not np.isfinite(v).all():
        raise BadParam("vector contains NaN or Inf")
    if dim is not None and v.size != dim:
        raise DimMismatch(f"vector has dim {v.size}, expected {dim}")
    return v


@dataclass(frozen=True)
class VectorBatch:
    """Row-major float32 vectors with unique int64 ids."""

    data: np.ndarray
    ids: np.ndarray

    def __post_init__(self) -> None:
        data = np.ascontiguousarray(self.data, dtype=np.float32)
        if data.ndim != 2:
            raise BadParam(f"batch data must be 2-d, got shape {data.shape}")
        ids = np.ascontiguousarray(self.ids, dtype=np.int64)
        if ids.shape != (data.shape[0],):
            raise BadParam("ids length must equal row count")
        if np.unique(ids).size != ids.size:
            raise BadParam("batch ids must be unique")
        if data.size and not np.isfinite(data).all():
            raise BadParam("batch contains NaN or Inf")
        data.flags.writeable = False
        ids.flags.writeable = False
        object.__setattr__(self, "data", data)
        object.__setattr__(self, "ids", ids)

    @classmethod
    def from_array(cls, data, ids=None) -> "VectorBatch":
        data = np.asarray(data, dtype=np.float32)
        if ids is None:
            ids = np.arange(data.shape[0], dtype=np.int64)
        return cls(data, ids)

    @property
    def count(self) -> int:
        return self.data.shape[0]

    @property
    def dim(self) -> int:
        return self.data.shape[1]

    def rows_of(self, ids) -> np.ndarray:
        """Row positions of the given ids (all must be present)."""
        order = np.argsort(self.ids, kind="stable")
        sorted_ids = self.ids[order]
        ids = np.asarray(ids, dtype=np.int64)
        pos = np.searchsorted(sorted_ids, ids)
        if ids.size and (pos.max() >= sorted_ids.size or not np.array_equal(sorted_ids[pos], ids)):
            raise BadParam("unknown vector id")
        return order[pos]


@dataclass
class ClusterIndex:
    """k-means centroids plus one inverted list of vector ids per centroid."""

    centroids: np.ndarray
    lists: list[np.ndarray] = field(default_factory=list)
    trained: bool = True

    @property
    def nlist(self) -> int:
        return self.centroids.shape[0]

    @property
    def dim(self) -> int:
        return self.centroids.shape[1]

    def list_sizes(self) -> np.ndarray:
        return np.array([lst.size for lst in self.lists], dtype=np.int64)


@dataclass(frozen=True)
class TopKResult:
    """Up to k (id, squared distance) pairs ordered by (distance, id)."""

    k: int
    ids: np.ndarray
    dists: np.ndarray
    metric: str = "l2"

    def __post_init__(self) -> None:
        ids = np.asarray(self.ids, dtype=np.int64)
        dists = np.asarray(self.dists, dtype=np.float64)
        if ids.shape != dists.shape or ids.size > self.k:
            raise BadParam("malformed top-k result")
        object.__setattr__(self, "ids", ids)
        object.__setattr__(self, "dists", dists)

    @classmethod
    def from_candidates(cls, ids, dists, k: int, metric: str = "l2") -> "TopKResult":
        ids = np.asarray(ids, dtype=np.int64)
        dists = np.asarray(dists, dtype=np.float64)
        order = np.lexsort((ids, dists))[:k]
        return cls(k, ids[order], dists[order], metric)

    def pairs(self) -> list[tuple[int, float]]:
        return [(int(i), float(d)) for i, d in zip(self.ids, self.dists)]

    def is_sorted(self) -> bool:
        keys = list(zip(self.dists.tolist(), self.ids.tolist()))
        return all(a < b for a, b in zip(keys, keys[1:]))

    def __len__(self) -> int:
        return int(self.ids.size)


def _sq_dists_to(points: np.ndarray, target: np.ndarray) -> np.ndarray:
    diff = points.astype(np.float64) - target.astype(np.float64)
    return np.einsum("ij,ij->i", diff, diff)


def _nearest_exact(X: np.ndarray, C: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Nearest centroid by exact differences; strict '<' keeps the lowest id on ties."""
    n = X.shape[0]
    best = np.full(n, np.inf)
    label = np.zeros(n, dtype=np.int64)
    Xd = X.astype(np.float64)
    for c in range(C.shape[0]):
        d = _sq_dists_to(Xd, C[c])
        better = d < best
        best[better] = d[better]
        label[better] = c
    return label, best


def _nearest_fast(X: np.ndarray, C: np.ndarray, x_sq: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    c_sq = np.einsum("ij,ij->i", C, C)
    labels = np.empty(X.shape[0], dtype=np.int64)
    d2 = np.empty(X.shape[0])
    for start in range(0, X.shape[0], _SCAN_CHUNK):
        sl = slice(start, start + _SCAN_CHUNK)
        block = x_sq[sl, None] - 2.0 * (X[sl] @ C.T) + c_sq[None, :]
        labels[sl] = np.argmin(block, axis=1)
        d2[sl] = np.maximum(block[np.arange(block.shape[0]), labels[sl]], 0.0)
    return labels, d2


def _kmeanspp(X: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = X.shape[0]
    chosen = [int(rng.integers(n))]
    closest = _sq_dists_to(X, X[chosen[0]])
    for _ in range(1, k):
        total = closest.sum()
        if total > 0:
            idx = int(rng.choice(n, p=closest / total))
        else:
            # all remaining points coincide with a chosen centre
            remaining = np.setdiff1d(np.arange(n), chosen)
            idx = int(rng.choice(remaining))
        chosen.append(idx)
        closest = np.minimum(closest, _sq_dists_to(X, X[idx]))
    return X[chosen].copy()


def _reseed_empty(X, C, labels, d2) -> bool:
    """Move each empty centroid onto the farthest point of the largest cluster."""
    nlist = C.shape[0]
    counts = np.bincount(labels, minlength=nlist)
    empty = np.flatnonzero(counts == 0)
    for c in empty:
        largest = int(np.argmax(counts))
        members = np.flatnonzero(labels == largest)
        far = members[int(np.argmax(d2[members]))]
        C[c] = X[far]
        counts[largest] -= 1
        counts[c] += 1
        labels[far] = c
        d2[far] = 0.0
    return empty.size > 0


def train_centroids(
    base: VectorBatch, nlist: int, iters: int = DEFAULT_KMEANS_ITERS, seed: int = 0
) -> ClusterIndex:
    """Lloyd's k-means with k-means++ seeding; deterministic for fixed inputs."""
    if base.count == 0:
        raise EmptyDataset("cannot train on an empty batch")
    if nlist <= 0 or nlist > base.count:
        raise BadParam(f"nlist must be in [1, {base.count}], got {nlist}")
    if iters < 1:
        raise BadParam("iters must be >= 1")

    X = base.data.astype(np.float64)
    x_sq = np.einsum("ij,ij->i", X, X)
    rng = np.random.default_rng(seed)
    C = _kmeanspp(X, nlist, rng)

    for _ in range(iters):
        labels, d2 = _nearest_fast(X, C, x_sq)
        _reseed_empty(X, C, labels, d2)
        counts = np.bincount(labels, minlength=nlist).astype(np.float64)
        sums = np.zeros_like(C)
        np.add.at(sums, labels, X)
        C = sums / counts[:, None]

    index = ClusterIndex(C.astype(np.float32), [], trained=True)
    index = assign_to_lists(base, index)
    for _ in range(nlist):
        if (index.list_sizes() > 0).all():
            break
        labels, d2 = _nearest_exact(base.data, index.centroids)
        C = index.centroids.astype(np.float64)
        _reseed_empty(X, C, labels, d2)
        index = assign_to_lists(base, ClusterIndex(C.astype(np.float32), [], trained=True))
    return index


def assign_to_lists(base: VectorBatch, index: ClusterIndex) -> ClusterIndex:
    """Place every base id in the list of its nearest centroid (ties: lowest centroid id)."""
    if not index.trained:
        raise BadParam("index is not trained")
    if base.dim != index.dim:
        raise DimMismatch(f"base dim {base.dim} != centroid dim {index.dim}")
    labels, _ = _nearest_exact(base.data, index.centroids)
    order = np.argsort(labels, kind="stable")
    bounds = np.searchsorted(labels[order], np.arange(index.nlist + 1))
    lists = [base.ids[order[bounds[c] : bounds[c + 1]]].copy() for c in range(index.nlist)]
    return ClusterIndex(index.centroids, lists, trained=True)


def probe_centroids(q, index: ClusterIndex, nprobe: int) -> np.ndarray:
    """The nprobe nearest centroid ids, ascending by distance then id."""
    if not 1 <= nprobe <= index.nlist:
        raise BadParam(f"nprobe must be in [1, {index.nlist}], got {nprobe}")
    q = np.asarray(q, dtype=np.float32)
    if q.shape != (index.dim,):
        raise DimMismatch(f"query dim {q.shape} != index dim {index.dim}")
    d = _sq_dists_to(index.centroids, q)
    return np.lexsort((np.arange(index.nlist), d))[:nprobe].astype(np.int64)


def exact_topk(base: VectorBatch, q, k: int) -> TopKResult:
    """Exhaustive k nearest neighbours over every base vector."""
    if k < 1:
        raise BadParam("k must be >= 1")
    q = np.asarray(q, dtype=np.float32)
    if q.shape != (base.dim,):
        raise DimMismatch(f"query dim {q.shape} != base dim {base.dim}")
    return TopKResult.from_candidates(base.ids, _sq_dists_to(base.data, q), k)


def probed_ids(index: ClusterIndex, probes: Sequence[int]) -> np.ndarray:
    """Union of the inverted lists named by ``probes``."""
    if len(probes) == 0:
        return np.empty(0, dtype=np.int64)
    return np.concatenate([index.lists[int(c)] for c in probes])


def exact_topk_probed(base: VectorBatch, index: ClusterIndex, q, k: int, nprobe: int) -> TopKResult:
    """Exact top-k restricted to the inverted lists the query probes."""
    ids = probed_ids(index, probe_centroids(q, index, nprobe))
    sub = base.data[base.rows_of(ids)]
    return TopKResult.from_candidates(ids, _sq_dists_to(sub, np.asarray(q, np.float32)), k)


# -- binary dump ------------------------------------------------------------

_MAGIC = b"HYBIVF"
_VERSION = 1
_HEADER = struct.Struct("<6sHIIQ")


def save_index(path, index: ClusterIndex, base: VectorBatch) -> None:
    """Write index + base vectors as a versioned little-endian binary file."""
    sizes = index.list_sizes().astype("<u8")
    with open(path, "wb") as f:
        f.write(_HEADER.pack(_MAGIC, _VERSION, index.dim, index.nlist, base.count))
        f.write(np.ascontiguousarray(index.centroids, dtype="<f4").tobytes())
        f.write(sizes.tobytes())
        for lst in index.lists:
            f.write(np.ascontiguousarray(lst, dtype="<i8").tobytes())
        f.write(np.ascontiguousarray(base.ids, dtype="<i8").tobytes())
        f.write(np.ascontiguousarray(base.data, dtype="<f4").tobytes())


def load_index(path) -> tuple[ClusterIndex, VectorBatch]:
    raw = Path(path).read_bytes()
    if len(raw) < _HEADER.size:
        raise FormatError("index file truncated")
    magic, version, dim, nlist, nb = _HEADER.unpack_from(raw, 0)
    if magic != _MAGIC:
        raise FormatError("not an index file")
    if version != _VERSION:
        raise FormatError(f"unsupported index version {version}")
    off = _HEADER.size

    def take(dtype, count):
        nonlocal off
        arr = np.frombuffer(raw, dtype=dtype, count=count, offset=off)
        off += arr.nbytes
        return arr

    try:
        centroids = take("<f4", nlist * dim).reshape(nlist, dim).astype(np.float32)
        sizes = take("<u8", nlist)
        lists = [take("<i8", int(s)).astype(np.int64) for s in sizes]
        ids = take("<i8", nb).astype(np.int64)
        data = take("<f4", nb * dim).reshape(nb, dim)
    except ValueError as exc:
        raise FormatError(f"index file truncated: {exc}") from exc
    if off != len(raw):
        raise FormatError("trailing bytes in index file")
    return ClusterIndex(centroids, lists, trained=True), VectorBatch(data, ids)
