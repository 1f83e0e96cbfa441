"""TEXMEX vector files and synthetic datasets."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import BadParam, FormatError
from .index import VectorBatch


def _read_vecs(path, value_dtype, value_size: int) -> np.ndarray:
    raw = np.fromfile(path, dtype=np.uint8)
    if raw.size == 0:
        return np.empty((0, 0), dtype=value_dtype)
    dim = int(raw[:4].view("<i4")[0])
    if dim <= 0:
        raise FormatError(f"{path}: bad dimension header {dim}")
    row = 4 + dim * value_size
    if raw.size % row:
        raise FormatError(f"{path}: size {raw.size} is not a multiple of record size {row}")
    rows = raw.reshape(-1, row)
    if not (rows[:, :4].copy().view("<i4")[:, 0] == dim).all():
        raise FormatError(f"{path}: inconsistent per-record dimension")
    return rows[:, 4:].copy().view(value_dtype).reshape(-1, dim)


def read_fvecs(path) -> np.ndarray:
    return _read_vecs(path, "<f4", 4).astype(np.float32)


def read_bvecs(path) -> np.ndarray:
    return _read_vecs(path, np.uint8, 1).astype(np.float32)


def read_ivecs(path) -> np.ndarray:
    return _read_vecs(path, "<i4", 4).astype(np.int64)


def _write_vecs(path, arr: np.ndarray, dtype) -> None:
    arr = np.ascontiguousarray(arr, dtype=dtype)
    n, d = arr.shape
    head = np.full((n, 1), d, dtype="<i4").view(np.uint8)
    body = arr.view(np.uint8).reshape(n, -1)
    np.hstack([head, body]).tofile(path)


def write_fvecs(path, arr) -> None:
    _write_vecs(path, arr, "<f4")


def write_bvecs(path, arr) -> None:
    _write_vecs(path, arr, np.uint8)


def write_ivecs(path, arr) -> None:
    _write_vecs(path, arr, "<i4")


def read_vectors(path) -> np.ndarray:
    suffix = Path(path).suffix
    readers = {".fvecs": read_fvecs, ".bvecs": read_bvecs, ".ivecs": read_ivecs, ".npy": np.load}
    if suffix not in readers:
        raise BadParam(f"unsupported vector file type {suffix!r}")
    return np.asarray(readers[suffix](path))


def gaussian_mixture(
    n: int, dim: int, n_centers: int = 64, spread: float = 1.0, center_scale: float = 4.0, seed: int = 0
) -> np.ndarray:
    """Points around random centres; the clustered shape real embeddings have."""
    if n < 1 or dim < 1 or n_centers < 1:
        raise BadParam("n, dim and n_centers must be positive")
    rng = np.random.default_rng(seed)
    centers = rng.normal(scale=center_scale, size=(n_centers, dim))
    labels = rng.integers(n_centers, size=n)
    return (centers[labels] + rng.normal(scale=spread, size=(n, dim))).astype(np.float32)


@dataclass
class Dataset:
    name: str
    base: VectorBatch
    queries: VectorBatch
    truth: np.ndarray | None = None


def synthetic_dataset(
    n: int = 10_000, dim: int = 128, q_count: int = 200, seed: int = 0, n_centers: int = 64, name: str | None = None
) -> Dataset:
    """Gaussian-mixture base plus held-out queries drawn from the same mixture."""
    data = gaussian_mixture(n + q_count, dim, n_centers=n_centers, seed=seed)
    return Dataset(
        name or f"gaussian-{n}x{dim}",
        VectorBatch.from_array(data[:n]),
        VectorBatch.from_array(data[n:]),
    )


def load_dataset(base_path, query_path, truth_path=None, name: str | None = None, limit: int | None = None) -> Dataset:
    base = read_vectors(base_path)
    queries = read_vectors(query_path)
    if limit is not None:
        queries = queries[:limit]
    if base.shape[1] != queries.shape[1]:
        raise BadParam(f"base dim {base.shape[1]} != query dim {queries.shape[1]}")
    truth = read_ivecs(truth_path)[: queries.shape[0]] if truth_path else None
    return Dataset(
        name or Path(base_path).stem,
        VectorBatch.from_array(base),
        VectorBatch.from_array(queries),
        truth,
    )
