"""Flat embedding index with exact Euclidean and MLS search."""
from __future__ import annotations

import os
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from . import kernels
from .core import EmbeddingDistribution

INDEX_VERSION = 1


@dataclass(frozen=True, eq=False)
class EmbeddingIndex:
    ids: np.ndarray  # (N,) int64, insertion order
    means: np.ndarray  # (N, D)
    variances: np.ndarray | None  # (N, D); None for deterministic embeddings
    geos: np.ndarray  # (N, 2)

    def __post_init__(self):
        n = self.ids.shape[0]
        if self.means.ndim != 2 or self.means.shape[0] != n or self.geos.shape != (n, 2):
            raise ValueError("ids, means and geos must have matching row counts")
        if self.variances is not None and self.variances.shape != self.means.shape:
            raise ValueError("variance matrix shape differs from mean matrix")
        if len(np.unique(self.ids)) != n:
            raise ValueError("duplicate ids in index")
        norms = np.linalg.norm(self.means, axis=1)
        if n and np.max(np.abs(norms - 1.0)) > 1e-5:
            raise ValueError("index means must be unit-norm")

    def __len__(self) -> int:
        return self.ids.shape[0]

    @property
    def dim(self) -> int:
        return self.means.shape[1]


@dataclass(frozen=True)
class RetrievalResult:
    query_id: int
    ids: tuple[int, ...]
    scores: tuple[float, ...]  # distances (ascending) or MLS scores (descending)
    uncertainty: float | None
    positions: tuple[int, ...] = ()  # row positions in the index


def build_index(embeddings, ids: Sequence[int], geos) -> EmbeddingIndex:
    """Index from a list of EmbeddingDistribution or a ``(means, variances)`` pair of arrays."""
    if isinstance(embeddings, tuple):
        means, var = embeddings
    else:
        embeddings = list(embeddings)
        if not embeddings:
            raise ValueError("cannot index zero embeddings")
        dims = {e.dim for e in embeddings}
        if len(dims) != 1:
            raise ValueError(f"dimension mismatch across embeddings: {sorted(dims)}")
        means = np.stack([e.mean for e in embeddings])
        var = np.stack([e.variance for e in embeddings])
    means = np.ascontiguousarray(means, dtype=np.float64)
    if means.shape[0] == 0:
        raise ValueError("cannot index zero embeddings")
    var = None if var is None else np.ascontiguousarray(var, dtype=np.float64)
    return EmbeddingIndex(
        np.asarray(ids, dtype=np.int64).copy(),
        means,
        var,
        np.asarray(geos, dtype=np.float64).reshape(-1, 2).copy(),
    )


def uncertainty_scalar(dist) -> float:
    """Mean of the variance vector."""
    var = dist.variance if isinstance(dist, EmbeddingDistribution) else np.asarray(dist, dtype=np.float64)
    return float(np.mean(var))


def _unpack(query) -> tuple[np.ndarray, np.ndarray | None]:
    if isinstance(query, EmbeddingDistribution):
        return query.mean, query.variance
    return np.asarray(query, dtype=np.float64), None


def search(index: EmbeddingIndex, q_means, k: int, q_vars=None, mls: bool = False) -> tuple[np.ndarray, np.ndarray]:
    """Batched exhaustive search returning (row positions, scores), each (Q, k)."""
    if k > len(index) or k < 1:
        raise ValueError(f"k={k} outside [1, {len(index)}]")
    q_means = np.atleast_2d(np.asarray(q_means, dtype=np.float64))
    if q_means.shape[1] != index.dim:
        raise ValueError(f"query dimension {q_means.shape[1]} differs from index dimension {index.dim}")
    if mls:
        if index.variances is None or q_vars is None:
            raise ValueError("MLS matching needs query and database variances")
        return kernels.topk_mls(index.means, index.variances, q_means, np.atleast_2d(q_vars), k, ids=index.ids)
    return kernels.topk_l2(index.means, q_means, k, ids=index.ids)


def _result(index, query, pos, score, query_id) -> RetrievalResult:
    _, var = _unpack(query)
    return RetrievalResult(
        query_id=query_id,
        ids=tuple(int(index.ids[p]) for p in pos),
        scores=tuple(float(s) for s in score),
        uncertainty=None if var is None else uncertainty_scalar(var),
        positions=tuple(int(p) for p in pos),
    )


def query_topk(index: EmbeddingIndex, query, k: int, query_id: int = -1) -> RetrievalResult:
    """The k nearest entries by Euclidean distance on means; ties go to the smaller id."""
    mean, _ = _unpack(query)
    pos, dist = search(index, mean, k)
    return _result(index, query, pos[0], dist[0], query_id)


def query_topk_mls(index: EmbeddingIndex, query: EmbeddingDistribution, k: int, query_id: int = -1) -> RetrievalResult:
    """The k entries with the highest mutual likelihood score; ties go to the smaller id."""
    mean, var = _unpack(query)
    if var is None:
        raise ValueError("MLS matching needs a query variance")
    pos, score = search(index, mean, k, var, mls=True)
    return _result(index, query, pos[0], score[0], query_id)


def save_index(index: EmbeddingIndex, path: str | os.PathLike) -> Path:
    """Write ``header = [N, D, version, has_variance]`` plus the arrays to an ``.npz``."""
    path = Path(path)
    arrays = {
        "header": np.array([len(index), index.dim, INDEX_VERSION, index.variances is not None], dtype=np.int64),
        "ids": index.ids,
        "means": index.means,
        "geos": index.geos,
    }
    if index.variances is not None:
        arrays["variances"] = index.variances
    tmp = path.with_name(path.name + ".tmp.npz")
    np.savez(tmp, **arrays)
    os.replace(tmp, path)
    return path


def load_index(path: str | os.PathLike) -> EmbeddingIndex:
    with np.load(Path(path)) as z:
        n, d, version, has_var = (int(x) for x in z["header"])
        if version != INDEX_VERSION:
            raise ValueError(f"unsupported index version {version}")
        index = EmbeddingIndex(z["ids"], z["means"], z["variances"] if has_var else None, z["geos"])
    if index.means.shape != (n, d):
        raise ValueError("index header does not match stored arrays")
    return index
