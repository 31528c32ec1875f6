"""Tuple construction and hard-negative filtering for teacher training.

Only tuples whose loss is strictly positive under the current cached teacher
means are kept. Caches are refreshed once per epoch.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .core import ExperimentConfig, TupleBatch, TupleKind, label_matrix, pairwise_geo_distances
from .kernels import tuple_losses

POSITIVE_TOL = 1e-9
NO_POSITIVE = "no-positive"


class StaleCacheError(RuntimeError):
    """Cached means were computed for a different epoch than the one being mined."""


@dataclass
class MiningPool:
    geos: np.ndarray  # (N, 2)
    positive: np.ndarray  # (N, N) bool, diagonal False
    negative: np.ndarray  # (N, N) bool
    means: np.ndarray | None = None
    cache_epoch: int = -1
    _pos_lists: list = field(default_factory=list, repr=False)
    _neg_lists: list = field(default_factory=list, repr=False)

    @classmethod
    def from_geos(cls, geos: np.ndarray, cfg: ExperimentConfig) -> "MiningPool":
        geos = np.asarray(geos, dtype=np.float64).reshape(-1, 2)
        pos, neg = label_matrix(pairwise_geo_distances(geos), cfg)
        np.fill_diagonal(pos, False)
        pool = cls(geos, pos, neg)
        pool._pos_lists = [np.flatnonzero(r) for r in pos]
        pool._neg_lists = [np.flatnonzero(r) for r in neg]
        return pool

    @classmethod
    def from_dataset(cls, dataset, cfg: ExperimentConfig) -> "MiningPool":
        return cls.from_geos(dataset.geos(), cfg)

    def __len__(self) -> int:
        return self.geos.shape[0]

    def refresh(self, means: np.ndarray, epoch: int) -> None:
        means = np.asarray(means, dtype=np.float64)
        if means.shape[0] != len(self):
            raise ValueError(f"cache has {means.shape[0]} rows for a pool of {len(self)}")
        self.means = means
        self.cache_epoch = epoch

    def positives_of(self, anchor: int) -> np.ndarray:
        return self._pos_lists[anchor]

    def negatives_of(self, anchor: int) -> np.ndarray:
        return self._neg_lists[anchor]

    def valid_anchors(self) -> np.ndarray:
        return np.flatnonzero(self.positive.any(axis=1))


def _rows(pool: MiningPool, anchor: int, kind: TupleKind) -> np.ndarray:
    pos, neg = pool.positives_of(anchor), pool.negatives_of(anchor)
    if kind is TupleKind.DOUBLET:
        a = np.full(len(pos) + len(neg), anchor)
        other = np.concatenate([pos, neg])
        sim = np.concatenate([np.ones(len(pos), np.int64), np.zeros(len(neg), np.int64)])
        return np.stack([a, other, sim], axis=1).astype(np.int64)
    if kind is TupleKind.TRIPLET:
        p, n = np.meshgrid(pos, neg, indexing="ij")
        return np.stack([np.full(p.size, anchor), p.ravel(), n.ravel()], axis=1).astype(np.int64)
    p, n1, n2 = np.meshgrid(pos, neg, neg, indexing="ij")
    p, n1, n2 = p.ravel(), n1.ravel(), n2.ravel()
    ok = pool.negative[p, n2] & pool.negative[n1, n2]
    p, n1, n2 = p[ok], n1[ok], n2[ok]
    return np.stack([np.full(p.size, anchor), p, n1, n2], axis=1).astype(np.int64)


def candidate_tuples(pool: MiningPool, anchor: int, kind: TupleKind | str) -> TupleBatch:
    """Every geometrically valid tuple rooted at ``anchor``.

    Positives lie within the positive radius, negatives beyond the negative
    radius, and a quadruplet's second negative is also negative to the
    positive and to the first negative. An anchor without positives yields an
    empty batch flagged ``"no-positive"``.
    """
    kind = TupleKind(kind)
    width = {TupleKind.DOUBLET: 3, TupleKind.TRIPLET: 3, TupleKind.QUADRUPLET: 4}[kind]
    if len(pool.positives_of(anchor)) == 0:
        return TupleBatch.from_rows(kind, [], flags={NO_POSITIVE})
    rows = _rows(pool, anchor, kind).reshape(-1, width)
    return TupleBatch.from_rows(kind, [tuple(int(x) for x in r) for r in rows])


def batch_to_rows(tuples: TupleBatch) -> np.ndarray:
    kind = tuples.kind
    if kind is TupleKind.DOUBLET:
        cols = [tuples.anchors, tuples.positives, [int(s) for s in tuples.similar]]
    elif kind is TupleKind.TRIPLET:
        cols = [tuples.anchors, tuples.positives, tuples.negatives1]
    else:
        cols = [tuples.anchors, tuples.positives, tuples.negatives1, tuples.negatives2]
    return np.array(cols, dtype=np.int64).T.reshape(len(tuples), len(cols))


def _margins(kind: TupleKind, cfg: ExperimentConfig) -> tuple[float, ...]:
    if kind is TupleKind.DOUBLET:
        return (cfg.contrastive_margin,)
    if kind is TupleKind.TRIPLET:
        return (cfg.triplet_margin,)
    return (cfg.quadruplet_margin1, cfg.quadruplet_margin2)


def filter_violating(tuples: TupleBatch, means, cfg: ExperimentConfig, epoch: int | None = None) -> TupleBatch:
    """Keep exactly the tuples whose loss exceeds ``POSITIVE_TOL`` under ``means``.

    ``means`` is either the cached (N, D) array or a :class:`MiningPool`; with a
    pool and an ``epoch``, a cache from another epoch raises StaleCacheError.
    """
    if isinstance(means, MiningPool):
        if epoch is not None and means.cache_epoch != epoch:
            raise StaleCacheError(f"cache is from epoch {means.cache_epoch}, mining epoch {epoch}")
        if means.means is None:
            raise StaleCacheError("pool cache is empty")
        means = means.means
    if len(tuples) == 0:
        return TupleBatch.from_rows(tuples.kind, [], flags=tuples.flags)
    rows = batch_to_rows(tuples)
    loss = tuple_losses(means, rows, tuples.kind.value, _margins(tuples.kind, cfg))
    keep = rows[loss > POSITIVE_TOL]
    return TupleBatch.from_rows(tuples.kind, [tuple(int(x) for x in r) for r in keep], flags=tuples.flags)


def _quadruplet_rows_capped(pool: MiningPool, anchor: int, cfg: ExperimentConfig, k: int) -> np.ndarray:
    """Quadruplets built from the k hardest first and second negatives of each positive."""
    means = pool.means
    pos, neg = pool.positives_of(anchor), pool.negatives_of(anchor)
    m1, m2 = cfg.quadruplet_margin1, cfg.quadruplet_margin2
    d_an = np.sqrt(((means[neg] - means[anchor]) ** 2).sum(axis=1))
    hard = neg[np.argsort(d_an, kind="stable")[: max(k, 1)]]
    out = []
    for p in pos:
        n2_ok = hard[pool.negative[p, hard]]
        if n2_ok.size == 0:
            continue
        n1, n2 = np.meshgrid(hard, n2_ok, indexing="ij")
        n1, n2 = n1.ravel(), n2.ravel()
        ok = pool.negative[n1, n2]
        if ok.any():
            out.append(np.stack([np.full(ok.sum(), anchor), np.full(ok.sum(), p), n1[ok], n2[ok]], axis=1))
    return np.concatenate(out).astype(np.int64) if out else np.zeros((0, 4), np.int64)


def mine_epoch(pool: MiningPool, cfg: ExperimentConfig, epoch: int, hardest_k: int | None = None) -> TupleBatch:
    """Violating tuples for one epoch, at most ``hardest_k`` per anchor (largest loss first).

    Triplets and doublets are enumerated exhaustively per anchor. Quadruplets
    are drawn from each anchor's ``hardest_k`` nearest negatives, since full
    enumeration grows cubically. Output is ordered by anchor id.
    """
    if pool.cache_epoch != epoch or pool.means is None:
        raise StaleCacheError(f"cache is from epoch {pool.cache_epoch}, mining epoch {epoch}")
    kind = cfg.tuple_kind
    k = cfg.hardest_k if hardest_k is None else hardest_k
    margins = _margins(kind, cfg)
    kept = []
    for anchor in pool.valid_anchors():
        if kind is TupleKind.QUADRUPLET:
            rows = _quadruplet_rows_capped(pool, int(anchor), cfg, k)
        else:
            rows = _rows(pool, int(anchor), kind)
        if rows.shape[0] == 0:
            continue
        loss = tuple_losses(pool.means, rows, kind.value, margins)
        viol = np.flatnonzero(loss > POSITIVE_TOL)
        if viol.size == 0:
            continue
        if kind is TupleKind.DOUBLET:
            # cap similar and dissimilar pairs separately; positive-pair losses dwarf the margin
            order = np.concatenate([
                g[np.argsort(-loss[g], kind="stable")][:k]
                for g in (viol[rows[viol, 2] == 1], viol[rows[viol, 2] == 0])
            ])
        else:
            order = viol[np.argsort(-loss[viol], kind="stable")][:k]
        kept.append(rows[np.sort(order)])
    if not kept:
        return TupleBatch.from_rows(kind, [])
    rows = np.concatenate(kept)
    return TupleBatch.from_rows(kind, [tuple(int(x) for x in r) for r in rows])
