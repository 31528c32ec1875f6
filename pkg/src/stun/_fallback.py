"""Pure-numpy versions of the compiled kernels in ``_kernels.pyx``."""
from __future__ import annotations

import numpy as np

_CHUNK_ELEMS = 1 << 23  # cap on the (rows, N, D) broadcast per chunk


def _chunks(n_rows: int, n_db: int, d: int):
    step = max(1, _CHUNK_ELEMS // max(1, n_db * d))
    for start in range(0, n_rows, step):
        yield slice(start, min(start + step, n_rows))


def pairwise_sqdist(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    if a.shape[1] != b.shape[1]:
        raise ValueError("dimension mismatch")
    out = np.empty((a.shape[0], b.shape[0]))
    for sl in _chunks(a.shape[0], b.shape[0], a.shape[1]):
        out[sl] = ((a[sl, None, :] - b[None, :, :]) ** 2).sum(axis=-1)
    return out


def _rank(keys: np.ndarray, ids: np.ndarray, k: int) -> np.ndarray:
    # lexsort: last key is primary
    return np.lexsort((np.broadcast_to(ids, keys.shape), keys), axis=-1)[:, :k]


def _check_k(n: int, k: int) -> None:
    if k > n or k < 1:
        raise ValueError("k must lie in [1, N]")


def topk_l2(db: np.ndarray, queries: np.ndarray, ids: np.ndarray, k: int):
    if db.shape[1] != queries.shape[1]:
        raise ValueError("dimension mismatch")
    _check_k(db.shape[0], k)
    d2 = pairwise_sqdist(queries, db)
    pos = _rank(d2, ids, k).astype(np.int64)
    return pos, np.sqrt(np.take_along_axis(d2, pos, axis=1))


def topk_mls(db_mean, db_var, q_mean, q_var, ids, k: int, floor: float = 1e-6):
    d = db_mean.shape[1]
    if q_mean.shape[1] != d or db_var.shape[1] != d or q_var.shape[1] != d:
        raise ValueError("dimension mismatch")
    _check_k(db_mean.shape[0], k)
    db_var = np.maximum(db_var, floor)
    cost = np.empty((q_mean.shape[0], db_mean.shape[0]))
    for sl in _chunks(q_mean.shape[0], db_mean.shape[0], d):
        s = np.maximum(q_var[sl], floor)[:, None, :] + db_var[None, :, :]
        cost[sl] = ((q_mean[sl, None, :] - db_mean[None, :, :]) ** 2 / s + np.log(s)).sum(axis=-1)
    pos = _rank(cost, ids, k).astype(np.int64)
    return pos, -0.5 * np.take_along_axis(cost, pos, axis=1)


def tuple_losses(means: np.ndarray, rows: np.ndarray, kind: int, m1: float, m2: float) -> np.ndarray:
    if rows.shape[0] == 0:
        return np.zeros(0, dtype=np.float64)

    def sq(i, j):
        return ((means[rows[:, i]] - means[rows[:, j]]) ** 2).sum(axis=-1)

    if kind == 0:
        d2 = sq(0, 1)
        return np.where(rows[:, 2].astype(bool), d2, np.maximum(m1 - d2, 0.0))
    d_ap = np.sqrt(sq(0, 1))
    h1 = np.maximum(d_ap - np.sqrt(sq(0, 2)) + m1, 0.0)
    if kind == 1:
        return h1
    return h1 + np.maximum(d_ap - np.sqrt(sq(0, 3)) + m2, 0.0)
