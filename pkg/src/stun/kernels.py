"""Hot-loop kernels, compiled when available.

The Cython extension ``stun._kernels`` is used if it was built; otherwise the
numpy implementations in ``stun._fallback`` are. Setting ``STUN_PURE_PYTHON=1``
forces the fallback. ``BACKEND`` names the active implementation.
"""
from __future__ import annotations

import os

import numpy as np

from . import _fallback

_compiled = None
if os.environ.get("STUN_PURE_PYTHON", "") not in ("1", "true", "yes"):
    try:
        from . import _kernels as _compiled
    except ImportError:
        _compiled = None

BACKEND = "cython" if _compiled is not None else "numpy"
_impl = _compiled if _compiled is not None else _fallback

KIND_CODE = {"doublet": 0, "triplet": 1, "quadruplet": 2}


def _f64(x) -> np.ndarray:
    x = np.ascontiguousarray(x, dtype=np.float64)
    if x.ndim == 1:
        x = x[None, :]
    return x


def _ids(ids, n: int) -> np.ndarray:
    ids = np.ascontiguousarray(np.arange(n) if ids is None else ids, dtype=np.int64)
    if ids.shape != (n,):
        raise ValueError("one id per database row is required")
    return ids


def pairwise_sqdist(a, b, impl=None) -> np.ndarray:
    return (impl or _impl).pairwise_sqdist(_f64(a), _f64(b))


def topk_l2(db, queries, k: int, ids=None, impl=None) -> tuple[np.ndarray, np.ndarray]:
    """Row positions and distances of the ``k`` nearest database rows per query.

    Ordered by ascending distance, ties by ascending id.
    """
    db, queries = _f64(db), _f64(queries)
    return (impl or _impl).topk_l2(db, queries, _ids(ids, db.shape[0]), int(k))


def topk_mls(db_mean, db_var, q_mean, q_var, k: int, ids=None, impl=None) -> tuple[np.ndarray, np.ndarray]:
    """Row positions and MLS scores of the ``k`` best database rows, by descending score then id."""
    db_mean, db_var, q_mean, q_var = map(_f64, (db_mean, db_var, q_mean, q_var))
    if db_var.shape != db_mean.shape or q_var.shape != q_mean.shape:
        raise ValueError("mean and variance shapes differ")
    return (impl or _impl).topk_mls(db_mean, db_var, q_mean, q_var, _ids(ids, db_mean.shape[0]), int(k))


def tuple_losses(means, rows, kind: str, margins: tuple[float, ...], impl=None) -> np.ndarray:
    """Hinge (or contrastive) loss value of every tuple row against cached means."""
    means = _f64(means)
    code = KIND_CODE[kind]
    width = 3 if code == 0 else code + 2
    rows = np.ascontiguousarray(rows, dtype=np.int64).reshape(-1, width)
    idx = rows[:, :2] if code == 0 else rows
    if idx.size and (idx.min() < 0 or idx.max() >= means.shape[0]):
        raise IndexError("tuple index out of range")
    m1 = float(margins[0])
    m2 = float(margins[1]) if len(margins) > 1 else 0.0
    return (impl or _impl).tuple_losses(means, rows, code, m1, m2)
