# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled inner loops for exhaustive search and tuple-loss evaluation.

Mirrors ``stun._fallback`` function for function; the two must agree on
rankings (ties broken by ascending id) and to rounding on values.
"""
import numpy as np
cimport numpy as cnp
from libc.math cimport sqrt, log

cnp.import_array()

ctypedef cnp.float64_t f64
ctypedef cnp.int64_t i64


cdef inline f64 _sqdist(const f64[:, ::1] a, Py_ssize_t i, const f64[:, ::1] b, Py_ssize_t j) noexcept nogil:
    cdef Py_ssize_t k
    cdef f64 acc = 0.0, t
    for k in range(a.shape[1]):
        t = a[i, k] - b[j, k]
        acc += t * t
    return acc


cdef inline bint _before(f64 d, i64 id_, f64 bd, i64 bid) noexcept nogil:
    return d < bd or (d == bd and id_ < bid)


cdef void _insert(f64 d, i64 id_, Py_ssize_t pos, f64[::1] bd, i64[::1] bid, i64[::1] bpos,
                  Py_ssize_t *filled, Py_ssize_t k) noexcept nogil:
    cdef Py_ssize_t j
    if filled[0] == k:
        if not _before(d, id_, bd[k - 1], bid[k - 1]):
            return
        j = k - 1
    else:
        j = filled[0]
        filled[0] += 1
    while j > 0 and _before(d, id_, bd[j - 1], bid[j - 1]):
        bd[j] = bd[j - 1]
        bid[j] = bid[j - 1]
        bpos[j] = bpos[j - 1]
        j -= 1
    bd[j] = d
    bid[j] = id_
    bpos[j] = pos


def pairwise_sqdist(const f64[:, ::1] a, const f64[:, ::1] b):
    if a.shape[1] != b.shape[1]:
        raise ValueError("dimension mismatch")
    cdef Py_ssize_t n = a.shape[0], m = b.shape[0], i, j
    out = np.empty((n, m), dtype=np.float64)
    cdef f64[:, ::1] o = out
    with nogil:
        for i in range(n):
            for j in range(m):
                o[i, j] = _sqdist(a, i, b, j)
    return out


def topk_l2(const f64[:, ::1] db, const f64[:, ::1] queries, const i64[::1] ids, Py_ssize_t k):
    """Positions and Euclidean distances of the k nearest rows, ordered by (distance, id)."""
    cdef Py_ssize_t n = db.shape[0], nq = queries.shape[0], q, i, filled
    if db.shape[1] != queries.shape[1]:
        raise ValueError("dimension mismatch")
    if k > n or k < 1:
        raise ValueError("k must lie in [1, N]")
    pos = np.empty((nq, k), dtype=np.int64)
    dist = np.empty((nq, k), dtype=np.float64)
    cdef i64[:, ::1] P = pos
    cdef f64[:, ::1] D = dist
    cdef f64[::1] bd = np.empty(k, dtype=np.float64)
    cdef i64[::1] bid = np.empty(k, dtype=np.int64)
    cdef i64[::1] bpos = np.empty(k, dtype=np.int64)
    with nogil:
        for q in range(nq):
            filled = 0
            for i in range(n):
                _insert(_sqdist(queries, q, db, i), ids[i], i, bd, bid, bpos, &filled, k)
            for i in range(k):
                P[q, i] = bpos[i]
                D[q, i] = sqrt(bd[i])
    return pos, dist


def topk_mls(const f64[:, ::1] db_mean, const f64[:, ::1] db_var, const f64[:, ::1] q_mean,
             const f64[:, ::1] q_var, const i64[::1] ids, Py_ssize_t k, f64 floor=1e-6):
    """Positions and mutual likelihood scores of the k best rows, ordered by (-score, id)."""
    cdef Py_ssize_t n = db_mean.shape[0], nq = q_mean.shape[0], d = db_mean.shape[1]
    cdef Py_ssize_t q, i, j, filled
    cdef f64 acc, s, t, va, vb
    if q_mean.shape[1] != d or db_var.shape[1] != d or q_var.shape[1] != d:
        raise ValueError("dimension mismatch")
    if k > n or k < 1:
        raise ValueError("k must lie in [1, N]")
    pos = np.empty((nq, k), dtype=np.int64)
    score = np.empty((nq, k), dtype=np.float64)
    cdef i64[:, ::1] P = pos
    cdef f64[:, ::1] S = score
    cdef f64[::1] bd = np.empty(k, dtype=np.float64)
    cdef i64[::1] bid = np.empty(k, dtype=np.int64)
    cdef i64[::1] bpos = np.empty(k, dtype=np.int64)
    with nogil:
        for q in range(nq):
            filled = 0
            for i in range(n):
                acc = 0.0
                for j in range(d):
                    va = q_var[q, j] if q_var[q, j] > floor else floor
                    vb = db_var[i, j] if db_var[i, j] > floor else floor
                    s = va + vb
                    t = q_mean[q, j] - db_mean[i, j]
                    acc += t * t / s + log(s)
                # acc is -2 * score; smaller is better
                _insert(acc, ids[i], i, bd, bid, bpos, &filled, k)
            for i in range(k):
                P[q, i] = bpos[i]
                S[q, i] = -0.5 * bd[i]
    return pos, score


def tuple_losses(const f64[:, ::1] means, const i64[:, ::1] rows, int kind, f64 m1, f64 m2):
    """Loss of each tuple. kind 0: doublet rows (a, b, similar); 1: triplet; 2: quadruplet."""
    cdef Py_ssize_t t, nt = rows.shape[0]
    cdef f64 d_ap, h1, h2, d2
    out = np.empty(nt, dtype=np.float64)
    cdef f64[::1] o = out
    with nogil:
        for t in range(nt):
            if kind == 0:
                d2 = _sqdist(means, rows[t, 0], means, rows[t, 1])
                if rows[t, 2]:
                    o[t] = d2
                else:
                    o[t] = m1 - d2 if m1 - d2 > 0.0 else 0.0
            else:
                d_ap = sqrt(_sqdist(means, rows[t, 0], means, rows[t, 1]))
                h1 = d_ap - sqrt(_sqdist(means, rows[t, 0], means, rows[t, 2])) + m1
                h1 = h1 if h1 > 0.0 else 0.0
                if kind == 1:
                    o[t] = h1
                else:
                    h2 = d_ap - sqrt(_sqdist(means, rows[t, 0], means, rows[t, 3])) + m2
                    o[t] = h1 + (h2 if h2 > 0.0 else 0.0)
    return out
