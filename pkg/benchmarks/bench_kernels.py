"""Time the compiled kernels against the numpy fallback.

    python3 benchmarks/bench_kernels.py [--repeat 5] [--db 5000] [--queries 500] [--dim 256]

Prints the best-of-N wall time per kernel and backend, the speedup, and
whether both backends returned the same result.
"""
from __future__ import annotations

import argparse
import timeit

import numpy as np

from stun import _fallback, kernels


def _unit(rng, n, d):
    x = rng.standard_normal((n, d))
    return x / np.linalg.norm(x, axis=1, keepdims=True)


def cases(n_db: int, n_q: int, dim: int, k: int, seed: int = 0):
    rng = np.random.default_rng(seed)
    db, q = _unit(rng, n_db, dim), _unit(rng, n_q, dim)
    db_var, q_var = rng.uniform(0.01, 1.0, db.shape), rng.uniform(0.01, 1.0, q.shape)
    n_rows = 20 * n_db
    trip = rng.integers(0, n_db, size=(n_rows, 3))
    quad = rng.integers(0, n_db, size=(n_rows, 4))
    return {
        "topk_l2": lambda impl: kernels.topk_l2(db, q, k, impl=impl),
        "topk_mls": lambda impl: kernels.topk_mls(db, db_var, q, q_var, k, impl=impl),
        "triplet_losses": lambda impl: kernels.tuple_losses(db, trip, "triplet", (0.1,), impl=impl),
        "quadruplet_losses": lambda impl: kernels.tuple_losses(db, quad, "quadruplet", (0.1, 0.1), impl=impl),
    }


def _same(a, b) -> bool:
    if isinstance(a, tuple):
        return np.array_equal(a[0], b[0]) and np.allclose(a[1], b[1], rtol=1e-12, atol=1e-12)
    return np.allclose(a, b, rtol=1e-12, atol=1e-12)


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--db", type=int, default=5000)
    ap.add_argument("--queries", type=int, default=500)
    ap.add_argument("--dim", type=int, default=256)
    ap.add_argument("--k", type=int, default=10)
    args = ap.parse_args(argv)

    if kernels.BACKEND != "cython":
        print("compiled kernels unavailable (fallback only); build with: pip install -e . --no-build-isolation")
        return 1
    impls = {"cython": kernels._compiled, "numpy": _fallback}
    print(f"db={args.db} queries={args.queries} dim={args.dim} k={args.k} best of {args.repeat}")
    print(f"{'kernel':<18} {'cython ms':>10} {'numpy ms':>10} {'speedup':>8}  match")
    for name, fn in cases(args.db, args.queries, args.dim, args.k).items():
        times = {b: min(timeit.repeat(lambda: fn(impl), number=1, repeat=args.repeat)) for b, impl in impls.items()}
        match = _same(fn(impls["cython"]), fn(impls["numpy"]))
        print(f"{name:<18} {times['cython'] * 1e3:>10.2f} {times['numpy'] * 1e3:>10.2f} "
              f"{times['numpy'] / times['cython']:>7.2f}x  {'yes' if match else 'NO'}")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
