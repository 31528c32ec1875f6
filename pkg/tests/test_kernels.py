import numpy as np
import pytest

import oracles
from conftest import unit_rows
from stun import _fallback, kernels

IMPLS = [pytest.param(_fallback, id="numpy")]
if kernels._compiled is not None:
    IMPLS.append(pytest.param(kernels._compiled, id="cython"))


def test_backend_selected():
    assert kernels.BACKEND in ("cython", "numpy")


@pytest.mark.parametrize("impl", IMPLS)
def test_pairwise_sqdist(impl, rng):
    a, b = rng.standard_normal((7, 5)), rng.standard_normal((9, 5))
    want = ((a[:, None] - b[None]) ** 2).sum(-1)
    np.testing.assert_allclose(kernels.pairwise_sqdist(a, b, impl=impl), want, atol=1e-12)


@pytest.mark.parametrize("impl", IMPLS)
def test_topk_l2_against_loop(impl, rng):
    db, q = unit_rows(rng, 60, 6), unit_rows(rng, 8, 6)
    pos, dist = kernels.topk_l2(db, q, 10, impl=impl)
    for i in range(8):
        ids, d = oracles.l2_topk(db.tolist(), q[i].tolist(), 10)
        assert pos[i].tolist() == ids
        np.testing.assert_allclose(dist[i], d, atol=1e-12)


@pytest.mark.parametrize("impl", IMPLS)
def test_topk_ties_by_id(impl):
    db = np.array([[1.0, 0.0], [0.0, 1.0], [1.0, 0.0], [0.0, -1.0]])
    ids = np.array([30, 20, 10, 40])
    pos, _ = kernels.topk_l2(db, np.array([[1.0, 0.0]]), 4, ids=ids, impl=impl)
    assert ids[pos[0]].tolist() == [10, 30, 20, 40]
    var = np.full_like(db, 0.5)
    pos, _ = kernels.topk_mls(db, var, np.array([[1.0, 0.0]]), np.array([[0.5, 0.5]]), 4, ids=ids, impl=impl)
    assert ids[pos[0]].tolist() == [10, 30, 20, 40]


@pytest.mark.parametrize("impl", IMPLS)
def test_topk_mls_against_loop(impl, rng):
    db, q = unit_rows(rng, 40, 5), unit_rows(rng, 5, 5)
    dv, qv = rng.uniform(0.01, 1, db.shape), rng.uniform(0.01, 1, q.shape)
    pos, score = kernels.topk_mls(db, dv, q, qv, 7, impl=impl)
    for i in range(5):
        ids, s = oracles.mls_topk(db.tolist(), dv.tolist(), q[i].tolist(), qv[i].tolist(), 7)
        assert pos[i].tolist() == ids
        np.testing.assert_allclose(score[i], s, atol=1e-12)


@pytest.mark.parametrize("impl", IMPLS)
@pytest.mark.parametrize("kind,width", [("doublet", 3), ("triplet", 3), ("quadruplet", 4)])
def test_tuple_losses_against_loop(impl, kind, width, rng):
    means = unit_rows(rng, 20, 4)
    rows = rng.integers(0, 20, size=(50, width))
    if kind == "doublet":
        rows[:, 2] = rng.integers(0, 2, 50)
    got = kernels.tuple_losses(means, rows, kind, (0.4, 0.1) if kind == "doublet" else (0.1, 0.2), impl=impl)
    for r, g in zip(rows.tolist(), got):
        m = means.tolist()
        if kind == "doublet":
            d2 = oracles.euclid(m[r[0]], m[r[1]]) ** 2
            want = d2 if r[2] else max(0.4 - d2, 0.0)
        else:
            dap = oracles.euclid(m[r[0]], m[r[1]])
            want = max(dap - oracles.euclid(m[r[0]], m[r[2]]) + 0.1, 0.0)
            if kind == "quadruplet":
                want += max(dap - oracles.euclid(m[r[0]], m[r[3]]) + 0.2, 0.0)
        assert g == pytest.approx(want, abs=1e-12)


def test_backends_agree(rng):
    if kernels._compiled is None:
        pytest.skip("compiled kernels not built")
    db, q = unit_rows(rng, 300, 16), unit_rows(rng, 30, 16)
    dv, qv = rng.uniform(0.01, 1, db.shape), rng.uniform(0.01, 1, q.shape)
    for fn in (lambda impl: kernels.topk_l2(db, q, 25, impl=impl),
               lambda impl: kernels.topk_mls(db, dv, q, qv, 25, impl=impl)):
        (pa, sa), (pb, sb) = fn(kernels._compiled), fn(_fallback)
        assert np.array_equal(pa, pb)
        np.testing.assert_allclose(sa, sb, rtol=0, atol=1e-12)


def test_errors():
    db = np.eye(3)
    with pytest.raises(ValueError):
        kernels.topk_l2(db, db, 4)
    with pytest.raises(ValueError):
        kernels.topk_l2(db, db, 2, ids=[1, 2])
    with pytest.raises(IndexError):
        kernels.tuple_losses(db, [[0, 1, 5]], "triplet", (0.1,))
    with pytest.raises(ValueError):
        kernels.topk_mls(db, np.ones((3, 2)), db, np.ones_like(db), 1)
