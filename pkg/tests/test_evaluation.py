import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import oracles
from stun.evaluation import (
    Outcomes,
    QueryOutcome,
    as_outcomes,
    average_precision,
    bin_uncertainty_levels,
    ece,
    histogram_spread,
    map_at_n,
    pr_curve,
    recall_at_n,
    removal_curve,
    to_gray_fixed,
    to_gray_uint8,
)


def outs(flags, u=None, d=None):
    flags = [tuple(f) for f in flags]
    n = len(flags)
    u = [None] * n if u is None else u
    d = list(range(n)) if d is None else d
    return [QueryOutcome(i, f, u[i], float(d[i])) for i, f in enumerate(flags)]


def random_outcomes(rng, n=1000, depth=10, ties=True):
    flags = rng.random((n, depth)) < rng.uniform(0.05, 0.6)
    u = rng.integers(0, 50, n) / 50.0 if ties else rng.random(n)
    d = rng.integers(0, 200, n) / 100.0 if ties else rng.random(n)
    return Outcomes(np.arange(n), flags, u, d)


# -- hand examples ---------------------------------------------------------------

def test_recall_examples():
    assert recall_at_n(outs([(True,), (True,)]), 1) == 1.0
    o = outs([(False, True), (False, False)])
    assert recall_at_n(o, 1) == 0.0 and recall_at_n(o, 2) == 0.5


def test_map_examples():
    assert map_at_n(outs([(True, False, True)]), 3) == pytest.approx((1 + 2 / 3) / 3, abs=1e-12)
    assert map_at_n(outs([(False, False, False)] * 3), 3) == 0.0


def test_ap_examples():
    o = outs([(True,), (False,), (True,)], d=[0.1, 0.2, 0.3])
    assert average_precision(o) == pytest.approx((1 + 2 / 3) / 2, abs=1e-12)
    assert average_precision(outs([(True,)] * 4, d=[0.4, 0.1, 0.3, 0.2])) == 1.0


def test_ap_degenerate_labels():
    none = outs([(False,), (False,)])
    with pytest.raises(ValueError):
        average_precision(none)
    assert average_precision(none, strict=False) == 0.0


def test_pr_curve_examples():
    o = outs([(True,), (False,), (True,)], d=[0.1, 0.2, 0.3])
    c = pr_curve(o)
    np.testing.assert_allclose(c["recall"], [0.5, 0.5, 1.0])
    np.testing.assert_allclose(c["precision"], [1.0, 0.5, 2 / 3])
    allc = pr_curve(outs([(True,)] * 3, d=[0.3, 0.1, 0.2]))
    assert allc["precision"] == [1.0, 1.0, 1.0] and allc["recall"][-1] == 1.0


def test_pr_area_equals_ap(rng):
    for _ in range(20):
        o = random_outcomes(rng, 200)
        if not o.flags[:, 0].any():
            continue
        c = pr_curve(o)
        area = np.sum(np.diff(np.r_[0.0, c["recall"]]) * np.array(c["precision"]))
        assert area == pytest.approx(average_precision(o), abs=1e-6)


def test_ece_examples():
    o = outs([(True,), (False,)], u=[1.0, 1.0])
    assert ece(o, "r@1", 1).ece == pytest.approx(0.5)
    o = outs([(True,), (True,), (True,), (False,)], u=[0.5, 0.5, 1.0, 1.0])
    rep = ece(o, "r@1", 2)
    assert rep.values == [1.0, 0.5] and rep.confidence == [0.5, 0.0]
    assert rep.ece == pytest.approx(0.5)


def test_ece_perfect_calibration_is_zero():
    # bin 0: u=0.5, r@1 = 0.5 ; bin 1: u=1.0, r@1 = 0
    o = outs([(True,), (False,), (False,), (False,)], u=[0.5, 0.5, 1.0, 1.0])
    assert ece(o, "r@1", 2).ece == 0.0


def test_bin_levels_examples():
    assign, levels = bin_uncertainty_levels([0.1, 0.2, 0.3, 0.4], 2)
    assert assign.tolist() == [0, 0, 1, 1]
    np.testing.assert_allclose(levels, [0.15 / 0.35, 1.0])
    _, lv = bin_uncertainty_levels([0.3, 0.1, 0.2], 3)
    assert list(lv) == sorted(lv) and len(set(lv)) == 3
    _, lv = bin_uncertainty_levels([0.2] * 5, 2)
    assert lv.tolist() == [1.0, 1.0]
    with pytest.raises(ValueError):
        bin_uncertainty_levels([0.1], 2)


def test_bin_sizes_uneven():
    assign, _ = bin_uncertainty_levels(np.arange(10.0), 3)
    assert np.bincount(assign).tolist() == [4, 3, 3]


def test_removal_examples():
    o = outs([(True,), (False,), (True,), (False,)], u=[0.1, 0.9, 0.2, 0.8])
    c = removal_curve(o, [0.0, 0.25, 0.5, 0.75])
    assert c["correctness"] == [0.5, 2 / 3, 1.0, 1.0]
    with pytest.raises(ValueError):
        removal_curve(o, [1.0])


def test_removal_random_uncertainty_flat(rng):
    flags = rng.random((2000, 1)) < 0.6
    gains = []
    for _ in range(30):
        o = Outcomes(np.arange(2000), flags, rng.random(2000), np.zeros(2000))
        c = removal_curve(o, [0.0, 0.5])["correctness"]
        gains.append(c[1] - c[0])
    assert abs(np.mean(gains)) < 0.01


def test_hs_examples():
    assert histogram_spread(np.full((8, 8), 77)) == 0.0
    two = np.array([0] * 32 + [255] * 32).reshape(8, 8)
    assert histogram_spread(two) == 1.0
    assert histogram_spread(np.arange(256).reshape(16, 16)) == pytest.approx(0.5)
    with pytest.raises(ValueError):
        histogram_spread(np.array([[256]]))


def test_hs_matches_numpy_quantiles(rng):
    for _ in range(20):
        img = rng.integers(0, 256, size=(13, 17))
        q1, q3 = np.quantile(img, [0.25, 0.75])
        assert histogram_spread(img) == pytest.approx((q3 - q1) / 255, abs=1e-12)


def test_gray_conversions():
    img = np.stack([np.linspace(0, 1, 16).reshape(4, 4)] * 3)
    g = to_gray_uint8(img)
    assert g.min() == 0 and g.max() == 255
    assert to_gray_uint8(np.zeros((3, 2, 2))).max() == 0
    fixed = to_gray_fixed(img, 0.0, 2.0)
    assert fixed.max() == 128


# -- loop oracles on 1000 random queries ----------------------------------------

@pytest.mark.parametrize("seed", range(3))
def test_metrics_match_loop_oracles(seed):
    rng = np.random.default_rng(seed)
    o = random_outcomes(rng)
    flags = [tuple(bool(x) for x in r) for r in o.flags]
    dists, u = o.top1_distance.tolist(), o.uncertainty.tolist()
    for n in (1, 5, 10):
        assert recall_at_n(o, n) == oracles.recall(flags, n)
        assert map_at_n(o, n) == pytest.approx(oracles.map_at(flags, n), abs=1e-12)
    assert map_at_n(o, 1) == recall_at_n(o, 1)
    assert average_precision(o) == pytest.approx(oracles.ap(dists, [f[0] for f in flags]), abs=1e-12)
    for name in ("r@1", "r@5", "map@5", "ap"):
        for m in (1, 7, 11):
            assert ece(o, name, m).ece == pytest.approx(oracles.ece(flags, dists, u, name, m), abs=1e-12)
    fr = [0.0, 0.1, 0.33, 0.5, 0.9]
    assert removal_curve(o, fr)["correctness"] == pytest.approx([oracles.removal(flags, u, f) for f in fr], abs=1e-12)


def test_list_and_array_forms_agree(rng):
    o = random_outcomes(rng, 50)
    lst = o.to_list()
    assert recall_at_n(lst, 3) == recall_at_n(o, 3)
    assert ece(lst, "map@3", 5).ece == ece(o, "map@3", 5).ece
    assert np.array_equal(as_outcomes(lst).flags, o.flags)


def test_empty_and_bad_n():
    with pytest.raises(ValueError):
        recall_at_n([], 1)
    with pytest.raises(ValueError):
        map_at_n(outs([(True,)]), 2)


# -- properties ------------------------------------------------------------------

flag_rows = st.integers(1, 6).flatmap(
    lambda depth: st.lists(st.lists(st.booleans(), min_size=depth, max_size=depth), min_size=1, max_size=40))


@settings(max_examples=200, deadline=None)
@given(flag_rows)
def test_recall_monotone_and_map_bounded(rows):
    o = outs(rows)
    depth = len(rows[0])
    r = [recall_at_n(o, n) for n in range(1, depth + 1)]
    assert r == sorted(r)
    for n in range(1, depth + 1):
        assert map_at_n(o, n) <= r[n - 1] + 1e-15
    assert map_at_n(o, 1) == r[0]


@settings(max_examples=200, deadline=None)
@given(st.integers(1, 8), st.integers(1, 6), st.floats(0.01, 100), st.integers(0, 2**32 - 1))
def test_ece_invariant_under_positive_scaling(per_bin, m, c, seed):
    rng = np.random.default_rng(seed)
    n = per_bin * m
    o = Outcomes(np.arange(n), rng.random((n, 3)) < 0.5, rng.random(n) + 1e-3, rng.random(n))
    scaled = Outcomes(o.query_ids, o.flags, o.uncertainty * c, o.top1_distance)
    a, b = ece(o, "r@1", m), ece(scaled, "r@1", m)
    assert np.array_equal(bin_uncertainty_levels(o.uncertainty, m)[0], bin_uncertainty_levels(scaled.uncertainty, m)[0])
    np.testing.assert_allclose(a.levels, b.levels, rtol=1e-12)
    assert a.ece == pytest.approx(b.ece, abs=1e-12)
    assert 0.0 <= a.ece <= 1.0
    assert max(a.levels) == 1.0


@settings(max_examples=100, deadline=None)
@given(st.integers(1, 6), st.integers(1, 6), st.integers(0, 2**32 - 1))
def test_bin_membership_invariant_under_monotone_transform(per_bin, m, seed):
    rng = np.random.default_rng(seed)
    u = rng.random(per_bin * m)
    a, _ = bin_uncertainty_levels(u, m)
    b, _ = bin_uncertainty_levels(np.exp(3 * u) + u**3, m)
    assert np.array_equal(a, b)


@settings(max_examples=100, deadline=None)
@given(st.lists(st.booleans(), min_size=2, max_size=60), st.integers(0, 2**32 - 1))
def test_oracle_uncertainty_reaches_one(labels, seed):
    if all(labels) or not any(labels):
        return
    rng = np.random.default_rng(seed)
    n = len(labels)
    correct = np.array(labels)
    u = np.where(correct, rng.uniform(0, 0.4, n), rng.uniform(0.6, 1.0, n))
    o = Outcomes(np.arange(n), correct[:, None], u, np.zeros(n))
    wrong_frac = (~correct).sum() / n
    fr = np.ceil(wrong_frac * 100) / 100
    if fr >= 1.0:
        return
    assert removal_curve(o, [float(fr)])["correctness"][0] == 1.0
