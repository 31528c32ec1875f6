"""Recognition metrics, calibration error, and the curves behind the plots.

A query's outcome is its ranked correctness flags, its uncertainty scalar,
and the distance to its top-1 candidate. Metrics accept either a list of
:class:`QueryOutcome` or an :class:`Outcomes` bundle of arrays.

Definitions used throughout:

* r@N: fraction of queries with a correct candidate in the top N.
* mAP@N: per query, the sum of precision@k over correct ranks k <= N,
  divided by N; averaged over queries. mAP@1 equals r@1.
* AP: average precision of the (query, top-1) pairs scored by ascending
  top-1 distance, labelled by top-1 correctness. Tied distances form one
  threshold.
* ECE: queries sorted by uncertainty and split into M near-equal bins;
  bin uncertainty levels are divided by the largest, confidence is
  ``1 - level``, and ECE is the size-weighted mean of
  ``|metric(bin) - confidence(bin)|``.
"""
from __future__ import annotations

import re
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

DEFAULT_BINS = 11


@dataclass(frozen=True)
class QueryOutcome:
    query_id: int
    flags: tuple[bool, ...]
    uncertainty: float | None
    top1_distance: float


@dataclass(frozen=True, eq=False)
class Outcomes:
    """Array form of a list of query outcomes."""

    query_ids: np.ndarray  # (Q,)
    flags: np.ndarray  # (Q, depth) bool
    uncertainty: np.ndarray | None  # (Q,)
    top1_distance: np.ndarray  # (Q,)

    def __len__(self) -> int:
        return self.flags.shape[0]

    def take(self, idx) -> "Outcomes":
        return Outcomes(
            self.query_ids[idx],
            self.flags[idx],
            None if self.uncertainty is None else self.uncertainty[idx],
            self.top1_distance[idx],
        )

    def to_list(self) -> list[QueryOutcome]:
        return [
            QueryOutcome(
                int(self.query_ids[i]),
                tuple(bool(f) for f in self.flags[i]),
                None if self.uncertainty is None else float(self.uncertainty[i]),
                float(self.top1_distance[i]),
            )
            for i in range(len(self))
        ]


def as_outcomes(outcomes) -> Outcomes:
    if isinstance(outcomes, Outcomes):
        return outcomes
    outcomes = list(outcomes)
    if not outcomes:
        return Outcomes(np.zeros(0, np.int64), np.zeros((0, 0), bool), None, np.zeros(0))
    depths = {len(o.flags) for o in outcomes}
    if len(depths) != 1:
        raise ValueError("all outcomes must have the same retrieval depth")
    has_u = all(o.uncertainty is not None for o in outcomes)
    return Outcomes(
        np.array([o.query_id for o in outcomes], dtype=np.int64),
        np.array([o.flags for o in outcomes], dtype=bool).reshape(len(outcomes), -1),
        np.array([o.uncertainty for o in outcomes], dtype=np.float64) if has_u else None,
        np.array([o.top1_distance for o in outcomes], dtype=np.float64),
    )


def _check(o: Outcomes, n: int | None = None) -> None:
    if len(o) == 0:
        raise ValueError("no query outcomes")
    if n is not None and not 1 <= n <= o.flags.shape[1]:
        raise ValueError(f"n={n} outside [1, {o.flags.shape[1]}]")


def recall_at_n(outcomes, n: int) -> float:
    o = as_outcomes(outcomes)
    _check(o, n)
    return float(o.flags[:, :n].any(axis=1).mean())


def map_at_n(outcomes, n: int) -> float:
    o = as_outcomes(outcomes)
    _check(o, n)
    f = o.flags[:, :n]
    ranks = np.arange(1, n + 1)
    prec = np.cumsum(f, axis=1) / ranks
    return float(((prec * f).sum(axis=1) / n).mean())


def _pr_steps(o: Outcomes) -> tuple[np.ndarray, np.ndarray]:
    """Precision and recall at every distinct top-1 distance threshold, ascending."""
    labels = o.flags[:, 0]
    n_pos = int(labels.sum())
    if n_pos == 0:
        raise ValueError("average precision needs at least one correct pair")
    order = np.argsort(o.top1_distance, kind="stable")
    d, y = o.top1_distance[order], labels[order]
    tp, fp = np.cumsum(y), np.cumsum(~y)
    last = np.r_[d[1:] != d[:-1], True]  # last element of each tie group
    tp, fp = tp[last], fp[last]
    return tp / (tp + fp), tp / n_pos


def average_precision(outcomes, strict: bool = True) -> float:
    """Area under the step precision-recall curve of top-1 pairs.

    With ``strict=False`` a set without any correct pair scores 0 instead of
    raising; calibration bins use that form.
    """
    o = as_outcomes(outcomes)
    _check(o)
    if not strict and not o.flags[:, 0].any():
        return 0.0
    precision, recall = _pr_steps(o)
    return float(np.sum(np.diff(np.r_[0.0, recall]) * precision))


def pr_curve(outcomes) -> dict[str, list[float]]:
    """One (recall, precision) point per distinct threshold; the last point has recall 1."""
    o = as_outcomes(outcomes)
    _check(o)
    precision, recall = _pr_steps(o)
    return {"recall": recall.tolist(), "precision": precision.tolist()}


_METRIC = re.compile(r"^(r|map)@(\d+)$|^ap$")


def metric_value(outcomes, metric: str) -> float:
    """Evaluate ``"r@N"``, ``"map@N"`` or ``"ap"``."""
    m = _METRIC.match(metric.lower())
    if not m:
        raise ValueError(f"unknown metric {metric!r}")
    if metric.lower() == "ap":
        return average_precision(outcomes, strict=False)
    n = int(m.group(2))
    return recall_at_n(outcomes, n) if m.group(1) == "r" else map_at_n(outcomes, n)


def _shifted_mean(x: np.ndarray) -> float:
    lo = x.min()
    return float(lo + (x - lo).mean())


def bin_uncertainty_levels(uncertainties, m: int) -> tuple[np.ndarray, np.ndarray]:
    """Assign queries to ``m`` bins by ascending uncertainty.

    Returns ``(assignment, levels)``: the bin index of every query and each
    bin's mean uncertainty divided by the largest bin mean. Bin sizes differ
    by at most one, with the earlier bins taking the extra queries.
    """
    u = np.asarray(uncertainties, dtype=np.float64)
    n = u.shape[0]
    if not 1 <= m <= n:
        raise ValueError(f"bin count {m} outside [1, {n}]")
    order = np.argsort(u, kind="stable")
    base, extra = divmod(n, m)
    sizes = np.full(m, base) + (np.arange(m) < extra)
    assignment = np.empty(n, dtype=np.int64)
    assignment[order] = np.repeat(np.arange(m), sizes)
    # shift by the bin minimum so equal uncertainties give bit-equal means
    means = np.array([_shifted_mean(u[assignment == b]) for b in range(m)])
    top = means.max()
    levels = means / top if top > 0 else np.ones(m)
    return assignment, levels


@dataclass
class CalibrationReport:
    metric: str
    bins: int
    sizes: list[int]
    levels: list[float]  # normalised uncertainty per bin
    confidence: list[float]
    values: list[float]  # metric per bin
    ece: float
    mean_uncertainty: list[float] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "metric": self.metric,
            "bins": self.bins,
            "sizes": self.sizes,
            "levels": self.levels,
            "confidence": self.confidence,
            "values": self.values,
            "mean_uncertainty": self.mean_uncertainty,
            "ece": self.ece,
        }


def ece(outcomes, metric: str, m: int = DEFAULT_BINS) -> CalibrationReport:
    o = as_outcomes(outcomes)
    _check(o)
    if o.uncertainty is None:
        raise ValueError("calibration error needs per-query uncertainty")
    assignment, levels = bin_uncertainty_levels(o.uncertainty, m)
    sizes, values, mean_u = [], [], []
    for b in range(m):
        idx = np.flatnonzero(assignment == b)
        sizes.append(int(idx.size))
        values.append(metric_value(o.take(idx), metric))
        mean_u.append(float(o.uncertainty[idx].mean()))
    conf = 1.0 - levels
    w = np.array(sizes, dtype=np.float64)
    gap = np.abs(np.array(values) - conf)
    return CalibrationReport(
        metric=metric,
        bins=m,
        sizes=sizes,
        levels=levels.tolist(),
        confidence=conf.tolist(),
        values=values,
        ece=float((w * gap).sum() / w.sum()),
        mean_uncertainty=mean_u,
    )


def removal_fraction_count(n: int, fraction: float) -> int:
    return int(np.floor(fraction * n + 1e-9))


def removal_curve(outcomes, fractions: Sequence[float]) -> dict[str, list[float]]:
    """Top-1 correctness ratio after dropping the ``floor(f * Q)`` most uncertain queries."""
    o = as_outcomes(outcomes)
    _check(o)
    if o.uncertainty is None:
        raise ValueError("removal curve needs per-query uncertainty")
    n = len(o)
    order = np.argsort(o.uncertainty, kind="stable")  # most certain first
    correct = o.flags[order, 0]
    points = []
    for f in fractions:
        if not 0.0 <= f < 1.0:
            raise ValueError(f"fraction {f} outside [0, 1)")
        keep = n - removal_fraction_count(n, f)
        if keep <= 0:
            raise ValueError(f"fraction {f} removes every query")
        points.append(float(correct[:keep].mean()))
    return {"fractions": [float(f) for f in fractions], "correctness": points}


def histogram_spread(image, levels: int = 256) -> float:
    """Interquartile range of the intensity distribution over the intensity range.

    ``image`` holds integer intensities in ``[0, levels - 1]``. Quartiles are
    read off the cumulative histogram with linear interpolation between
    order statistics.
    """
    img = np.asarray(image)
    if img.size == 0:
        raise ValueError("empty image")
    vals = img.ravel().astype(np.int64)
    if vals.min() < 0 or vals.max() >= levels:
        raise ValueError(f"intensities must lie in [0, {levels - 1}]")
    cum = np.cumsum(np.bincount(vals, minlength=levels))
    n = cum[-1]

    def order_stat(j: int) -> int:
        # j-th smallest pixel (0-based) = first intensity whose cumulative count exceeds j
        return int(np.searchsorted(cum, j, side="right"))

    def quantile(q: float) -> float:
        h = q * (n - 1)
        lo = int(np.floor(h))
        hi = min(lo + 1, n - 1)
        a, b = order_stat(lo), order_stat(hi)
        return a + (h - lo) * (b - a)

    return float((quantile(0.75) - quantile(0.25)) / (levels - 1))


def to_gray_uint8(image: np.ndarray) -> np.ndarray:
    """Min-max scale a (C, H, W) float image to 8-bit grayscale (channel mean)."""
    g = np.asarray(image, dtype=np.float64)
    g = g.mean(axis=0) if g.ndim == 3 else g
    lo, hi = g.min(), g.max()
    if hi <= lo:
        return np.zeros(g.shape, dtype=np.uint8)
    return np.round((g - lo) / (hi - lo) * 255).astype(np.uint8)


def to_gray_fixed(image: np.ndarray, lo: float, hi: float) -> np.ndarray:
    """Map a (C, H, W) float image to 8-bit grayscale with a fixed intensity window."""
    g = np.asarray(image, dtype=np.float64)
    g = g.mean(axis=0) if g.ndim == 3 else g
    return np.round(np.clip((g - lo) / (hi - lo), 0.0, 1.0) * 255).astype(np.uint8)
