"""Evaluation wiring shared by STUN and the baselines, and the comparison table.

Every method is reduced to database/query means plus optional variances and
then goes through exactly the same retrieval and metric code.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import torch.nn as nn
from scipy.stats import spearmanr

from .core import ExperimentConfig, label_matrix, pairwise_geo_distances
from .evaluation import (
    DEFAULT_BINS,
    Outcomes,
    average_precision,
    bin_uncertainty_levels,
    ece,
    histogram_spread,
    map_at_n,
    pr_curve,
    recall_at_n,
    removal_curve,
    to_gray_fixed,
)
from .model import StudentNet, mc_dropout_forward, student_forward_arrays, teacher_forward
from .retrieval import build_index, search
from .synthdata import PlaceDataset, split_queries

REPORT_VERSION = 1
RECALL_NS = (1, 5, 10)
REMOVAL_FRACTIONS = tuple(round(0.1 * i, 1) for i in range(10))
METHOD_LABELS = {
    "standard": "Standard",
    "stun": "STUN",
    "mc-dropout": "MC Dropout",
    "pfe": "PFE w/o MLS",
    "pfe-mls": "PFE w/ MLS",
    "random-variance": "Random variance",
}


@dataclass
class Split:
    database: PlaceDataset
    queries: PlaceDataset
    db_index: np.ndarray
    query_index: np.ndarray


def experiment_split(data: PlaceDataset, cfg: ExperimentConfig) -> Split:
    """Seeded database/query split; the database doubles as the training set."""
    db, q = split_queries(len(data), cfg.query_fraction, cfg.seed)
    return Split(data.subset(db), data.subset(q), db, q)


@dataclass
class MethodEmbeddings:
    name: str
    db_means: np.ndarray
    db_vars: np.ndarray | None
    q_means: np.ndarray
    q_vars: np.ndarray | None
    mls: bool = False


def embed(net: nn.Module, kind: str, images: np.ndarray, cfg: ExperimentConfig) -> tuple[np.ndarray, np.ndarray | None]:
    """Means and variances (None for deterministic nets) for a checkpoint of the given kind."""
    if kind == "mc-dropout":
        return mc_dropout_forward(net, images, passes=cfg.mc_passes, seed=cfg.seed)
    if isinstance(net, StudentNet):
        return student_forward_arrays(net, images)
    return teacher_forward(net, images), None


def method_embeddings(name: str, net: nn.Module, kind: str, split: Split, cfg: ExperimentConfig) -> MethodEmbeddings:
    db_m, db_v = embed(net, kind, split.database.images(), cfg)
    q_m, q_v = embed(net, kind, split.queries.images(), cfg)
    return MethodEmbeddings(name, db_m, db_v, q_m, q_v, mls=False)


def random_variance_control(base: MethodEmbeddings, seed: int) -> MethodEmbeddings:
    """Same means as ``base`` with variances drawn uniformly from (0, 1]."""
    rng = np.random.default_rng((seed, 0xC0))
    draw = lambda shape: 1.0 - rng.uniform(0.0, 1.0, size=shape)  # noqa: E731
    return MethodEmbeddings("random-variance", base.db_means, draw(base.db_means.shape),
                            base.q_means, draw(base.q_means.shape))


def outcomes_for(emb: MethodEmbeddings, split: Split, cfg: ExperimentConfig, topk: int) -> tuple[Outcomes, np.ndarray]:
    """Ranked correctness flags for every query that has a positive in the database.

    Returns the outcomes and the positions (into ``split.queries``) they cover.
    """
    db_geo, q_geo = split.database.geos(), split.queries.geos()
    index = build_index((emb.db_means, emb.db_vars), split.database.ids, db_geo)
    pos, scores = search(index, emb.q_means, topk, emb.q_vars, mls=emb.mls)
    positive, _ = label_matrix(pairwise_geo_distances(q_geo, db_geo), cfg)
    keep = np.flatnonzero(positive.any(axis=1))
    flags = np.take_along_axis(positive, pos, axis=1)[keep]
    if emb.mls:
        # top-1 "distance" for AP: Euclidean distance to the MLS-ranked top-1 candidate
        top1 = np.linalg.norm(emb.q_means - emb.db_means[pos[:, 0]], axis=1)[keep]
    else:
        top1 = scores[keep, 0]
    unc = None if emb.q_vars is None else emb.q_vars.mean(axis=1)[keep]
    return Outcomes(split.queries.ids[keep], flags, unc, top1), keep


def _intensity_window(data: PlaceDataset) -> tuple[float, float]:
    allpix = np.concatenate([s.image.mean(axis=0).ravel() for s in data.samples])
    lo, hi = np.percentile(allpix, [1, 99])
    return float(lo), float(hi)


def evaluate_method(emb: MethodEmbeddings, split: Split, cfg: ExperimentConfig, *, bins: int | None = None,
                    topk: int | None = None, config_hash: str = "", dataset: str = "") -> dict:
    """Full metrics report for one method as a JSON-ready dict."""
    bins = cfg.bins if bins is None else bins
    topk = min(cfg.topk if topk is None else topk, len(split.database))
    o, keep = outcomes_for(emb, split, cfg, topk)
    ns = [n for n in RECALL_NS if n <= topk]
    report: dict = {
        "format_version": REPORT_VERSION,
        "method": emb.name,
        "label": METHOD_LABELS.get(emb.name, emb.name),
        "mls_matching": emb.mls,
        "config_hash": config_hash,
        "dataset": dataset,
        "bins": bins,
        "topk": topk,
        "num_queries": len(o),
        "excluded_queries": int(len(split.queries) - len(o)),
        "recall": {str(n): recall_at_n(o, n) for n in ns},
        "map": {str(n): map_at_n(o, n) for n in ns},
        "ap": average_precision(o, strict=False),
        "pr_curve": pr_curve(o) if o.flags[:, 0].any() else {"recall": [], "precision": []},
        "ece": None,
        "removal_curve": None,
        "hs_by_bin": None,
        "uncertainty": None,
        "noise_spearman": None,
    }
    if o.uncertainty is not None:
        metrics = [f"r@{n}" for n in ns] + [f"map@{n}" for n in ns] + ["ap"]
        report["ece"] = {m: ece(o, m, bins).to_dict() for m in metrics}
        report["removal_curve"] = removal_curve(o, REMOVAL_FRACTIONS)
        u = o.uncertainty
        report["uncertainty"] = {"mean": float(u.mean()), "min": float(u.min()), "max": float(u.max())}
        lo, hi = _intensity_window(split.database)
        hs = np.array([histogram_spread(to_gray_fixed(split.queries.samples[i].image, lo, hi)) for i in keep])
        assignment, levels = bin_uncertainty_levels(u, bins)
        report["hs_by_bin"] = {
            "levels": levels.tolist(),
            "hs": [float(hs[assignment == b].mean()) for b in range(bins)],
        }
        if split.queries.noise_std is not None:
            rho = spearmanr(split.queries.noise_std[keep], u).correlation
            report["noise_spearman"] = None if np.isnan(rho) else float(rho)
    return report


def dumps_report(report: dict) -> str:
    return json.dumps(report, sort_keys=True, indent=1) + "\n"


# -- comparison table -------------------------------------------------------

TABLE_COLUMNS = (
    "r@1", "r@5", "r@10", "map@1", "map@5", "map@10", "ap",
    "ece_r@1", "ece_r@5", "ece_r@10", "ece_map@1", "ece_map@5", "ece_map@10", "ece_ap",
)


@dataclass
class ComparisonTable:
    rows: list[tuple[str, dict[str, float | None]]] = field(default_factory=list)
    bins: int = DEFAULT_BINS
    topk: int = 10
    num_queries: int = 0

    def to_dict(self) -> dict:
        return {
            "bins": self.bins,
            "topk": self.topk,
            "num_queries": self.num_queries,
            "columns": list(TABLE_COLUMNS),
            "rows": [{"method": name, **vals} for name, vals in self.rows],
        }

    def render(self) -> str:
        header = ["method", *TABLE_COLUMNS]
        body = [[name] + ["-" if v.get(c) is None else f"{v[c]:.3f}" for c in TABLE_COLUMNS] for name, v in self.rows]
        widths = [max(len(r[i]) for r in [header, *body]) for i in range(len(header))]
        fmt = lambda r: "  ".join(x.ljust(w) if i == 0 else x.rjust(w) for i, (x, w) in enumerate(zip(r, widths)))  # noqa: E731
        return "\n".join([fmt(header), "  ".join("-" * w for w in widths), *map(fmt, body)]) + "\n"


def table_row(report: dict) -> dict[str, float | None]:
    row: dict[str, float | None] = {c: None for c in TABLE_COLUMNS}
    for n, v in report["recall"].items():
        row[f"r@{n}"] = v
    for n, v in report["map"].items():
        row[f"map@{n}"] = v
    row["ap"] = report["ap"]
    if report["ece"]:
        for m, rep in report["ece"].items():
            row[f"ece_{m}"] = rep["ece"]
    return row


def compare(methods: Sequence[tuple[str, nn.Module, str]], data: PlaceDataset, cfg: ExperimentConfig,
            *, bins: int | None = None, topk: int | None = None) -> ComparisonTable:
    """One row per ``(method name, net, checkpoint kind)`` on a shared query set.

    ``standard`` is the teacher used directly and never gets ECE entries.
    ``pfe-mls`` evaluates a PFE net with MLS matching instead of Euclidean.
    ``random-variance`` keeps the net's means and draws random variances.
    """
    split = experiment_split(data, cfg)
    dims = {net.spec.embedding_dim for _, net, _ in methods}
    if len(dims) > 1:
        raise ValueError(f"methods disagree on embedding dimension: {sorted(dims)}")
    table = ComparisonTable(bins=cfg.bins if bins is None else bins, topk=cfg.topk if topk is None else topk)
    for name, net, kind in methods:
        emb = method_embeddings(name, net, kind, split, cfg)
        if name == "standard":
            emb.db_vars = emb.q_vars = None
        elif name == "random-variance":
            emb = random_variance_control(emb, cfg.seed)
        emb.mls = name == "pfe-mls"
        rep = evaluate_method(emb, split, cfg, bins=table.bins, topk=table.topk)
        table.num_queries = rep["num_queries"]
        table.rows.append((METHOD_LABELS.get(name, name), table_row(rep)))
    return table
