"""Metric-learning losses for the teacher, the uncertainty-aware student loss,
and the mutual likelihood score used by the PFE baseline.

All functions take batched torch tensors of shape (B, D) and return a
:class:`LossValue` whose ``per_item`` follows the input order.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .core import EmbeddingDistribution

VAR_FLOOR = 1e-6


@dataclass
class LossValue:
    value: torch.Tensor  # scalar
    per_item: torch.Tensor  # (B,)

    def item(self) -> float:
        return float(self.value.detach())


def _as_batch(*tensors: torch.Tensor) -> list[torch.Tensor]:
    out = [t.unsqueeze(0) if t.dim() == 1 else t for t in tensors]
    shape = out[0].shape
    for t in out[1:]:
        if t.shape != shape:
            raise ValueError(f"dimension mismatch: {tuple(shape)} vs {tuple(t.shape)}")
    return out


def _dist(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    # vector_norm has a zero subgradient at 0, unlike sqrt(sum(..))
    return torch.linalg.vector_norm(a - b, dim=-1)


def _hinge(x: torch.Tensor) -> torch.Tensor:
    return torch.clamp(x, min=0.0)


def contrastive_loss(emb_i: torch.Tensor, emb_j: torch.Tensor, similar, margin: float = 0.4) -> LossValue:
    """Squared distance for similar pairs, ``max(margin - d^2, 0)`` for dissimilar ones."""
    emb_i, emb_j = _as_batch(emb_i, emb_j)
    similar = torch.as_tensor(similar, dtype=torch.bool, device=emb_i.device).reshape(-1)
    if similar.shape[0] != emb_i.shape[0]:
        raise ValueError("one similarity flag per pair is required")
    d2 = _dist(emb_i, emb_j) ** 2
    per_item = torch.where(similar, d2, _hinge(margin - d2))
    return LossValue(per_item.mean(), per_item)


def triplet_loss(anchor: torch.Tensor, positive: torch.Tensor, negative: torch.Tensor, margin: float = 0.1) -> LossValue:
    anchor, positive, negative = _as_batch(anchor, positive, negative)
    per_item = _hinge(_dist(anchor, positive) - _dist(anchor, negative) + margin)
    return LossValue(per_item.mean(), per_item)


def quadruplet_loss(
    anchor: torch.Tensor,
    positive: torch.Tensor,
    negative1: torch.Tensor,
    negative2: torch.Tensor,
    margin1: float = 0.1,
    margin2: float = 0.1,
) -> LossValue:
    anchor, positive, negative1, negative2 = _as_batch(anchor, positive, negative1, negative2)
    d_ap = _dist(anchor, positive)
    per_item = _hinge(d_ap - _dist(anchor, negative1) + margin1) + _hinge(d_ap - _dist(anchor, negative2) + margin2)
    return LossValue(per_item.mean(), per_item)


def student_loss(
    student_mean: torch.Tensor,
    teacher_mean: torch.Tensor,
    student_var: torch.Tensor,
    reduction: str = "mean",
) -> LossValue:
    """Uncertainty-aware distillation loss.

    Per item: ``sum_k (mu_S - mu_T)^2 / (2 var) + 0.5 * ln(var)``. The teacher
    mean is detached, so no gradient ever reaches it. ``reduction`` picks mean
    or sum over the batch.
    """
    student_mean, teacher_mean, student_var = _as_batch(student_mean, teacher_mean, student_var)
    if bool((student_var <= 0).any()):
        raise ValueError("student variance must be strictly positive")
    var = torch.clamp(student_var, min=VAR_FLOOR)
    resid2 = (student_mean - teacher_mean.detach()) ** 2
    per_item = (resid2 / (2.0 * var) + 0.5 * torch.log(var)).sum(dim=-1)
    if reduction == "mean":
        value = per_item.mean()
    elif reduction == "sum":
        value = per_item.sum()
    else:
        raise ValueError(f"unknown reduction {reduction!r}")
    return LossValue(value, per_item)


def mls_score(mean_i: torch.Tensor, var_i: torch.Tensor, mean_j: torch.Tensor, var_j: torch.Tensor) -> torch.Tensor:
    """Mutual likelihood score per pair, additive constant dropped. Higher means more alike."""
    mean_i, var_i, mean_j, var_j = _as_batch(mean_i, var_i, mean_j, var_j)
    if bool((var_i <= 0).any()) or bool((var_j <= 0).any()):
        raise ValueError("variances must be strictly positive")
    s = torch.clamp(var_i, min=VAR_FLOOR) + torch.clamp(var_j, min=VAR_FLOOR)
    return -0.5 * ((mean_i - mean_j) ** 2 / s + torch.log(s)).sum(dim=-1)


def mls_loss(dist_i, dist_j):
    """Mutual likelihood score between two Gaussian embeddings.

    With :class:`EmbeddingDistribution` arguments a float is returned; with
    ``(mean, var)`` tensor pairs the per-pair score tensor is returned.
    """
    if isinstance(dist_i, EmbeddingDistribution):
        if dist_i.dim != dist_j.dim:
            raise ValueError(f"dimension mismatch: {dist_i.dim} vs {dist_j.dim}")
        t = [torch.from_numpy(np.asarray(x, dtype=np.float64)) for x in (dist_i.mean, dist_i.variance, dist_j.mean, dist_j.variance)]
        return float(mls_score(*t)[0])
    return mls_score(dist_i[0], dist_i[1], dist_j[0], dist_j[1])


def pfe_loss(mean_i, var_i, mean_j, var_j) -> LossValue:
    """Negative MLS over positive pairs, averaged; minimised to train a PFE variance head."""
    per_item = -mls_score(mean_i, var_i, mean_j, var_j)
    return LossValue(per_item.mean(), per_item)
