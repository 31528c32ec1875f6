"""Encoder networks.

The feature extractor is a conv stack (or a torchvision backbone) followed by
GeM pooling and a linear projection. The mean head is a parameter-free L2
normalisation; the student adds a variance head made of one linear layer and
a sigmoid, fed with the same extracted feature as the mean head.
"""
from __future__ import annotations

import copy
import hashlib
import os
from dataclasses import asdict
from pathlib import Path
from typing import Any

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .core import ConfigError, EmbeddingDistribution, EncoderSpec
from .losses import VAR_FLOOR

CHECKPOINT_VERSION = 1


class GeM(nn.Module):
    """Generalized-mean pooling over the spatial dimensions of (N, C, H, W)."""

    def __init__(self, p: float = 3.0, eps: float = 1e-6):
        super().__init__()
        self.p = float(p)
        self.eps = eps

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if self.p == 1.0:
            return x.clamp(min=self.eps).mean(dim=(-2, -1))
        return x.clamp(min=self.eps).pow(self.p).mean(dim=(-2, -1)).pow(1.0 / self.p)


class AvgPool(nn.Module):
    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return x.mean(dim=(-2, -1))


class FeatureExtractor(nn.Module):
    def __init__(self, spec: EncoderSpec):
        super().__init__()
        self.spec = spec
        if spec.backbone == "tiny-conv":
            layers: list[nn.Module] = []
            c_in = spec.in_channels
            for i, width in enumerate(spec.widths):
                layers += [nn.Conv2d(c_in, width, 3, padding=1, bias=False), nn.BatchNorm2d(width), nn.ReLU(inplace=True)]
                if spec.dropout > 0:
                    layers.append(nn.Dropout(spec.dropout))
                if i < len(spec.widths) - 1:
                    layers.append(nn.MaxPool2d(2))
                c_in = width
            self.body = nn.Sequential(*layers)
            feat_dim = c_in
        elif spec.backbone == "resnet50":
            import torchvision

            net = torchvision.models.resnet50(weights=None)
            self.body = nn.Sequential(*list(net.children())[:-2])
            if spec.dropout > 0:
                _insert_dropout_after_convs(self.body, spec.dropout)
            feat_dim = 2048
        else:
            raise ConfigError(f"unknown backbone {spec.backbone!r}")
        self.pool = GeM(spec.gem_p) if spec.pooling == "gem" else AvgPool()
        self.proj = nn.Linear(feat_dim, spec.embedding_dim)
        self.bn_frozen = False

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.proj(self.pool(self.body(x)))

    @property
    def out_dim(self) -> int:
        return self.proj.out_features

    def freeze_batchnorm(self) -> None:
        """Put every BatchNorm in eval mode for good and stop its affine updates."""
        self.bn_frozen = True
        for m in self.modules():
            if isinstance(m, nn.modules.batchnorm._BatchNorm):
                m.eval()
                for p in m.parameters():
                    p.requires_grad_(False)

    def train(self, mode: bool = True):
        super().train(mode)
        if self.bn_frozen:
            for m in self.modules():
                if isinstance(m, nn.modules.batchnorm._BatchNorm):
                    m.eval()
        return self


def _insert_dropout_after_convs(module: nn.Module, rate: float) -> None:
    for name, child in module.named_children():
        if isinstance(child, nn.Conv2d):
            setattr(module, name, nn.Sequential(child, nn.Dropout(rate)))
        else:
            _insert_dropout_after_convs(child, rate)


class TeacherNet(nn.Module):
    def __init__(self, spec: EncoderSpec):
        super().__init__()
        self.spec = spec
        self.extractor = FeatureExtractor(spec)
        self.extractor.freeze_batchnorm()

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return F.normalize(self.extractor(x), p=2, dim=-1)


class StudentNet(nn.Module):
    def __init__(self, spec: EncoderSpec):
        super().__init__()
        self.spec = spec
        self.extractor = FeatureExtractor(spec)
        self.extractor.freeze_batchnorm()
        self.var_head = nn.Linear(self.extractor.out_dim, spec.embedding_dim)

    def forward(self, x: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        feat = self.extractor(x)
        mean = F.normalize(feat, p=2, dim=-1)
        var = torch.sigmoid(self.var_head(feat)).clamp(min=VAR_FLOOR)
        return mean, var


def init_variance_head(head: nn.Linear, seed: int = 0, scale: float = 1e-3) -> None:
    """Small uniform weights and zero bias, so the head starts at sigmoid(0) = 0.5."""
    g = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        head.weight.copy_((torch.rand(head.weight.shape, generator=g) * 2 - 1) * scale)
        head.bias.zero_()


def copy_from_teacher(teacher: TeacherNet, seed: int = 0) -> StudentNet:
    student = StudentNet(teacher.spec)
    if set(student.extractor.state_dict()) != set(teacher.extractor.state_dict()):
        raise ConfigError("teacher and student extractor architectures differ")
    student.extractor.load_state_dict(copy.deepcopy(teacher.extractor.state_dict()))
    init_variance_head(student.var_head, seed)
    student.train(teacher.training)
    return student


def _to_tensor(batch) -> torch.Tensor:
    if isinstance(batch, np.ndarray):
        batch = torch.from_numpy(np.ascontiguousarray(batch, dtype=np.float32))
    return batch


def _check_shape(net: nn.Module, batch: torch.Tensor) -> None:
    if batch.dim() != 4 or batch.shape[1] != net.spec.in_channels:
        raise ValueError(f"expected (N, {net.spec.in_channels}, H, W) batch, got {tuple(batch.shape)}")


@torch.no_grad()
def teacher_forward(net: TeacherNet, batch, chunk: int = 256) -> np.ndarray:
    """Inference-mode unit-norm means, one row per image."""
    batch = _to_tensor(batch)
    _check_shape(net, batch)
    was_training = net.training
    net.eval()
    try:
        out = [net(batch[i : i + chunk]) for i in range(0, batch.shape[0], chunk)]
    finally:
        net.train(was_training)
    return torch.cat(out).double().numpy() if out else np.zeros((0, net.spec.embedding_dim))


@torch.no_grad()
def student_forward_arrays(net: StudentNet, batch, chunk: int = 256) -> tuple[np.ndarray, np.ndarray]:
    batch = _to_tensor(batch)
    _check_shape(net, batch)
    was_training = net.training
    net.eval()
    try:
        parts = [net(batch[i : i + chunk]) for i in range(0, batch.shape[0], chunk)]
    finally:
        net.train(was_training)
    means = torch.cat([m for m, _ in parts]).double().numpy()
    var = torch.cat([v for _, v in parts]).double().numpy()
    return means, var


def student_forward(net: StudentNet, batch) -> list[EmbeddingDistribution]:
    means, var = student_forward_arrays(net, batch)
    return [EmbeddingDistribution(m, v) for m, v in zip(means, var)]


@torch.no_grad()
def mc_dropout_forward(net: TeacherNet, batch, passes: int = 40, seed: int | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Per-dimension sample mean (renormalised) and sample variance over ``passes`` dropout passes."""
    if passes < 2:
        raise ValueError("MC dropout needs at least 2 passes")
    drops = [m for m in net.modules() if isinstance(m, nn.Dropout)]
    if not drops:
        raise ValueError("network has no dropout layers")
    batch = _to_tensor(batch)
    _check_shape(net, batch)
    was_training = net.training
    net.eval()
    for m in drops:
        m.train()
    try:
        if seed is None:
            samples = torch.stack([net(batch) for _ in range(passes)]).double()
        else:
            # seeded calls leave the global generator untouched
            with torch.random.fork_rng(devices=[]):
                torch.manual_seed(seed)
                samples = torch.stack([net(batch) for _ in range(passes)]).double()
    finally:
        net.train(was_training)
    mean = F.normalize(samples.mean(dim=0), p=2, dim=-1)
    var = samples.var(dim=0, unbiased=True)
    return mean.numpy(), var.numpy()


def build_teacher(spec: EncoderSpec, seed: int = 0) -> TeacherNet:
    torch.manual_seed(seed)
    return TeacherNet(spec)


def parameter_count(net: nn.Module) -> int:
    return sum(p.numel() for p in net.parameters())


def parameter_hash(net: nn.Module) -> str:
    """sha256 over every parameter and buffer, in state-dict order."""
    h = hashlib.sha256()
    for name, t in net.state_dict().items():
        h.update(name.encode())
        h.update(t.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()


# -- checkpoints ------------------------------------------------------------

def save_checkpoint(path: str | os.PathLike, net: nn.Module, kind: str, *, config: dict | None = None,
                    config_hash: str = "", step: int = 0, epoch: int = 0, extra: dict | None = None) -> Path:
    """Write a self-describing checkpoint atomically."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    spec = asdict(net.spec)
    spec["widths"] = list(spec["widths"])
    payload = {
        "version": CHECKPOINT_VERSION,
        "kind": kind,
        "encoder": spec,
        "state_dict": {k: v.detach().cpu().clone() for k, v in net.state_dict().items()},
        "step": int(step),
        "epoch": int(epoch),
        "config_hash": config_hash,
        "config": config or {},
        "extra": extra or {},
    }
    tmp = path.with_suffix(path.suffix + ".tmp")
    torch.save(payload, tmp)
    os.replace(tmp, path)
    return path


def load_checkpoint(path: str | os.PathLike) -> tuple[nn.Module, dict[str, Any]]:
    """Return ``(net, metadata)``; the net is a TeacherNet or StudentNet per the stored kind."""
    payload = torch.load(Path(path), map_location="cpu", weights_only=True)
    if payload.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {payload.get('version')!r}")
    spec = EncoderSpec(**payload["encoder"])
    kind = payload["kind"]
    net: nn.Module = StudentNet(spec) if kind in ("student", "pfe") else TeacherNet(spec)
    net.load_state_dict(payload["state_dict"])
    net.eval()
    meta = {k: v for k, v in payload.items() if k != "state_dict"}
    return net, meta
