"""Training loops for the teacher, the self-taught student, and the baselines.

All phases use Adam with per-epoch exponential learning-rate decay and
weight decay. Runs are deterministic for a fixed seed on a fixed machine.
"""
from __future__ import annotations

import json
import logging
import math
import os
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn

from . import losses
from .core import ConfigError, ExperimentConfig, TupleKind
from .mining import MiningPool, batch_to_rows, mine_epoch
from .model import (
    StudentNet,
    TeacherNet,
    build_teacher,
    copy_from_teacher,
    init_variance_head,
    teacher_forward,
)

log = logging.getLogger(__name__)


class DivergenceError(RuntimeError):
    """A training loss became non-finite."""


class DataError(ValueError):
    """The dataset cannot support the requested training phase."""


@dataclass
class TrainState:
    phase: str
    seed: int
    config_hash: str
    epoch: int = 0  # completed epochs
    step: int = 0
    history: list[float] = field(default_factory=list)  # one loss per optimiser step
    epoch_losses: list[float] = field(default_factory=list)  # mean step loss per epoch
    lrs: list[float] = field(default_factory=list)  # learning rate used in each epoch
    optimizer_state: dict | None = None


class TrainLog:
    """Line-delimited JSON training records; a no-op without a path."""

    def __init__(self, path: str | os.PathLike | None):
        self.path = Path(path) if path else None
        if self.path:
            self.path.parent.mkdir(parents=True, exist_ok=True)
            self._fh = self.path.open("w")

    def write(self, **rec) -> None:
        if self.path:
            self._fh.write(json.dumps(rec, sort_keys=True) + "\n")

    def close(self) -> None:
        if self.path:
            self._fh.close()


def seed_everything(seed: int) -> None:
    torch.manual_seed(seed)
    torch.use_deterministic_algorithms(True)


def make_optimizer(params, cfg: ExperimentConfig, lr: float) -> torch.optim.Adam:
    return torch.optim.Adam(params, lr=lr, weight_decay=cfg.weight_decay)


def set_lr(opt: torch.optim.Optimizer, lr: float) -> None:
    for g in opt.param_groups:
        g["lr"] = lr


def _check_finite(value: float, phase: str, step: int) -> None:
    if not math.isfinite(value):
        raise DivergenceError(f"{phase}: non-finite loss at step {step}")


class _BlowupWatch:
    """Warns when the epoch loss stays above 10x the first epoch for 3 epochs running."""

    def __init__(self, phase: str):
        self.phase, self.first, self.run = phase, None, 0

    def update(self, value: float) -> None:
        if self.first is None:
            self.first = value
            return
        self.run = self.run + 1 if abs(value) > 10 * abs(self.first) else 0
        if self.run >= 3:
            log.warning("%s: epoch loss %.4g above 10x the first epoch for %d epochs", self.phase, value, self.run)


def _images(data) -> torch.Tensor:
    return torch.from_numpy(data.images())


def _tuple_loss(net: TeacherNet, imgs: torch.Tensor, rows: np.ndarray, kind: TupleKind, cfg: ExperimentConfig):
    uniq, inv = np.unique(rows[:, :2] if kind is TupleKind.DOUBLET else rows, return_inverse=True)
    emb = net(imgs[torch.from_numpy(uniq)])
    inv = torch.from_numpy(inv.reshape(rows.shape[0], -1))
    col = lambda j: emb[inv[:, j]]  # noqa: E731
    if kind is TupleKind.DOUBLET:
        return losses.contrastive_loss(col(0), col(1), torch.from_numpy(rows[:, 2].astype(bool)), cfg.contrastive_margin)
    if kind is TupleKind.TRIPLET:
        return losses.triplet_loss(col(0), col(1), col(2), cfg.triplet_margin)
    return losses.quadruplet_loss(col(0), col(1), col(2), col(3), cfg.quadruplet_margin1, cfg.quadruplet_margin2)


def train_teacher(data, cfg: ExperimentConfig, *, log_path=None, net: TeacherNet | None = None,
                  phase: str = "teacher", epochs: int | None = None) -> tuple[TeacherNet, TrainState]:
    """Metric-learning teacher with per-epoch hard-negative mining."""
    if cfg.batch_size < 1:
        raise ConfigError("batch_size must be >= 1")
    seed_everything(cfg.seed)
    pool = MiningPool.from_dataset(data, cfg)
    if len(pool.valid_anchors()) == 0:
        raise DataError("no sample has a geographic positive")
    net = net if net is not None else build_teacher(cfg.encoder, cfg.seed)
    imgs = _images(data)
    opt = make_optimizer([p for p in net.parameters() if p.requires_grad], cfg, cfg.lr)
    rng = np.random.default_rng(cfg.seed)
    state = TrainState(phase, cfg.seed, cfg.config_hash())
    tlog = TrainLog(log_path)
    watch = _BlowupWatch(phase)
    kind = cfg.tuple_kind
    n_epochs = cfg.teacher_epochs if epochs is None else epochs
    try:
        for epoch in range(n_epochs):
            lr = cfg.lr_at(epoch)
            set_lr(opt, lr)
            pool.refresh(teacher_forward(net, imgs), epoch)
            tuples = mine_epoch(pool, cfg, epoch)
            rows = batch_to_rows(tuples)
            rows = rows[rng.permutation(rows.shape[0])]
            net.train()
            step_losses = []
            for start in range(0, rows.shape[0], cfg.batch_size):
                loss = _tuple_loss(net, imgs, rows[start : start + cfg.batch_size], kind, cfg)
                value = loss.item()
                _check_finite(value, phase, state.step)
                opt.zero_grad()
                loss.value.backward()
                opt.step()
                state.step += 1
                state.history.append(value)
                step_losses.append(value)
                tlog.write(phase=phase, step=state.step, epoch=epoch, lr=lr, loss=value)
            mean = float(np.mean(step_losses)) if step_losses else 0.0
            state.epoch_losses.append(mean)
            state.lrs.append(lr)
            state.epoch = epoch + 1
            watch.update(mean)
            tlog.write(phase=phase, epoch=epoch, lr=lr, epoch_loss=mean, tuples=int(rows.shape[0]))
    finally:
        tlog.close()
    net.eval()
    state.optimizer_state = opt.state_dict()
    return net, state


def train_mc_dropout(data, cfg: ExperimentConfig, *, log_path=None) -> tuple[TeacherNet, TrainState]:
    """Teacher pipeline with dropout after every conv layer."""
    enc = replace(cfg.encoder, dropout=cfg.mc_dropout_rate)
    net = build_teacher(enc, cfg.seed)
    return train_teacher(data, cfg, log_path=log_path, net=net, phase="mc-dropout", epochs=cfg.mc_dropout_epochs)


def train_student(teacher: TeacherNet, data, cfg: ExperimentConfig, *, log_path=None) -> tuple[StudentNet, TrainState]:
    """Self-teaching phase: regress onto fixed teacher means while learning a variance head."""
    seed_everything(cfg.seed)
    imgs = _images(data)
    targets = torch.from_numpy(teacher_forward(teacher, imgs)).float()
    student = copy_from_teacher(teacher, seed=cfg.seed)
    base_lr = cfg.student_lr if cfg.student_lr is not None else cfg.lr
    opt = make_optimizer([p for p in student.parameters() if p.requires_grad], cfg, base_lr)
    rng = np.random.default_rng(cfg.seed + 1)
    state = TrainState("student", cfg.seed, cfg.config_hash())
    tlog = TrainLog(log_path)
    watch = _BlowupWatch("student")
    n = imgs.shape[0]
    try:
        for epoch in range(cfg.student_epochs):
            lr = cfg.lr_at(epoch, base_lr)
            set_lr(opt, lr)
            student.train()
            order = rng.permutation(n)
            step_losses = []
            for start in range(0, n, cfg.batch_size):
                idx = torch.from_numpy(order[start : start + cfg.batch_size])
                mean, var = student(imgs[idx])
                loss = losses.student_loss(mean, targets[idx], var, cfg.student_loss_reduction)
                value = loss.item()
                _check_finite(value, "student", state.step)
                opt.zero_grad()
                loss.value.backward()
                opt.step()
                state.step += 1
                state.history.append(value)
                step_losses.append(value)
                tlog.write(phase="student", step=state.step, epoch=epoch, lr=lr, loss=value)
            mean_loss = float(np.mean(step_losses)) if step_losses else 0.0
            state.epoch_losses.append(mean_loss)
            state.lrs.append(lr)
            state.epoch = epoch + 1
            watch.update(mean_loss)
            tlog.write(phase="student", epoch=epoch, lr=lr, epoch_loss=mean_loss)
    finally:
        tlog.close()
    student.eval()
    state.optimizer_state = opt.state_dict()
    return student, state


def positive_pairs(data, cfg: ExperimentConfig) -> np.ndarray:
    pool = MiningPool.from_dataset(data, cfg)
    i, j = np.nonzero(np.triu(pool.positive, k=1))
    return np.stack([i, j], axis=1).astype(np.int64)


def train_pfe(teacher: TeacherNet, data, cfg: ExperimentConfig, *, log_path=None) -> tuple[StudentNet, TrainState]:
    """PFE baseline: frozen teacher extractor and mean head; variance head trained with MLS on positive pairs."""
    seed_everything(cfg.seed)
    pairs = positive_pairs(data, cfg)
    if pairs.shape[0] == 0:
        raise DataError("PFE training needs at least one positive pair")
    imgs = _images(data)
    net = copy_from_teacher(teacher, seed=cfg.seed)
    for p in net.extractor.parameters():
        p.requires_grad_(False)
    init_variance_head(net.var_head, cfg.seed)
    opt = make_optimizer(net.var_head.parameters(), cfg, cfg.lr)
    rng = np.random.default_rng(cfg.seed + 2)
    state = TrainState("pfe", cfg.seed, cfg.config_hash())
    tlog = TrainLog(log_path)
    with torch.no_grad():
        net.eval()
        feats = net.extractor(imgs)
    means = nn.functional.normalize(feats, p=2, dim=-1)
    try:
        for epoch in range(cfg.pfe_epochs):
            lr = cfg.lr_at(epoch)
            set_lr(opt, lr)
            order = pairs[rng.permutation(pairs.shape[0])]
            step_losses = []
            for start in range(0, order.shape[0], cfg.batch_size):
                b = torch.from_numpy(order[start : start + cfg.batch_size])
                var_i = torch.sigmoid(net.var_head(feats[b[:, 0]])).clamp(min=losses.VAR_FLOOR)
                var_j = torch.sigmoid(net.var_head(feats[b[:, 1]])).clamp(min=losses.VAR_FLOOR)
                loss = losses.pfe_loss(means[b[:, 0]], var_i, means[b[:, 1]], var_j)
                value = loss.item()
                _check_finite(value, "pfe", state.step)
                opt.zero_grad()
                loss.value.backward()
                opt.step()
                state.step += 1
                state.history.append(value)
                step_losses.append(value)
                tlog.write(phase="pfe", step=state.step, epoch=epoch, lr=lr, loss=value)
            mean_loss = float(np.mean(step_losses))
            state.epoch_losses.append(mean_loss)
            state.lrs.append(lr)
            state.epoch = epoch + 1
            tlog.write(phase="pfe", epoch=epoch, lr=lr, epoch_loss=mean_loss)
    finally:
        tlog.close()
    for p in net.extractor.parameters():
        p.requires_grad_(True)
    net.extractor.freeze_batchnorm()
    net.eval()
    state.optimizer_state = opt.state_dict()
    return net, state
