"""Domain types shared across the pipeline.

Nothing in here learns anything. Every type is a frozen dataclass so that
instances can be handed to concurrent readers without copying.
"""
from __future__ import annotations

import enum
import hashlib
import json
import math
from dataclasses import asdict, dataclass, field, fields, replace
from typing import Any, Mapping, Sequence

import numpy as np

CONFIG_SCHEMA_VERSION = 1


class ConfigError(ValueError):
    """Raised for invalid or unknown configuration values."""


class PairLabel(str, enum.Enum):
    POSITIVE = "positive"
    NEGATIVE = "negative"
    IGNORE = "ignore"


class TupleKind(str, enum.Enum):
    DOUBLET = "doublet"
    TRIPLET = "triplet"
    QUADRUPLET = "quadruplet"


# teacher loss name -> tuple kind it consumes
LOSS_TUPLE_KIND = {
    "contrastive": TupleKind.DOUBLET,
    "triplet": TupleKind.TRIPLET,
    "quadruplet": TupleKind.QUADRUPLET,
}


@dataclass(frozen=True)
class GeoTag:
    """Planar (already projected) position in meters."""

    easting: float
    northing: float

    def __post_init__(self):
        if not (math.isfinite(self.easting) and math.isfinite(self.northing)):
            raise ValueError(f"non-finite geo tag ({self.easting}, {self.northing})")


@dataclass(frozen=True, eq=False)
class PlaceSample:
    id: int
    image: np.ndarray  # (C, H, W) float32
    geo: GeoTag

    def __eq__(self, other):
        if not isinstance(other, PlaceSample):
            return NotImplemented
        return (
            self.id == other.id
            and self.geo == other.geo
            and self.image.shape == other.image.shape
            and np.array_equal(self.image, other.image)
        )

    __hash__ = None


@dataclass(frozen=True, eq=False)
class EmbeddingDistribution:
    """Diagonal Gaussian embedding: unit-norm mean plus per-dimension variance."""

    mean: np.ndarray
    variance: np.ndarray

    def __post_init__(self):
        mean = np.asarray(self.mean, dtype=np.float64)
        var = np.asarray(self.variance, dtype=np.float64)
        if mean.ndim != 1 or mean.shape != var.shape:
            raise ValueError(f"mean {mean.shape} and variance {var.shape} must be matching vectors")
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "variance", var)

    @property
    def dim(self) -> int:
        return self.mean.shape[0]

    def check(self, atol: float = 1e-5) -> None:
        """Raise if the unit-norm / (0, 1] variance invariants do not hold."""
        norm = float(np.linalg.norm(self.mean))
        if abs(norm - 1.0) > atol:
            raise ValueError(f"mean norm {norm} is not 1")
        if not (np.all(self.variance > 0) and np.all(self.variance <= 1)):
            raise ValueError("variance must lie in (0, 1]")


@dataclass(frozen=True)
class TupleBatch:
    kind: TupleKind
    anchors: tuple[int, ...] = ()
    positives: tuple[int, ...] = ()
    negatives1: tuple[int, ...] = ()
    negatives2: tuple[int, ...] = ()
    similar: tuple[bool, ...] = ()  # doublets only
    flags: frozenset = field(default_factory=frozenset)

    def __post_init__(self):
        object.__setattr__(self, "kind", TupleKind(self.kind))
        for name in ("anchors", "positives", "negatives1", "negatives2", "similar"):
            object.__setattr__(self, name, tuple(getattr(self, name)))
        n = len(self.anchors)
        used = {
            TupleKind.DOUBLET: ("positives", "similar"),
            TupleKind.TRIPLET: ("positives", "negatives1"),
            TupleKind.QUADRUPLET: ("positives", "negatives1", "negatives2"),
        }[self.kind]
        for name in used:
            if len(getattr(self, name)) != n:
                raise ValueError(f"{name} has {len(getattr(self, name))} entries, anchors has {n}")
        unused = {"positives", "negatives1", "negatives2", "similar"} - set(used)
        for name in unused:
            if getattr(self, name):
                raise ValueError(f"{name} must be empty for {self.kind.value} batches")

    def __len__(self) -> int:
        return len(self.anchors)

    def rows(self) -> list[tuple]:
        """One tuple of sample indices (plus similarity flag for doublets) per item."""
        if self.kind is TupleKind.DOUBLET:
            return list(zip(self.anchors, self.positives, self.similar))
        if self.kind is TupleKind.TRIPLET:
            return list(zip(self.anchors, self.positives, self.negatives1))
        return list(zip(self.anchors, self.positives, self.negatives1, self.negatives2))

    @classmethod
    def from_rows(cls, kind: TupleKind | str, rows: Sequence[tuple], flags=frozenset()) -> "TupleBatch":
        kind = TupleKind(kind)
        cols = list(zip(*rows)) if rows else []
        if kind is TupleKind.DOUBLET:
            a, p, s = cols if cols else ((), (), ())
            return cls(kind, a, p, similar=tuple(bool(x) for x in s), flags=frozenset(flags))
        if kind is TupleKind.TRIPLET:
            a, p, n = cols if cols else ((), (), ())
            return cls(kind, a, p, n, flags=frozenset(flags))
        a, p, n1, n2 = cols if cols else ((), (), (), ())
        return cls(kind, a, p, n1, n2, flags=frozenset(flags))

    @classmethod
    def concat(cls, kind: TupleKind | str, batches: Sequence["TupleBatch"]) -> "TupleBatch":
        rows = [r for b in batches for r in b.rows()]
        flags = frozenset().union(*(b.flags for b in batches)) if batches else frozenset()
        return cls.from_rows(kind, rows, flags)


@dataclass(frozen=True)
class EncoderSpec:
    """Architecture of the shared feature extractor.

    ``backbone`` is ``"tiny-conv"`` (a small conv stack with ``widths``) or a
    named torchvision backbone such as ``"resnet50"``.
    """

    backbone: str = "tiny-conv"
    widths: tuple[int, ...] = (16, 32, 64)
    pooling: str = "gem"
    gem_p: float = 3.0
    embedding_dim: int = 2048
    dropout: float = 0.0
    in_channels: int = 3

    def __post_init__(self):
        object.__setattr__(self, "widths", tuple(int(w) for w in self.widths))
        if self.embedding_dim < 2:
            raise ConfigError("embedding_dim must be >= 2")
        if self.pooling not in ("gem", "avg"):
            raise ConfigError(f"unknown pooling {self.pooling!r}")
        if self.pooling == "gem" and not self.gem_p > 0:
            raise ConfigError("GeM exponent must be positive")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError("dropout rate must lie in [0, 1)")
        if self.backbone == "tiny-conv" and not self.widths:
            raise ConfigError("tiny-conv backbone needs at least one layer width")


@dataclass(frozen=True)
class ExperimentConfig:
    """All hyperparameters of one experiment. Defaults are the full-scale published values."""

    loss: str = "triplet"
    contrastive_margin: float = 0.4
    triplet_margin: float = 0.1
    quadruplet_margin1: float = 0.1
    quadruplet_margin2: float = 0.1
    batch_size: int = 8
    lr: float = 1e-5
    lr_decay: float = 0.99
    weight_decay: float = 1e-3
    student_lr: float | None = None
    positive_radius: float = 10.0
    negative_radius: float = 25.0
    seed: int = 0
    encoder: EncoderSpec = field(default_factory=EncoderSpec)
    image_shape: tuple[int, int, int] = (3, 200, 200)
    teacher_epochs: int = 1
    student_epochs: int = 1
    pfe_epochs: int = 1
    mc_dropout_epochs: int = 1
    mc_dropout_rate: float = 0.2
    mc_passes: int = 40
    hardest_k: int = 10
    query_fraction: float = 0.3
    bins: int = 11
    topk: int = 10
    student_loss_reduction: str = "mean"
    schema_version: int = CONFIG_SCHEMA_VERSION

    def __post_init__(self):
        if isinstance(self.encoder, Mapping):
            object.__setattr__(self, "encoder", EncoderSpec(**self.encoder))
        object.__setattr__(self, "image_shape", tuple(int(x) for x in self.image_shape))
        if self.loss not in LOSS_TUPLE_KIND:
            raise ConfigError(f"unknown loss {self.loss!r}; expected one of {sorted(LOSS_TUPLE_KIND)}")
        for name in ("contrastive_margin", "triplet_margin", "quadruplet_margin1", "quadruplet_margin2"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be >= 0")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if not self.positive_radius < self.negative_radius:
            raise ConfigError("positive_radius must be smaller than negative_radius")
        if self.positive_radius < 0:
            raise ConfigError("radii must be nonnegative")
        if self.mc_passes < 2:
            raise ConfigError("mc_passes must be >= 2")
        if self.bins < 1 or self.topk < 1 or self.hardest_k < 1:
            raise ConfigError("bins, topk and hardest_k must be >= 1")
        if not 0.0 < self.query_fraction < 1.0:
            raise ConfigError("query_fraction must lie in (0, 1)")
        if self.student_loss_reduction not in ("mean", "sum"):
            raise ConfigError("student_loss_reduction must be 'mean' or 'sum'")
        if self.image_shape[0] != self.encoder.in_channels:
            raise ConfigError("image channels do not match encoder.in_channels")
        if self.schema_version != CONFIG_SCHEMA_VERSION:
            raise ConfigError(f"unsupported config schema_version {self.schema_version}")

    @property
    def tuple_kind(self) -> TupleKind:
        return LOSS_TUPLE_KIND[self.loss]

    @property
    def embedding_dim(self) -> int:
        return self.encoder.embedding_dim

    def margins(self) -> tuple[float, ...]:
        if self.loss == "contrastive":
            return (self.contrastive_margin,)
        if self.loss == "triplet":
            return (self.triplet_margin,)
        return (self.quadruplet_margin1, self.quadruplet_margin2)

    def lr_at(self, epoch: int, base: float | None = None) -> float:
        base = self.lr if base is None else base
        return base * self.lr_decay**epoch

    def to_dict(self) -> dict[str, Any]:
        d = asdict(self)
        d["encoder"]["widths"] = list(d["encoder"]["widths"])
        d["image_shape"] = list(d["image_shape"])
        return d

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "ExperimentConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        enc = data.get("encoder", {})
        if isinstance(enc, Mapping):
            enc_known = {f.name for f in fields(EncoderSpec)}
            bad = set(enc) - enc_known
            if bad:
                raise ConfigError(f"unknown encoder keys: {sorted(bad)}")
        try:
            return cls(**dict(data))
        except TypeError as exc:
            raise ConfigError(str(exc)) from exc

    def config_hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()

    def replace(self, **changes) -> "ExperimentConfig":
        return replace(self, **changes)


def geo_distance(a: GeoTag, b: GeoTag) -> float:
    return math.hypot(a.easting - b.easting, a.northing - b.northing)


def label_for_distance(dist: float, positive_radius: float, negative_radius: float) -> PairLabel:
    if dist <= positive_radius:
        return PairLabel.POSITIVE
    if dist > negative_radius:
        return PairLabel.NEGATIVE
    return PairLabel.IGNORE


def label_of_pair(q: PlaceSample, c: PlaceSample, cfg: ExperimentConfig) -> PairLabel:
    """Positive within the positive radius, negative beyond the negative radius, else ignore."""
    return label_for_distance(geo_distance(q.geo, c.geo), cfg.positive_radius, cfg.negative_radius)


def geo_array(samples: Sequence[PlaceSample]) -> np.ndarray:
    return np.array([[s.geo.easting, s.geo.northing] for s in samples], dtype=np.float64).reshape(-1, 2)


def pairwise_geo_distances(a: np.ndarray, b: np.ndarray | None = None) -> np.ndarray:
    """Euclidean distances between rows of two (n, 2) coordinate arrays."""
    b = a if b is None else b
    diff = a[:, None, :] - b[None, :, :]
    return np.hypot(diff[..., 0], diff[..., 1])


def label_matrix(dist: np.ndarray, cfg: ExperimentConfig) -> tuple[np.ndarray, np.ndarray]:
    """Boolean (positive, negative) masks for a distance matrix; the rest is ignored."""
    return dist <= cfg.positive_radius, dist > cfg.negative_radius
