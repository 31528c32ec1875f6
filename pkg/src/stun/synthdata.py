"""Seeded synthetic geo-tagged image sets and the line-delimited manifest format.

Every place gets a smooth random base pattern. A sample of a place is that
pattern plus Gaussian pixel noise. ``clean`` samples carry the full pattern
with a small noise std. ``noisy`` samples carry an attenuated pattern
(``noisy_contrast``) under a larger noise std. How much place signal a view
retains is the controllable stand-in for how informative it is.

Manifest lines are JSON objects::

    {"id": 3, "path": "images/000003.npy", "easting": 100.0, "northing": 0.0,
     "noise": "noisy", "noise_std": 0.5}

``noise`` and ``noise_std`` are optional, so manifests of real images only need
``id``, ``path``, ``easting`` and ``northing``.
"""
from __future__ import annotations

import hashlib
import json
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy import ndimage

from .core import ConfigError, GeoTag, PlaceSample


class ManifestError(ValueError):
    """Malformed manifest or missing image file."""


@dataclass(frozen=True)
class SynthSpec:
    num_places: int = 50
    samples_per_place: int = 10
    spacing: float = 100.0  # meters between neighbouring places
    image_shape: tuple[int, int, int] = (3, 32, 32)
    noisy_fraction: float = 0.5
    clean_std: float = 0.05
    noise_std: float = 0.5
    noisy_contrast: float = 0.15  # base-pattern gain for noisy samples
    jitter: float = 3.0  # max offset of a sample from its place centre, meters
    pattern_cells: int = 4  # resolution of the low-frequency base field
    negative_radius: float = 25.0
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "image_shape", tuple(int(x) for x in self.image_shape))
        if self.num_places < 1 or self.samples_per_place < 1:
            raise ConfigError("need at least one place and one sample per place")
        if not self.spacing > self.negative_radius:
            raise ConfigError(
                f"place spacing {self.spacing} m must exceed the negative radius {self.negative_radius} m"
            )
        if self.clean_std < 0 or self.noise_std < 0:
            raise ConfigError("noise std must be >= 0")
        if not 0.0 < self.noisy_contrast <= 1.0:
            raise ConfigError("noisy_contrast must lie in (0, 1]")
        if not 0.0 <= self.noisy_fraction <= 1.0:
            raise ConfigError("noisy_fraction must lie in [0, 1]")
        if self.jitter < 0 or 2 * self.jitter >= self.spacing - self.negative_radius:
            raise ConfigError("jitter must be >= 0 and small enough to keep places apart")
        if len(self.image_shape) != 3:
            raise ConfigError("image_shape must be (C, H, W)")

    @classmethod
    def from_dict(cls, data: dict) -> "SynthSpec":
        known = set(cls.__dataclass_fields__)
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown synth spec keys: {sorted(unknown)}")
        return cls(**data)


@dataclass(eq=False)
class PlaceDataset:
    """Ordered samples plus optional ground-truth noise annotations.

    ``place`` holds the generating place index for synthetic sets and -1 for
    loaded real images.
    """

    samples: list[PlaceSample]
    noise_label: list[str | None] = field(default_factory=list)
    noise_std: np.ndarray | None = None
    place: np.ndarray | None = None
    paths: list[str] = field(default_factory=list)

    def __post_init__(self):
        ids = [s.id for s in self.samples]
        if len(set(ids)) != len(ids):
            raise ManifestError("duplicate sample ids")
        if not self.noise_label:
            self.noise_label = [None] * len(self.samples)

    def __len__(self) -> int:
        return len(self.samples)

    def __eq__(self, other):
        if not isinstance(other, PlaceDataset):
            return NotImplemented

        def opt_eq(a, b):
            if a is None or b is None:
                return a is None and b is None
            return np.array_equal(a, b)

        return (
            self.samples == other.samples
            and list(self.noise_label) == list(other.noise_label)
            and opt_eq(self.noise_std, other.noise_std)
        )

    __hash__ = None

    @property
    def ids(self) -> np.ndarray:
        return np.array([s.id for s in self.samples], dtype=np.int64)

    def images(self, idx: Sequence[int] | None = None) -> np.ndarray:
        chosen = self.samples if idx is None else [self.samples[i] for i in idx]
        return np.stack([s.image for s in chosen]).astype(np.float32, copy=False)

    def geos(self) -> np.ndarray:
        return np.array([[s.geo.easting, s.geo.northing] for s in self.samples], dtype=np.float64)

    def subset(self, idx: Sequence[int]) -> "PlaceDataset":
        idx = list(idx)
        return PlaceDataset(
            samples=[self.samples[i] for i in idx],
            noise_label=[self.noise_label[i] for i in idx],
            noise_std=None if self.noise_std is None else self.noise_std[idx],
            place=None if self.place is None else self.place[idx],
            paths=[self.paths[i] for i in idx] if self.paths else [],
        )

    def fingerprint(self) -> str:
        """Content hash over ids, geo tags and image bytes."""
        h = hashlib.sha256()
        for s in self.samples:
            h.update(np.int64(s.id).tobytes())
            h.update(np.array([s.geo.easting, s.geo.northing], dtype=np.float64).tobytes())
            h.update(np.ascontiguousarray(s.image, dtype=np.float32).tobytes())
        return h.hexdigest()


def _base_pattern(rng: np.random.Generator, shape: tuple[int, int, int], cells: int) -> np.ndarray:
    c, h, w = shape
    coarse = rng.standard_normal((c, cells, cells))
    field_ = ndimage.zoom(coarse, (1, h / cells, w / cells), order=3, mode="grid-wrap", grid_mode=True)
    field_ = field_[:, :h, :w]
    field_ = field_ - field_.mean()
    return field_ / (field_.std() + 1e-12)


def generate(spec: SynthSpec) -> PlaceDataset:
    """Build the dataset described by ``spec``; identical specs give identical data."""
    rng = np.random.default_rng(spec.seed)
    side = int(np.ceil(np.sqrt(spec.num_places)))
    n = spec.num_places * spec.samples_per_place
    n_noisy = int(round(spec.noisy_fraction * n))
    noisy = np.zeros(n, dtype=bool)
    noisy[rng.permutation(n)[:n_noisy]] = True

    samples, labels, stds, places = [], [], [], []
    sid = 0
    for p in range(spec.num_places):
        base = _base_pattern(rng, spec.image_shape, spec.pattern_cells)
        cx, cy = (p % side) * spec.spacing, (p // side) * spec.spacing
        for _ in range(spec.samples_per_place):
            std = spec.noise_std if noisy[sid] else spec.clean_std
            gain = spec.noisy_contrast if noisy[sid] else 1.0
            img = gain * base
            if std > 0:
                img = img + std * rng.standard_normal(spec.image_shape)
            r = spec.jitter * np.sqrt(rng.uniform())
            theta = rng.uniform(0, 2 * np.pi)
            geo = GeoTag(float(cx + r * np.cos(theta)), float(cy + r * np.sin(theta)))
            samples.append(PlaceSample(sid, img.astype(np.float32), geo))
            labels.append("noisy" if noisy[sid] else "clean")
            stds.append(std)
            places.append(p)
            sid += 1
    return PlaceDataset(samples, labels, np.array(stds, dtype=np.float64), np.array(places, dtype=np.int64))


def split_queries(n: int, query_fraction: float, seed: int) -> tuple[np.ndarray, np.ndarray]:
    """Seeded split of sample positions into (database, query) index arrays, both sorted."""
    # separate stream from generate(), which draws from default_rng(seed)
    rng = np.random.default_rng((seed, 0x51))
    perm = rng.permutation(n)
    n_query = max(1, int(round(query_fraction * n)))
    return np.sort(perm[n_query:]), np.sort(perm[:n_query])


# -- manifest IO ------------------------------------------------------------

def write_manifest(dataset: PlaceDataset, out_dir: str | os.PathLike, name: str = "manifest.jsonl") -> Path:
    """Write images as ``.npy`` files plus a line-delimited manifest; returns the manifest path."""
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    lines = []
    for i, s in enumerate(dataset.samples):
        rel = f"images/{s.id:06d}.npy"
        np.save(out / rel, np.ascontiguousarray(s.image, dtype=np.float32))
        rec = {"id": s.id, "path": rel, "easting": s.geo.easting, "northing": s.geo.northing}
        if dataset.noise_label[i] is not None:
            rec["noise"] = dataset.noise_label[i]
        if dataset.noise_std is not None:
            rec["noise_std"] = float(dataset.noise_std[i])
        lines.append(json.dumps(rec, sort_keys=True))
    path = out / name
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_text("\n".join(lines) + "\n")
    os.replace(tmp, path)
    return path


def _load_image(path: Path) -> np.ndarray:
    if path.suffix == ".npy":
        return np.load(path).astype(np.float32, copy=False)
    from PIL import Image

    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0
    return np.ascontiguousarray(arr.transpose(2, 0, 1))


def read_manifest(path: str | os.PathLike) -> PlaceDataset:
    path = Path(path)
    if path.is_dir():
        path = path / "manifest.jsonl"
    if not path.exists():
        raise ManifestError(f"manifest not found: {path}")
    root = path.parent
    samples, labels, stds, paths = [], [], [], []
    have_std = True
    for lineno, line in enumerate(path.read_text().splitlines(), start=1):
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
            sid = int(rec["id"])
            rel = str(rec["path"])
            geo = GeoTag(float(rec["easting"]), float(rec["northing"]))
        except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
            raise ManifestError(f"{path}:{lineno}: malformed manifest line ({exc})") from exc
        img_path = root / rel
        if not img_path.exists():
            raise ManifestError(f"{path}:{lineno}: image file for id {sid} not found: {img_path}")
        samples.append(PlaceSample(sid, _load_image(img_path), geo))
        labels.append(rec.get("noise"))
        if "noise_std" in rec:
            stds.append(float(rec["noise_std"]))
        else:
            have_std = False
        paths.append(rel)
    return PlaceDataset(
        samples,
        labels,
        np.array(stds, dtype=np.float64) if have_std and stds else None,
        None,
        paths,
    )
