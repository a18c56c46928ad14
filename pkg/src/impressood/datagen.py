"""Procedural shape datasets used as the in-distribution set and OOD sets.

In-distribution images are filled geometric shapes (one class per shape)
rendered at random position and scale on a dim background, with additive
Gaussian pixel noise. OOD sets are uniform noise, shapes outside the ID
catalog, and sinusoidal gratings. Every generator is a pure function of
its :class:`DatasetSpec`.
"""

from __future__ import annotations

import enum
from dataclasses import asdict, dataclass, replace
from pathlib import Path
from typing import Callable, Dict, Optional, Sequence, Tuple

import numpy as np

from . import _store


class ConfigError(ValueError):
    """Invalid dataset or pipeline configuration."""


class OODKind(str, enum.Enum):
    UNIFORM_NOISE = "uniform_noise"
    HELD_OUT_SHAPE = "held_out_shape"
    GRATING_TEXTURE = "grating_texture"


@dataclass(frozen=True)
class ImageBatch:
    pixels: np.ndarray  # [n, channels, h, w] float32 in [0, 1]
    labels: Optional[np.ndarray] = None  # [n] int64

    def __post_init__(self):
        if self.pixels.ndim != 4:
            raise ValueError(f"pixels must be 4-D, got shape {self.pixels.shape}")
        if self.labels is not None and len(self.labels) != len(self.pixels):
            raise ValueError("labels length does not match number of images")

    def __len__(self) -> int:
        return len(self.pixels)

    def subset(self, idx) -> "ImageBatch":
        labels = None if self.labels is None else self.labels[idx]
        return ImageBatch(self.pixels[idx], labels)

    def save(self, path: str | Path, meta: Optional[dict] = None) -> None:
        arrays = {"pixels": self.pixels}
        if self.labels is not None:
            arrays["labels"] = self.labels
        _store.write_blob_dir(path, "image_batch", arrays, meta or {})

    @classmethod
    def load(cls, path: str | Path) -> "ImageBatch":
        arrays, _ = _store.read_blob_dir(path, "image_batch")
        return cls(arrays["pixels"], arrays.get("labels"))


@dataclass(frozen=True)
class DatasetSpec:
    num_classes: int = 4
    image_size: int = 16
    channels: int = 3
    samples_per_class: int = 2500
    seed: int = 0
    ood_kind: Optional[OODKind] = None
    noise_sigma: float = 0.05

    def validate(self) -> None:
        if self.num_classes < 2:
            raise ConfigError(f"num_classes must be >= 2, got {self.num_classes}")
        if self.image_size < 8:
            raise ConfigError(f"image_size must be >= 8, got {self.image_size}")
        if self.samples_per_class < 1:
            raise ConfigError(f"samples_per_class must be >= 1, got {self.samples_per_class}")
        if self.channels < 1:
            raise ConfigError(f"channels must be >= 1, got {self.channels}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["ood_kind"] = None if self.ood_kind is None else OODKind(self.ood_kind).value
        return d


# --- shape renderers -------------------------------------------------------
# Each renderer maps centred coordinates (u, v) in units of the shape radius
# to a boolean mask.

def _circle(u, v):
    return u**2 + v**2 <= 1.0


def _square(u, v):
    return (np.abs(u) <= 0.8) & (np.abs(v) <= 0.8)


def _triangle(u, v):
    # upward triangle with apex at v=-1 and base at v=0.7
    return (v <= 0.7) & (v >= -1.0) & (np.abs(u) <= (v + 1.0) / 1.7 * 0.95)


def _cross(u, v):
    arm = 0.33
    return ((np.abs(u) <= arm) & (np.abs(v) <= 1.0)) | ((np.abs(v) <= arm) & (np.abs(u) <= 1.0))


def _ring(u, v):
    r2 = u**2 + v**2
    return (r2 <= 1.0) & (r2 >= 0.45**2)


def _star(u, v):
    r = np.sqrt(u**2 + v**2)
    theta = np.arctan2(v, u)
    # five-pointed star outline in polar form
    return r <= 0.45 + 0.55 * np.abs(np.cos(2.5 * theta)) ** 3


ID_RENDERERS: Dict[str, Callable] = {
    "circle": _circle,
    "square": _square,
    "triangle": _triangle,
    "cross": _cross,
}
HELD_OUT_RENDERERS: Dict[str, Callable] = {
    "ring": _ring,
    "star": _star,
}


BACKGROUND = 0.1
FOREGROUND = 0.9


def _render(rng: np.random.Generator, renderer: Callable, n: int, size: int, channels: int,
            noise_sigma: float) -> np.ndarray:
    grid = np.arange(size, dtype=np.float64) + 0.5
    yy, xx = np.meshgrid(grid, grid, indexing="ij")
    out = np.empty((n, size, size), dtype=np.float64)
    for i in range(n):
        radius = rng.uniform(0.3, 0.42) * size
        margin = radius * 0.9
        cx = rng.uniform(margin, size - margin)
        cy = rng.uniform(margin, size - margin)
        mask = renderer((xx - cx) / radius, (yy - cy) / radius)
        out[i] = np.where(mask, FOREGROUND, BACKGROUND)
    out += rng.normal(0.0, noise_sigma, size=out.shape)
    np.clip(out, 0.0, 1.0, out=out)
    return np.repeat(out[:, None], channels, axis=1).astype(np.float32)


def generate_id_dataset(spec: DatasetSpec) -> ImageBatch:
    """Class-balanced labelled shapes; class ``c`` is the ``c``-th ID renderer."""
    spec.validate()
    if spec.num_classes > len(ID_RENDERERS):
        raise ConfigError(
            f"num_classes={spec.num_classes} exceeds the renderer catalog ({len(ID_RENDERERS)})")
    rng = np.random.default_rng([spec.seed, 0x1D])
    renderers = list(ID_RENDERERS.values())[: spec.num_classes]
    pixels = [
        _render(rng, r, spec.samples_per_class, spec.image_size, spec.channels, spec.noise_sigma)
        for r in renderers
    ]
    labels = np.repeat(np.arange(spec.num_classes, dtype=np.int64), spec.samples_per_class)
    return ImageBatch(np.concatenate(pixels), labels)


def generate_ood_dataset(spec: DatasetSpec, n: Optional[int] = None) -> ImageBatch:
    """Unlabelled OOD images; ``n`` defaults to ``samples_per_class``."""
    spec.validate()
    if spec.ood_kind is None:
        raise ConfigError("ood_kind must be set for an OOD dataset")
    kind = OODKind(spec.ood_kind)
    n = spec.samples_per_class if n is None else n
    s, ch = spec.image_size, spec.channels
    rng = np.random.default_rng([spec.seed, 0x00D, list(OODKind).index(kind)])
    if kind is OODKind.UNIFORM_NOISE:
        pixels = rng.uniform(0.0, 1.0, size=(n, ch, s, s)).astype(np.float32)
    elif kind is OODKind.HELD_OUT_SHAPE:
        renderers = list(HELD_OUT_RENDERERS.values())
        which = rng.integers(0, len(renderers), size=n)
        pixels = np.empty((n, ch, s, s), dtype=np.float32)
        for j, r in enumerate(renderers):
            idx = np.flatnonzero(which == j)
            if len(idx):
                pixels[idx] = _render(rng, r, len(idx), s, ch, spec.noise_sigma)
    else:
        grid = np.arange(s, dtype=np.float64)
        yy, xx = np.meshgrid(grid, grid, indexing="ij")
        freq = rng.uniform(0.08, 0.35, size=n)
        theta = rng.uniform(0.0, np.pi, size=n)
        phase = rng.uniform(0.0, 2 * np.pi, size=n)
        proj = (np.cos(theta)[:, None, None] * xx + np.sin(theta)[:, None, None] * yy)
        g = 0.5 + 0.45 * np.sin(2 * np.pi * freq[:, None, None] * proj + phase[:, None, None])
        g += rng.normal(0.0, spec.noise_sigma, size=g.shape)
        np.clip(g, 0.0, 1.0, out=g)
        pixels = np.repeat(g[:, None], ch, axis=1).astype(np.float32)
    return ImageBatch(pixels)


def split(dataset: ImageBatch, fractions: Sequence[float], seed: int
          ) -> Tuple[ImageBatch, ImageBatch]:
    """Stratified two-way split; each class is shuffled then cut by ``fractions``."""
    if dataset.labels is None:
        raise ConfigError("split requires a labelled dataset")
    if len(fractions) != 2 or abs(sum(fractions) - 1.0) > 1e-9 or min(fractions) < 0:
        raise ConfigError(f"fractions must be two non-negative values summing to 1, got {fractions}")
    rng = np.random.default_rng([seed, 0x5B])
    train_idx, test_idx = [], []
    for c in np.unique(dataset.labels):
        idx = np.flatnonzero(dataset.labels == c)
        idx = idx[rng.permutation(len(idx))]
        n_train = int(round(fractions[0] * len(idx)))
        if n_train == 0 or (fractions[1] > 0 and n_train == len(idx)):
            raise ConfigError(f"class {int(c)} would be empty after split")
        train_idx.append(idx[:n_train])
        test_idx.append(idx[n_train:])
    train_idx = np.sort(np.concatenate(train_idx))
    test_idx = np.sort(np.concatenate(test_idx))
    return dataset.subset(train_idx), dataset.subset(test_idx)


def standard_splits(spec: DatasetSpec, train_per_class: int, test_per_class: int
                    ) -> Tuple[ImageBatch, ImageBatch]:
    """Generate the ID set and split it into ``train_per_class``/``test_per_class``."""
    total = train_per_class + test_per_class
    full = generate_id_dataset(replace(spec, samples_per_class=total, ood_kind=None))
    frac = train_per_class / total
    return split(full, (frac, 1.0 - frac), spec.seed)
