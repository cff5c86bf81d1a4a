"""Synthetic image dataset with pixel-exact ground-truth region masks.

Each image carries one class-discriminative glyph (a shape in a
class-specific color, placed uniformly at random) and one class-mutual
region (the same gray ellipse regardless of class), over a dark
background with additive Gaussian noise. The masks let tests measure
where an explanation method places its attention.
"""
from __future__ import annotations

import json
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .tensor import load_cpt1, save_cpt1

__all__ = [
    "SynthSpec",
    "SynthSplit",
    "SynthDataset",
    "class_style",
    "render_sample",
    "generate",
    "save_dataset",
    "load_dataset",
    "load_split",
]

INDEX_NAME = "index.json"
DATASET_FORMAT = "cape-synth-v1"

# Zero background: featureless off-object cells keep per-cell class votes
# near the (class-balanced) head biases, so the spatial ensemble's
# prediction is driven by the glyph and ellipse cells that carry signal.
BACKGROUND = 0.0
MUTUAL_GRAY = 0.55
MUTUAL_AXES = (4, 6)  # (vertical, horizontal) semi-axes of the shared ellipse

GLYPH_SHAPES = ("triangle", "square", "disc")
# Saturated palette: strong color contrast lets the desk-scale backbone
# separate classes within its short training budget.
GLYPH_COLORS = (
    (1.0, 0.0, 0.0),
    (0.0, 1.0, 0.0),
    (0.0, 0.0, 1.0),
    (1.0, 1.0, 0.0),
    (1.0, 0.0, 1.0),
    (0.0, 1.0, 1.0),
    (1.0, 0.5, 0.0),
    (0.5, 0.0, 1.0),
)
GLYPH_RADIUS = 6


@dataclass(frozen=True)
class SynthSpec:
    """Generation parameters; one spec fully determines the dataset."""

    num_classes: int = 3
    image_size: int = 32
    train_count: int = 2000
    test_count: int = 500
    noise: float = 0.05
    seed: int = 0

    def __post_init__(self):
        if self.num_classes < 1:
            raise ValueError("need at least one class")
        if self.num_classes == 1:
            warnings.warn("single-class dataset: every label will be 0")
        if self.image_size < 4 * GLYPH_RADIUS:
            raise ValueError(f"image size must be at least {4 * GLYPH_RADIUS}")
        if self.train_count < 0 or self.test_count < 0:
            raise ValueError("split counts must be nonnegative")
        if self.noise < 0:
            raise ValueError("noise level must be nonnegative")

    def to_dict(self) -> dict:
        return {
            "num_classes": self.num_classes,
            "image_size": self.image_size,
            "train_count": self.train_count,
            "test_count": self.test_count,
            "noise": self.noise,
            "seed": self.seed,
        }


@dataclass
class SynthSplit:
    """One split: images (n, s, s, 3), labels (n,), boolean masks (n, s, s)."""

    images: np.ndarray
    labels: np.ndarray
    glyph_masks: np.ndarray
    mutual_masks: np.ndarray

    def __len__(self) -> int:
        return self.images.shape[0]


@dataclass
class SynthDataset:
    spec: SynthSpec
    splits: dict[str, SynthSplit]


def class_style(label: int) -> tuple[str, tuple[float, float, float]]:
    """Shape name and RGB color of a class's discriminative glyph."""
    return (
        GLYPH_SHAPES[label % len(GLYPH_SHAPES)],
        GLYPH_COLORS[label % len(GLYPH_COLORS)],
    )


def _glyph_mask(shape: str, size: int, ci: int, cj: int, r: int) -> np.ndarray:
    ii, jj = np.mgrid[0:size, 0:size]
    di, dj = ii - ci, jj - cj
    if shape == "disc":
        return di * di + dj * dj <= r * r
    if shape == "square":
        return (np.abs(di) <= r) & (np.abs(dj) <= r)
    if shape == "triangle":
        return (di >= -r) & (di <= r) & (np.abs(dj) <= (di + r) / 2.0)
    raise ValueError(f"unknown glyph shape: {shape!r}")


def _ellipse_mask(size: int, ci: int, cj: int, axes: tuple[int, int]) -> np.ndarray:
    ii, jj = np.mgrid[0:size, 0:size]
    ai, aj = axes
    return ((ii - ci) / ai) ** 2 + ((jj - cj) / aj) ** 2 <= 1.0


def render_sample(
    rng: np.random.Generator, spec: SynthSpec, label: int
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """One image plus its glyph and mutual-region masks.

    The glyph overdraws the ellipse where they overlap, and the mutual
    mask excludes the overdrawn pixels, so the two masks are disjoint.
    """
    size = spec.image_size
    shape, color = class_style(label)
    margin = max(GLYPH_RADIUS, *MUTUAL_AXES)
    eci, ecj = rng.integers(margin, size - margin, size=2)
    gci, gcj = rng.integers(GLYPH_RADIUS, size - GLYPH_RADIUS, size=2)

    image = np.full((size, size, 3), BACKGROUND)
    ellipse = _ellipse_mask(size, int(eci), int(ecj), MUTUAL_AXES)
    image[ellipse] = MUTUAL_GRAY
    glyph = _glyph_mask(shape, size, int(gci), int(gcj), GLYPH_RADIUS)
    image[glyph] = color
    image += rng.normal(0.0, spec.noise, size=image.shape)
    return np.clip(image, 0.0, 1.0), glyph, ellipse & ~glyph


def _balanced_labels(rng: np.random.Generator, count: int, classes: int) -> np.ndarray:
    labels = np.arange(count) % classes
    return labels[rng.permutation(count)]


def _generate_split(rng: np.random.Generator, spec: SynthSpec, count: int) -> SynthSplit:
    size = spec.image_size
    labels = _balanced_labels(rng, count, spec.num_classes)
    images = np.empty((count, size, size, 3))
    glyphs = np.empty((count, size, size), dtype=bool)
    mutuals = np.empty((count, size, size), dtype=bool)
    for i, label in enumerate(labels):
        images[i], glyphs[i], mutuals[i] = render_sample(rng, spec, int(label))
    return SynthSplit(images, labels.astype(np.int64), glyphs, mutuals)


def generate(spec: SynthSpec) -> SynthDataset:
    """Deterministically generate the train and test splits."""
    rng = np.random.default_rng(spec.seed)
    return SynthDataset(
        spec,
        {
            "train": _generate_split(rng, spec, spec.train_count),
            "test": _generate_split(rng, spec, spec.test_count),
        },
    )


def save_dataset(dataset: SynthDataset, directory) -> Path:
    """Write per-split tensor files and the JSON index."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    splits_meta = {}
    for name, split in dataset.splits.items():
        files = {
            "images": f"{name}_images.cpt1",
            "labels": f"{name}_labels.cpt1",
            "glyph_masks": f"{name}_glyph_masks.cpt1",
            "mutual_masks": f"{name}_mutual_masks.cpt1",
        }
        save_cpt1(directory / files["images"], split.images)
        save_cpt1(directory / files["labels"], split.labels.astype(np.float64))
        save_cpt1(directory / files["glyph_masks"], split.glyph_masks.astype(np.float64))
        save_cpt1(directory / files["mutual_masks"], split.mutual_masks.astype(np.float64))
        splits_meta[name] = {"count": len(split), "files": files}
    index = {
        "format": DATASET_FORMAT,
        "spec": dataset.spec.to_dict(),
        "classes": [
            {"label": c, "shape": class_style(c)[0], "color": list(class_style(c)[1])}
            for c in range(dataset.spec.num_classes)
        ],
        "splits": splits_meta,
    }
    path = directory / INDEX_NAME
    path.write_text(json.dumps(index, indent=2, sort_keys=True) + "\n")
    return path


def _read_index(directory) -> dict:
    path = Path(directory) / INDEX_NAME
    if not path.is_file():
        raise FileNotFoundError(f"no dataset index at {path}")
    index = json.loads(path.read_text())
    if index.get("format") != DATASET_FORMAT:
        raise ValueError(f"unrecognized dataset format: {index.get('format')!r}")
    return index


def load_split(directory, name: str) -> SynthSplit:
    directory = Path(directory)
    index = _read_index(directory)
    if name not in index["splits"]:
        raise ValueError(f"dataset has no split {name!r}")
    files = index["splits"][name]["files"]
    return SynthSplit(
        images=load_cpt1(directory / files["images"]),
        labels=load_cpt1(directory / files["labels"]).astype(np.int64),
        glyph_masks=load_cpt1(directory / files["glyph_masks"]).astype(bool),
        mutual_masks=load_cpt1(directory / files["mutual_masks"]).astype(bool),
    )


def load_dataset(directory) -> SynthDataset:
    index = _read_index(directory)
    spec = SynthSpec(**index["spec"])
    return SynthDataset(spec, {name: load_split(directory, name) for name in index["splits"]})
