"""Classifier heads, class activation maps, and their probabilistic forms.

A vanilla head turns pooled features into a softmax distribution; the same
linear weights also produce per-class activation maps. The probabilistic
reformulation (CAPE) rewrites that prediction as an exact ensemble of
per-pixel class distributions weighted by pixel saliency, so every
(row, column, class) cell carries an absolute probability contribution.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from .tensor import bilinear_upsample, minmax_normalize, rectify, softmax_axis

__all__ = [
    "VanillaHead",
    "CapeHead",
    "ActivationMaps",
    "VoxelContribution",
    "ExplanationMap",
    "ContributionForm",
    "vanilla_logits",
    "vanilla_forward",
    "activation_maps",
    "batch_shifted_maps",
    "batch_vanilla_forward",
    "batch_cape_forward",
    "cam_explanation",
    "pixel_class_dist",
    "naive_aggregate",
    "saliency_weights",
    "cape_forward",
    "voxel_contributions",
    "cape_explanation",
    "mu_cape_explanation",
    "class_difference_map",
    "DiffGroup",
    "ClassDifference",
    "thresholded_contribution_summary",
    "ContributionSummary",
    "non_additivity_witness",
]


@dataclass
class VanillaHead:
    """Linear class head: weights (K, C), bias (C,), fixed temperature."""

    weights: np.ndarray
    bias: np.ndarray
    temperature: float = 1.0

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=np.float64)
        self.bias = np.asarray(self.bias, dtype=np.float64)
        if self.weights.ndim != 2 or self.bias.shape != (self.weights.shape[1],):
            raise ValueError(
                f"inconsistent head shapes: weights {self.weights.shape}, bias {self.bias.shape}"
            )
        if not self.temperature > 0:
            raise ValueError(f"temperature must be positive, got {self.temperature}")

    @property
    def num_classes(self) -> int:
        return self.weights.shape[1]


@dataclass
class CapeHead:
    """Probabilistic-ensemble head; the temperature is learnable.

    Positivity is kept by storing log(temperature) as the free parameter.
    """

    weights: np.ndarray
    bias: np.ndarray
    log_temperature: float = 0.0

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=np.float64)
        self.bias = np.asarray(self.bias, dtype=np.float64)
        if self.weights.ndim != 2 or self.bias.shape != (self.weights.shape[1],):
            raise ValueError(
                f"inconsistent head shapes: weights {self.weights.shape}, bias {self.bias.shape}"
            )

    @property
    def temperature(self) -> float:
        return float(np.exp(self.log_temperature))

    @property
    def num_classes(self) -> int:
        return self.weights.shape[1]

    @classmethod
    def from_vanilla(cls, head: VanillaHead, temperature: float | None = None) -> "CapeHead":
        """Copy a vanilla head's parameters; default temperature matches it."""
        t = head.temperature if temperature is None else temperature
        return cls(head.weights.copy(), head.bias.copy(), float(np.log(t)))


@dataclass
class ActivationMaps:
    """Per-class activation maps and their bias-shifted form.

    class_maps[i, j, c] weights feature channels by class weights;
    shifted_maps adds the head bias (constant over space per class);
    saliency_logits is the class-mean of shifted_maps.
    """

    class_maps: np.ndarray
    shifted_maps: np.ndarray
    saliency_logits: np.ndarray

    @property
    def spatial_shape(self) -> tuple[int, int]:
        return self.class_maps.shape[0], self.class_maps.shape[1]

    @property
    def num_classes(self) -> int:
        return self.class_maps.shape[2]


class ContributionForm(Enum):
    """Two algebraically equal ways to assemble voxel contributions."""

    FACTORED = "factored"
    SINGLE_SOFTMAX = "single_softmax"


@dataclass
class VoxelContribution:
    """Nonnegative (H, W, C) contributions that sum to 1 over all cells."""

    values: np.ndarray

    def class_mass(self) -> np.ndarray:
        """Per-class spatial sums; equals the ensemble prediction."""
        return self.values.sum(axis=(0, 1))

    @property
    def num_classes(self) -> int:
        return self.values.shape[2]


@dataclass
class ExplanationMap:
    """A [0, 1] heatmap at image resolution plus its pre-upsample source."""

    values: np.ndarray
    kind: str
    class_index: int
    raw: np.ndarray


def vanilla_logits(features: np.ndarray, head: VanillaHead) -> np.ndarray:
    """Pre-temperature logits: pooled features through the linear head."""
    features = np.asarray(features, dtype=np.float64)
    if features.ndim != 3 or features.shape[2] != head.weights.shape[0]:
        raise ValueError(
            f"features {features.shape} do not match head weights {head.weights.shape}"
        )
    pooled = features.mean(axis=(0, 1))
    return pooled @ head.weights + head.bias


def vanilla_forward(
    features: np.ndarray, head: VanillaHead, temperature: float | None = None
) -> np.ndarray:
    """Class distribution softmax(logits / T); T defaults to the head's."""
    t = head.temperature if temperature is None else temperature
    return softmax_axis(vanilla_logits(features, head), axes=0, temperature=t)


def activation_maps(features: np.ndarray, head: VanillaHead | CapeHead) -> ActivationMaps:
    """Weight feature channels into per-class maps and derive saliency."""
    features = np.asarray(features, dtype=np.float64)
    if features.ndim != 3 or features.shape[2] != head.weights.shape[0]:
        raise ValueError(
            f"features {features.shape} do not match head weights {head.weights.shape}"
        )
    class_maps = np.einsum("ijk,kc->ijc", features, head.weights)
    shifted = class_maps + head.bias
    return ActivationMaps(class_maps, shifted, shifted.mean(axis=2))


def _check_class(maps_classes: int, class_index: int) -> int:
    c = int(class_index)
    if not 0 <= c < maps_classes:
        raise ValueError(f"class {c} out of range [0, {maps_classes})")
    return c


def _finish_map(raw: np.ndarray, target_size: tuple[int, int], kind: str, c: int) -> ExplanationMap:
    up = bilinear_upsample(raw, target_size)
    return ExplanationMap(minmax_normalize(up), kind, c, raw)


def cam_explanation(
    maps: ActivationMaps, class_index: int, target_size: tuple[int, int]
) -> ExplanationMap:
    """Classic activation-map heatmap: rectify, upsample, normalize."""
    c = _check_class(maps.num_classes, class_index)
    return _finish_map(rectify(maps.class_maps[:, :, c]), target_size, "cam", c)


def pixel_class_dist(maps: ActivationMaps, temperature: float = 1.0) -> np.ndarray:
    """Per-pixel class distribution: softmax over classes of the shifted maps."""
    return softmax_axis(maps.shifted_maps, axes=2, temperature=temperature)


def naive_aggregate(maps: ActivationMaps) -> np.ndarray:
    """Uniform spatial average of the per-pixel class distributions."""
    return pixel_class_dist(maps, 1.0).mean(axis=(0, 1))


def saliency_weights(maps: ActivationMaps, temperature: float = 1.0) -> np.ndarray:
    """Pixel weighting: softmax of the saliency logits over both spatial axes."""
    return softmax_axis(maps.saliency_logits, axes=(0, 1), temperature=temperature)


def cape_forward(maps: ActivationMaps, temperature: float = 1.0) -> np.ndarray:
    """Ensemble prediction: saliency-weighted sum of pixel class distributions."""
    dist = pixel_class_dist(maps, temperature)
    weights = saliency_weights(maps, temperature)
    return np.einsum("ijc,ij->c", dist, weights)


def voxel_contributions(
    maps: ActivationMaps,
    temperature: float = 1.0,
    form: ContributionForm = ContributionForm.FACTORED,
) -> VoxelContribution:
    """Exact per-cell decomposition of the ensemble prediction.

    FACTORED multiplies the per-pixel class distribution by the pixel
    saliency weight. SINGLE_SOFTMAX merges the two exponentials into one
    ratio whose denominator sums classes at the outer pixel and saliency
    over all pixels; the forms agree to float precision at any
    temperature. The temperature divides the logits of both factors.
    """
    if not temperature > 0:
        raise ValueError(f"temperature must be positive, got {temperature}")
    if form == ContributionForm.FACTORED:
        dist = pixel_class_dist(maps, temperature)
        weights = saliency_weights(maps, temperature)
        return VoxelContribution(dist * weights[:, :, None])

    class_logits = maps.shifted_maps / temperature
    sal_logits = maps.saliency_logits / temperature
    class_shift = class_logits.max(axis=2, keepdims=True)
    sal_shift = sal_logits.max()
    e_class = np.exp(class_logits - class_shift)
    e_sal = np.exp(sal_logits - sal_shift)
    numer = e_class * e_sal[:, :, None]
    # denominator of the merged ratio: sum over classes at the outer pixel
    # crossed with the saliency sum over every pixel
    denom = np.einsum("ijc,kl->ij", e_class, e_sal)
    return VoxelContribution(numer / denom[:, :, None])


def cape_explanation(
    contrib: VoxelContribution, class_index: int, target_size: tuple[int, int]
) -> ExplanationMap:
    """Heatmap of one class's contributions; already nonnegative, so no
    rectification before upsampling and normalization."""
    c = _check_class(contrib.num_classes, class_index)
    return _finish_map(contrib.values[:, :, c].copy(), target_size, "cape", c)


def mu_cape_explanation(
    maps: ActivationMaps, class_index: int, target_size: tuple[int, int]
) -> ExplanationMap:
    """Mutual-region-inclusive heatmap from pre-softmax logits.

    Uses the shifted class map plus the saliency logits, restoring
    attention on regions shared across classes at the cost of the exact
    decomposition property.
    """
    c = _check_class(maps.num_classes, class_index)
    raw = rectify(maps.shifted_maps[:, :, c] + maps.saliency_logits)
    return _finish_map(raw, target_size, "mu-cape", c)


@dataclass
class DiffGroup:
    """One ranked bundle of same-sign cells in a class-difference map."""

    sign: int
    rank: int
    cells: list[tuple[int, int]]
    total: float


@dataclass
class ClassDifference:
    """Signed contribution difference between two classes."""

    diff: np.ndarray
    class_a: int
    class_b: int
    groups: list[DiffGroup]
    residual: float

    def net_difference(self) -> float:
        return float(sum(g.total for g in self.groups) + self.residual)


def class_difference_map(
    contrib: VoxelContribution,
    class_a: int,
    class_b: int,
    group_size: int = 5,
    max_groups: int | None = None,
) -> ClassDifference:
    """Per-pixel contribution difference with ranked magnitude groups.

    Positive and negative cells are each sorted by |value| and chunked
    into groups of `group_size` (top-5, next-5, ...). Cells beyond
    `max_groups` groups per sign, and exact zeros, fall into the
    residual, so group totals plus the residual always account for the
    full class-probability difference.
    """
    ca = _check_class(contrib.num_classes, class_a)
    cb = _check_class(contrib.num_classes, class_b)
    if ca == cb:
        raise ValueError("class difference requires two distinct classes")
    diff = contrib.values[:, :, ca] - contrib.values[:, :, cb]
    h, w = diff.shape
    flat = diff.ravel()
    order = np.argsort(-np.abs(flat), kind="stable")
    groups: list[DiffGroup] = []
    counted = 0.0
    pos_cells: list[int] = []
    neg_cells: list[int] = []
    for idx in order:
        if flat[idx] > 0:
            pos_cells.append(int(idx))
        elif flat[idx] < 0:
            neg_cells.append(int(idx))
    for sign, cells in ((1, pos_cells), (-1, neg_cells)):
        for g in range(0, len(cells), group_size):
            rank = g // group_size
            if max_groups is not None and rank >= max_groups:
                break
            chunk = cells[g : g + group_size]
            total = float(sum(flat[i] for i in chunk))
            groups.append(
                DiffGroup(sign, rank, [(i // w, i % w) for i in chunk], total)
            )
            counted += total
    residual = float(flat.sum() - counted)
    return ClassDifference(diff, ca, cb, groups, residual)


@dataclass
class ContributionSummary:
    """Attention mass kept above a fraction-of-maximum threshold."""

    kept_mask: np.ndarray
    threshold: float
    kept_mass: float
    dropped_mass: float
    class_mass: float
    retained_ratio: float
    zero_mass: bool


def thresholded_contribution_summary(
    contrib: VoxelContribution | np.ndarray, class_index: int, fraction: float = 0.05
) -> ContributionSummary:
    """Keep cells at or above fraction * max of the class map and report how
    much of the class probability the kept regions retain."""
    if not 0.0 < fraction < 1.0:
        raise ValueError(f"fraction must be in (0, 1), got {fraction}")
    values = contrib.values if isinstance(contrib, VoxelContribution) else np.asarray(contrib)
    c = _check_class(values.shape[2], class_index)
    plane = values[:, :, c]
    class_mass = float(plane.sum())
    threshold = fraction * float(plane.max())
    kept_mask = plane >= threshold
    kept = float(plane[kept_mask].sum())
    dropped = class_mass - kept
    if class_mass <= 0.0:
        return ContributionSummary(kept_mask, threshold, kept, dropped, class_mass, 1.0, True)
    return ContributionSummary(
        kept_mask, threshold, kept, dropped, class_mass, kept / class_mass, False
    )


def batch_shifted_maps(features: np.ndarray, head: VanillaHead | CapeHead) -> np.ndarray:
    """Bias-shifted activation maps for a feature batch: (n, h, w, classes)."""
    features = np.asarray(features, dtype=np.float64)
    if features.ndim != 4 or features.shape[3] != head.weights.shape[0]:
        raise ValueError(
            f"feature batch {features.shape} does not match head weights {head.weights.shape}"
        )
    return np.einsum("nijk,kc->nijc", features, head.weights) + head.bias


def batch_vanilla_forward(
    features: np.ndarray, head: VanillaHead, temperature: float | None = None
) -> np.ndarray:
    """Vanilla class distributions for a feature batch: (n, classes)."""
    features = np.asarray(features, dtype=np.float64)
    if features.ndim != 4 or features.shape[3] != head.weights.shape[0]:
        raise ValueError(
            f"feature batch {features.shape} does not match head weights {head.weights.shape}"
        )
    t = head.temperature if temperature is None else temperature
    logits = features.mean(axis=(1, 2)) @ head.weights + head.bias
    return softmax_axis(logits, axes=1, temperature=t)


def batch_cape_forward(shifted_maps: np.ndarray, temperature: float = 1.0) -> np.ndarray:
    """Ensemble class distributions from a shifted-map batch: (n, classes)."""
    dist = softmax_axis(shifted_maps, axes=3, temperature=temperature)
    weights = softmax_axis(shifted_maps.mean(axis=3), axes=(1, 2), temperature=temperature)
    return np.einsum("nijc,nij->nc", dist, weights)


def non_additivity_witness() -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """A 1x2-pixel, 2-class instance separating softmax-of-mean from
    mean-of-softmax; averaging per-pixel distributions is not the same
    operation as classifying the averaged logits.

    Returns (shifted_maps, softmax_of_mean, mean_of_softmax).
    """
    shifted = np.array([[[0.0, 0.0], [4.0, 0.0]]])
    mean_logits = shifted.mean(axis=(0, 1))
    softmax_of_mean = softmax_axis(mean_logits, axes=0)
    mean_of_softmax = softmax_axis(shifted, axes=2).mean(axis=(0, 1))
    return shifted, softmax_of_mean, mean_of_softmax
