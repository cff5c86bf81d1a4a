"""Full classifier: conv backbone plus vanilla and ensemble heads.

A model bundles one backbone with a vanilla softmax head and a
probabilistic-ensemble head sharing the feature space. Checkpoints are a
directory of binary tensor files plus a JSON manifest.
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import heads as H
from .backbone import (
    DEFAULT_ARCHITECTURE,
    DEFAULT_INPUT_SIZE,
    BackboneParams,
    LayerSpec,
    backbone_forward,
    forward_batch,
    glorot_backbone,
    load_backbone,
    save_backbone,
)
from .tensor import load_cpt1, save_cpt1

__all__ = [
    "CapeModel",
    "init_model",
    "save_model",
    "load_model",
    "batch_features",
    "batch_predict_vanilla",
    "batch_predict_cape",
]

CHECKPOINT_FORMAT = "cape-checkpoint-v1"


@dataclass
class CapeModel:
    """Backbone + vanilla head + ensemble head over shared features."""

    backbone: BackboneParams
    vanilla: H.VanillaHead
    cape: H.CapeHead
    pretrained: bool = False

    def __post_init__(self):
        k = self.backbone.feature_channels
        if self.vanilla.weights.shape[0] != k or self.cape.weights.shape[0] != k:
            raise ValueError(
                f"head weight rows must match backbone channels ({k}); got "
                f"vanilla {self.vanilla.weights.shape}, cape {self.cape.weights.shape}"
            )
        if self.vanilla.num_classes != self.cape.num_classes:
            raise ValueError("heads disagree on the number of classes")

    @property
    def num_classes(self) -> int:
        return self.vanilla.num_classes

    def features(self, image: np.ndarray) -> np.ndarray:
        feats, _ = backbone_forward(image, self.backbone)
        return feats

    def predict_vanilla(self, image: np.ndarray, temperature: float | None = None) -> np.ndarray:
        """Standard softmax prediction; temperature defaults to the head's."""
        return H.vanilla_forward(self.features(image), self.vanilla, temperature)

    def predict_cape(self, image: np.ndarray, temperature: float | None = None) -> np.ndarray:
        """Ensemble prediction; temperature defaults to the head's learned one.

        The ensemble head owns its temperature as a trained parameter, so
        its deployed output is evaluated at exp(log_temperature). Passing
        an explicit temperature overrides for analysis.
        """
        maps = H.activation_maps(self.features(image), self.cape)
        return H.cape_forward(maps, self._cape_temp(temperature))

    def _cape_temp(self, temperature: float | None) -> float:
        return self.cape.temperature if temperature is None else float(temperature)

    def contributions(
        self,
        image: np.ndarray,
        temperature: float | None = None,
        form: H.ContributionForm = H.ContributionForm.FACTORED,
    ) -> H.VoxelContribution:
        maps = H.activation_maps(self.features(image), self.cape)
        return H.voxel_contributions(maps, self._cape_temp(temperature), form)

    def explain(
        self,
        image: np.ndarray,
        class_index: int,
        method: str = "cape",
        temperature: float | None = None,
    ) -> H.ExplanationMap:
        """Heatmap for one class by method: 'cam', 'cape', or 'mu-cape'.

        'cam' uses the vanilla head's maps; the ensemble methods use the
        ensemble head's.
        """
        image = np.asarray(image, dtype=np.float64)
        target = (image.shape[0], image.shape[1])
        feats = self.features(image)
        if method == "cam":
            maps = H.activation_maps(feats, self.vanilla)
            return H.cam_explanation(maps, class_index, target)
        if method == "cape":
            maps = H.activation_maps(feats, self.cape)
            contrib = H.voxel_contributions(maps, self._cape_temp(temperature))
            return H.cape_explanation(contrib, class_index, target)
        if method == "mu-cape":
            maps = H.activation_maps(feats, self.cape)
            return H.mu_cape_explanation(maps, class_index, target)
        raise ValueError(f"unknown explanation method: {method!r}")


def init_model(
    seed: int,
    num_classes: int,
    layers: tuple[LayerSpec, ...] | None = None,
    input_size: int | None = None,
    temperature: float = 1.0,
    head_scale: float = 0.3,
    saliency_prior: float = 0.1,
) -> CapeModel:
    """Fresh model: Glorot backbone, structured-noise heads, zero biases.

    Both heads start from the same draw so the ensemble head begins as an
    exact reparameterization of the vanilla one. The head scale matters
    for end-to-end training — feature gradients are proportional to the
    head weights, so a near-zero head starves the conv stack — while an
    oversized head saturates the per-cell class logits.

    The draw is structured: the class-common component of each weight row
    (its mean across classes) is replaced by the constant
    `saliency_prior`. Softmax over classes cancels class-common logit
    shifts, so this component never receives gradient from any prediction
    loss and would otherwise stay frozen random noise. It is exactly what
    the ensemble head's spatial weighting reads (the class-mean cell
    logit), so the replacement turns arbitrary spatial-attention noise
    into a clean prior: cell saliency grows with total feature
    activation. Classifier predictions are provably unaffected.
    """
    if layers is None:
        layers = DEFAULT_ARCHITECTURE
    if input_size is None:
        input_size = DEFAULT_INPUT_SIZE
    backbone = glorot_backbone(seed, layers, input_size)
    k = backbone.feature_channels
    rng = np.random.default_rng(seed + 1)
    w = rng.normal(0.0, head_scale, size=(k, num_classes))
    w += saliency_prior - w.mean(axis=1, keepdims=True)
    b = np.zeros(num_classes)
    vanilla = H.VanillaHead(w.copy(), b.copy(), temperature)
    cape = H.CapeHead(w.copy(), b.copy(), float(np.log(temperature)))
    return CapeModel(backbone, vanilla, cape)


def save_model(model: CapeModel, directory: str | Path) -> Path:
    """Write a checkpoint directory: tensor files plus manifest.json."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    backbone_manifest = save_backbone(model.backbone, directory)
    save_cpt1(directory / "vanilla_weights.cpt1", model.vanilla.weights)
    save_cpt1(directory / "vanilla_bias.cpt1", model.vanilla.bias)
    save_cpt1(directory / "cape_weights.cpt1", model.cape.weights)
    save_cpt1(directory / "cape_bias.cpt1", model.cape.bias)
    manifest = {
        "format": CHECKPOINT_FORMAT,
        "backbone": backbone_manifest,
        "vanilla": {"temperature": model.vanilla.temperature},
        "cape": {"log_temperature": float(model.cape.log_temperature)},
        "num_classes": model.num_classes,
        "pretrained": model.pretrained,
    }
    path = directory / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return path


def batch_features(model: CapeModel, images: np.ndarray, chunk: int = 256) -> np.ndarray:
    """Backbone features for an (n, h, w, c) image stack, chunked for memory."""
    images = np.asarray(images, dtype=np.float64)
    parts = []
    for start in range(0, images.shape[0], chunk):
        feats, _ = forward_batch(images[start : start + chunk], model.backbone)
        parts.append(feats)
    k = model.backbone.feature_channels
    s = model.backbone.feature_size
    if not parts:
        return np.empty((0, s, s, k))
    return np.concatenate(parts, axis=0)


def batch_predict_vanilla(
    model: CapeModel, images: np.ndarray, temperature: float | None = None, chunk: int = 256
) -> np.ndarray:
    """Vanilla class distributions, one row per image."""
    feats = batch_features(model, images, chunk)
    return H.batch_vanilla_forward(feats, model.vanilla, temperature)


def batch_predict_cape(
    model: CapeModel, images: np.ndarray, temperature: float | None = None, chunk: int = 256
) -> np.ndarray:
    """Ensemble class distributions, one row per image.

    Temperature defaults to the head's learned exp(log_temperature).
    """
    feats = batch_features(model, images, chunk)
    temp = model.cape.temperature if temperature is None else float(temperature)
    return H.batch_cape_forward(H.batch_shifted_maps(feats, model.cape), temp)


def load_model(directory: str | Path) -> CapeModel:
    """Read back a checkpoint written by save_model."""
    directory = Path(directory)
    manifest_path = directory / "manifest.json"
    if not manifest_path.is_file():
        raise FileNotFoundError(f"no checkpoint manifest at {manifest_path}")
    manifest = json.loads(manifest_path.read_text())
    if manifest.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"unrecognized checkpoint format: {manifest.get('format')!r}")
    backbone = load_backbone(manifest["backbone"], directory)
    vanilla = H.VanillaHead(
        load_cpt1(directory / "vanilla_weights.cpt1"),
        load_cpt1(directory / "vanilla_bias.cpt1"),
        float(manifest["vanilla"]["temperature"]),
    )
    cape = H.CapeHead(
        load_cpt1(directory / "cape_weights.cpt1"),
        load_cpt1(directory / "cape_bias.cpt1"),
        float(manifest["cape"]["log_temperature"]),
    )
    return CapeModel(backbone, vanilla, cape, pretrained=bool(manifest.get("pretrained", False)))
