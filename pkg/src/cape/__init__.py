"""CAPE: a classifier head whose prediction decomposes, exactly, into
per-image-region probability contributions.

The vanilla softmax classifier and its class activation maps are
reformulated as an ensemble: each spatial cell of the feature grid emits
a class distribution, a spatial softmax assigns each cell a saliency
weight, and the model prediction is their weighted average. Every
(region, class) cell then carries an absolute share of the predicted
probability, enabling exact between-class difference accounting. The
package adds bootstrap distillation training of that head, a toy
hand-differentiated conv backbone, a synthetic dataset with ground-truth
region masks, the standard heatmap metric suite, and a CLI.
"""
from .backbone import (
    DEFAULT_ARCHITECTURE,
    DEFAULT_INPUT_SIZE,
    BackboneParams,
    LayerSpec,
    backbone_backward,
    backbone_forward,
    fixed_random_backbone,
    glorot_backbone,
)
from .heads import (
    ActivationMaps,
    CapeHead,
    ContributionForm,
    ExplanationMap,
    VanillaHead,
    VoxelContribution,
    activation_maps,
    cam_explanation,
    cape_explanation,
    cape_forward,
    class_difference_map,
    mu_cape_explanation,
    naive_aggregate,
    non_additivity_witness,
    pixel_class_dist,
    saliency_weights,
    thresholded_contribution_summary,
    vanilla_forward,
    voxel_contributions,
)
from .metrics import (
    Method,
    MetricsReport,
    adcc,
    adcc_from_terms,
    add_metric,
    avg_drop,
    avg_increase,
    borda_count,
    build_report,
    evaluate_method,
    iou_top2,
    masked_predict,
    mean_confidence,
    prediction_agreement,
)
from .model import CapeModel, init_model, load_model, save_model
from .synth import SynthSpec, generate, load_split, save_dataset
from .tensor import (
    bilinear_upsample,
    load_cpt1,
    minmax_normalize,
    pearson_corr,
    rectify,
    save_cpt1,
    softmax_axis,
)
from .training import (
    GradCheckReport,
    LossBreakdown,
    Schedule,
    TrainConfig,
    TrainResult,
    bootstrap_loss,
    calibrate_cape_temperature,
    cross_entropy,
    grad_check,
    kld,
    sgd_step,
    train,
)

__version__ = "0.1.0"

__all__ = [
    "ActivationMaps",
    "BackboneParams",
    "CapeHead",
    "CapeModel",
    "ContributionForm",
    "DEFAULT_ARCHITECTURE",
    "DEFAULT_INPUT_SIZE",
    "ExplanationMap",
    "GradCheckReport",
    "LayerSpec",
    "LossBreakdown",
    "Method",
    "MetricsReport",
    "Schedule",
    "SynthSpec",
    "TrainConfig",
    "TrainResult",
    "VanillaHead",
    "VoxelContribution",
    "activation_maps",
    "adcc",
    "adcc_from_terms",
    "add_metric",
    "avg_drop",
    "avg_increase",
    "backbone_backward",
    "backbone_forward",
    "bilinear_upsample",
    "bootstrap_loss",
    "borda_count",
    "build_report",
    "calibrate_cape_temperature",
    "cam_explanation",
    "cape_explanation",
    "cape_forward",
    "class_difference_map",
    "cross_entropy",
    "evaluate_method",
    "fixed_random_backbone",
    "generate",
    "glorot_backbone",
    "grad_check",
    "init_model",
    "iou_top2",
    "kld",
    "load_cpt1",
    "load_model",
    "load_split",
    "masked_predict",
    "mean_confidence",
    "minmax_normalize",
    "mu_cape_explanation",
    "naive_aggregate",
    "non_additivity_witness",
    "pearson_corr",
    "pixel_class_dist",
    "prediction_agreement",
    "rectify",
    "save_cpt1",
    "save_dataset",
    "save_model",
    "sgd_step",
    "softmax_axis",
    "thresholded_contribution_summary",
    "train",
    "vanilla_forward",
    "voxel_contributions",
]
