"""Interpretability metric suite for explanation heatmaps.

Metrics follow the masked-confidence protocol: re-run the classifier on
the image multiplied by an explanation map (or its complement) and score
the confidence change. The suite is generic over any predictor callable
image -> class distribution and explainer callable (image, class) -> map
in [0, 1] at image resolution.
"""
from __future__ import annotations

import csv
import json
from collections.abc import Callable, Sequence
from dataclasses import dataclass
from enum import Enum
from importlib import resources
from pathlib import Path

import numpy as np

from .tensor import pearson_corr

__all__ = [
    "MaskMode",
    "Method",
    "EvalRecord",
    "MethodEvaluation",
    "MetricsReport",
    "masked_predict",
    "avg_drop",
    "avg_increase",
    "add_metric",
    "adcc_from_terms",
    "adcc",
    "iou_top2",
    "borda_count",
    "prediction_agreement",
    "mean_confidence",
    "attention_mass_fraction",
    "evaluate_method",
    "build_report",
    "report_to_csv",
    "report_to_json",
    "load_published_rankings",
]

CONFIDENCE_FLOOR = 1e-8
IOU_THRESHOLD = 0.2

METRIC_COLUMNS = ("AD", "IC", "ADD", "ADCC", "mIoU")
HIGHER_BETTER = {"AD": False, "IC": True, "ADD": True, "ADCC": True, "mIoU": False}

Predictor = Callable[[np.ndarray], np.ndarray]
Explainer = Callable[[np.ndarray, int], np.ndarray]


class MaskMode(Enum):
    KEEP = "keep"
    DELETE = "delete"


@dataclass
class Method:
    """A named predictor/explainer pair under evaluation."""

    name: str
    predict: Predictor
    explain: Explainer


def masked_predict(
    predict: Predictor, image: np.ndarray, emap: np.ndarray, class_index: int, mode: MaskMode
) -> float:
    """Class confidence after multiplying the image by the map (KEEP) or
    its complement (DELETE)."""
    image = np.asarray(image, dtype=np.float64)
    emap = np.asarray(emap, dtype=np.float64)
    if emap.shape != image.shape[:2]:
        raise ValueError(f"map resolution {emap.shape} != image {image.shape[:2]}")
    mask = emap if mode == MaskMode.KEEP else 1.0 - emap
    probs = predict(image * mask[:, :, None])
    return float(probs[class_index])


def avg_drop(y: float, o: float) -> float:
    """Relative confidence drop max(y - o, 0) / y."""
    if y <= 0:
        raise ValueError(f"original confidence must be positive, got {y}")
    return max(y - o, 0.0) / y


def avg_increase(y: float, o: float) -> float:
    """1 when confidence rises under the explanation mask, else 0."""
    return 1.0 if y < o else 0.0


def add_metric(y: float, d: float) -> float:
    """Relative drop after deleting the explained evidence."""
    if y <= 0:
        raise ValueError(f"original confidence must be positive, got {y}")
    return max(y - d, 0.0) / y


def adcc_from_terms(ad: float, coh: float, com: float) -> float:
    """Harmonic mean of coherency, 1 - complexity, 1 - drop; any
    nonpositive term collapses the score to 0."""
    terms = (coh, 1.0 - com, 1.0 - ad)
    if any(t <= 0.0 for t in terms):
        return 0.0
    return 3.0 / sum(1.0 / t for t in terms)


def _coherency(
    image: np.ndarray, emap: np.ndarray, class_index: int, explain: Explainer
) -> float:
    """Correlation (min-max normalized to [0, 1]) between the map and the
    map re-explained from the masked image."""
    remap = explain(np.asarray(image, dtype=np.float64) * emap[:, :, None], class_index)
    return (pearson_corr(emap, remap) + 1.0) / 2.0


def adcc(
    image: np.ndarray,
    emap: np.ndarray,
    class_index: int,
    predict: Predictor,
    explain: Explainer,
) -> float:
    """Average-drop / coherency / complexity composite for one image."""
    emap = np.asarray(emap, dtype=np.float64)
    y = float(predict(np.asarray(image, dtype=np.float64))[class_index])
    if y <= CONFIDENCE_FLOOR:
        raise ValueError(f"original confidence {y} too small to score")
    o = masked_predict(predict, image, emap, class_index, MaskMode.KEEP)
    ad = avg_drop(y, o)
    coh = _coherency(image, emap, class_index, explain)
    com = float(emap.mean())
    return adcc_from_terms(ad, coh, com)


def iou_top2(emap_a: np.ndarray, emap_b: np.ndarray, threshold: float = IOU_THRESHOLD) -> float:
    """Overlap of the above-threshold supports of two maps.

    Supports are value > threshold * max(map); an empty union scores 0.
    """
    a = np.asarray(emap_a, dtype=np.float64)
    b = np.asarray(emap_b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"map shapes differ: {a.shape} vs {b.shape}")
    sa = a > threshold * a.max()
    sb = b > threshold * b.max()
    union = np.logical_or(sa, sb).sum()
    if union == 0:
        return 0.0
    return float(np.logical_and(sa, sb).sum() / union)


def borda_count(scores: np.ndarray, higher_better: Sequence[bool]) -> np.ndarray:
    """Rank-aggregation points over a (methods x metrics) score table.

    Per metric, 1st/2nd/3rd place earn 3/2/1 points; ties share the
    better rank (competition ranking), pushing later ranks down.
    """
    scores = np.asarray(scores, dtype=np.float64)
    if scores.ndim != 2 or scores.shape[0] == 0:
        raise ValueError(f"expected a nonempty (methods, metrics) table, got {scores.shape}")
    if scores.shape[1] != len(higher_better):
        raise ValueError("one orientation flag required per metric column")
    points = np.zeros(scores.shape[0], dtype=np.int64)
    award = {1: 3, 2: 2, 3: 1}
    for col, higher in zip(scores.T, higher_better):
        for m, value in enumerate(col):
            better = (col > value).sum() if higher else (col < value).sum()
            points[m] += award.get(int(better) + 1, 0)
    return points


def prediction_agreement(
    predict_a: Predictor, predict_b: Predictor, images: np.ndarray
) -> float:
    """Percentage of images where the two predictors pick the same class."""
    images = np.asarray(images, dtype=np.float64)
    if images.shape[0] == 0:
        raise ValueError("empty image stack")
    same = [
        int(np.argmax(predict_a(img)) == np.argmax(predict_b(img))) for img in images
    ]
    return 100.0 * float(np.mean(same))


def mean_confidence(predict: Predictor, images: np.ndarray) -> float:
    """Mean top-1 probability over a stack, as a percentage."""
    images = np.asarray(images, dtype=np.float64)
    if images.shape[0] == 0:
        raise ValueError("empty image stack")
    return 100.0 * float(np.mean([np.max(predict(img)) for img in images]))


def attention_mass_fraction(emap: np.ndarray, region_mask: np.ndarray) -> float:
    """Fraction of a map's total mass lying inside a boolean region."""
    emap = np.asarray(emap, dtype=np.float64)
    region_mask = np.asarray(region_mask, dtype=bool)
    if emap.shape != region_mask.shape:
        raise ValueError(f"shapes differ: {emap.shape} vs {region_mask.shape}")
    total = emap.sum()
    if total <= 0:
        return 0.0
    return float(emap[region_mask].sum() / total)


@dataclass
class EvalRecord:
    """Per-image metric terms for one method.

    `excluded` marks confidences too small for the ratio metrics; such
    records keep IC and IoU but drop out of the AD/ADD/ADCC means.
    """

    index: int
    target_class: int
    y: float
    o: float
    d: float
    ad: float
    ic: float
    add: float
    coh: float
    com: float
    adcc: float
    iou: float
    excluded: bool


@dataclass
class MethodEvaluation:
    """Dataset-level means for one method, on the 0-100 scale."""

    method: str
    mean_ad: float
    ic: float
    mean_add: float
    mean_adcc: float
    miou: float
    image_count: int
    excluded_count: int
    records: list[EvalRecord]
    borda: int | None = None

    def metric_row(self) -> list[float]:
        return [self.mean_ad, self.ic, self.mean_add, self.mean_adcc, self.miou]


@dataclass
class MetricsReport:
    dataset_id: str
    image_count: int
    rows: list[MethodEvaluation]


def evaluate_method(method: Method, images: np.ndarray) -> MethodEvaluation:
    """Score every image: mask-confidence metrics against the method's own
    prediction's top class, plus top-2 explanation overlap."""
    images = np.asarray(images, dtype=np.float64)
    if images.shape[0] == 0:
        raise ValueError("empty image stack")
    records: list[EvalRecord] = []
    for i, image in enumerate(images):
        probs = method.predict(image)
        c = int(np.argmax(probs))
        y = float(probs[c])
        emap = np.asarray(method.explain(image, c), dtype=np.float64)
        o = masked_predict(method.predict, image, emap, c, MaskMode.KEEP)
        d = masked_predict(method.predict, image, emap, c, MaskMode.DELETE)
        excluded = y <= CONFIDENCE_FLOOR
        coh = _coherency(image, emap, c, method.explain)
        com = float(emap.mean())
        if excluded:
            ad = add = adcc_val = float("nan")
        else:
            ad = avg_drop(y, o)
            add = add_metric(y, d)
            adcc_val = adcc_from_terms(ad, coh, com)
        positive = np.flatnonzero(probs > 0.0)
        if positive.size >= 2:
            second = int(positive[np.argsort(probs[positive])[-2]])
            iou = iou_top2(emap, np.asarray(method.explain(image, second), dtype=np.float64))
        else:
            iou = float("nan")
        records.append(
            EvalRecord(
                i, c, y, o, d, ad, avg_increase(y, o), add, coh, com, adcc_val, iou, excluded
            )
        )

    kept = [r for r in records if not r.excluded]
    ious = [r.iou for r in records if not np.isnan(r.iou)]

    def mean_over(values: list[float]) -> float:
        return 100.0 * float(np.mean(values)) if values else float("nan")

    return MethodEvaluation(
        method=method.name,
        mean_ad=mean_over([r.ad for r in kept]),
        ic=mean_over([r.ic for r in records]),
        mean_add=mean_over([r.add for r in kept]),
        mean_adcc=mean_over([r.adcc for r in kept]),
        miou=mean_over(ious),
        image_count=len(records),
        excluded_count=len(records) - len(kept),
        records=records,
    )


def build_report(dataset_id: str, evaluations: list[MethodEvaluation]) -> MetricsReport:
    """Attach rank-aggregation points across the evaluated methods."""
    if not evaluations:
        raise ValueError("no method evaluations to report")
    table = np.array([e.metric_row() for e in evaluations])
    points = borda_count(table, [HIGHER_BETTER[m] for m in METRIC_COLUMNS])
    for evaluation, bc in zip(evaluations, points):
        evaluation.borda = int(bc)
    return MetricsReport(dataset_id, evaluations[0].image_count, list(evaluations))


def report_to_csv(report: MetricsReport, path) -> None:
    with Path(path).open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["Method", *METRIC_COLUMNS, "BC"])
        for row in report.rows:
            writer.writerow(
                [row.method]
                + [repr(float(v)) for v in row.metric_row()]
                + [row.borda if row.borda is not None else 0]
            )


def report_to_json(report: MetricsReport, path) -> None:
    payload = {
        "dataset_id": report.dataset_id,
        "image_count": report.image_count,
        "methods": [
            {
                "method": row.method,
                "AD": row.mean_ad,
                "IC": row.ic,
                "ADD": row.mean_add,
                "ADCC": row.mean_adcc,
                "mIoU": row.miou,
                "BC": row.borda,
                "excluded": row.excluded_count,
            }
            for row in report.rows
        ],
    }
    Path(path).write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")


def load_published_rankings() -> dict:
    """Reference metric table shipped with the package: per-dataset method
    scores in the (AD, IC, ADD, ADCC, mIoU) layout plus the expected
    rank-aggregation points, for validating borda_count."""
    text = (resources.files("cape") / "data" / "published_rankings.json").read_text()
    return json.loads(text)
