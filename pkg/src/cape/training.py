"""Bootstrap distillation training of the ensemble head.

The loss is alpha * cross-entropy + beta * KL divergence between the
temperature-softened vanilla output (teacher, held constant) and the
temperature-softened ensemble output (student). Two regimes:

* TS (training from scratch): the cross-entropy term drives the backbone
  and the vanilla head; the divergence term trains only the ensemble
  head, with features treated as constants on that path.
* PF (post-fitting): backbone and vanilla head are frozen; only the
  ensemble head learns (alpha = 0, beta = 1).

All gradients are hand-derived; grad_check verifies them against central
finite differences.
"""
from __future__ import annotations

import csv
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .backbone import backward_batch, forward_batch
from .heads import batch_shifted_maps
from .model import CapeModel, batch_features
from .tensor import softmax_axis

__all__ = [
    "Schedule",
    "TrainConfig",
    "LossBreakdown",
    "Gradients",
    "EpochStats",
    "TrainResult",
    "GradEntryReport",
    "GradCheckReport",
    "cross_entropy",
    "kld",
    "bootstrap_loss",
    "sgd_step",
    "apply_gradients",
    "train",
    "write_epoch_log",
    "read_epoch_log",
    "model_accuracies",
    "calibrate_cape_temperature",
    "grad_check",
]

TINY = 1e-12

# Training images used to calibrate the ensemble temperature at init.
CALIBRATION_SAMPLE = 512

EPOCH_LOG_COLUMNS = (
    "epoch",
    "lr",
    "ce",
    "kld",
    "kld_active_fraction",
    "vanilla_train_acc",
    "cape_train_acc",
    "vanilla_val_acc",
    "cape_val_acc",
)


@dataclass(frozen=True)
class Schedule:
    """Learning-rate schedule: STEP (decay every `period` epochs) or
    LINEAR (ramp to final_fraction of the base rate by the last epoch)."""

    kind: str = "step"
    decay: float = 0.1
    period: int = 1_000_000
    final_fraction: float = 1.0

    def __post_init__(self):
        if self.kind not in ("step", "linear"):
            raise ValueError(f"unknown schedule kind: {self.kind!r}")
        if self.period < 1 or not self.decay > 0 or not self.final_fraction > 0:
            raise ValueError("schedule parameters must be positive")

    @classmethod
    def step(cls, decay: float = 0.1, period: int = 1_000_000) -> "Schedule":
        return cls("step", decay=decay, period=period)

    @classmethod
    def linear(cls, final_fraction: float = 0.1) -> "Schedule":
        return cls("linear", final_fraction=final_fraction)

    def scale_at(self, epoch: int, total_epochs: int) -> float:
        if self.kind == "step":
            return float(self.decay ** (epoch // self.period))
        if total_epochs <= 1:
            return 1.0
        frac = epoch / (total_epochs - 1)
        return float(1.0 + (self.final_fraction - 1.0) * frac)


@dataclass
class TrainConfig:
    """Hyperparameters and loss routing for one training run.

    TS requires alpha = 1 and beta = 1 (beta may drop to 0 only together
    with ce_on_cape, which scores the cross-entropy on the ensemble
    output instead of the vanilla one). PF requires alpha = 0 and
    beta = 1; beta = 0 is tolerated with a warning since it makes every
    gradient zero.
    """

    mode: str
    alpha: float
    beta: float
    learning_rate: float
    epochs: int
    batch_size: int = 32
    weight_decay: float = 0.0
    teacher_temperature: float = 2.0
    selective_kld: bool = True
    ce_on_cape: bool = False
    kld_reverse: bool = False
    kld_t2_rescale: bool = False
    init_cape_from_vanilla: bool = True
    schedule: Schedule = field(default_factory=Schedule)
    seed: int = 0

    def __post_init__(self):
        self.mode = self.mode.lower()
        if self.mode not in ("ts", "pf"):
            raise ValueError(f"mode must be 'ts' or 'pf', got {self.mode!r}")
        if self.alpha < 0 or self.beta < 0:
            raise ValueError("loss weights must be nonnegative")
        if self.mode == "ts":
            if self.alpha != 1.0:
                raise ValueError("TS mode requires alpha = 1")
            if self.ce_on_cape:
                if self.beta not in (0.0, 1.0):
                    raise ValueError("TS with ce_on_cape requires beta in {0, 1}")
            elif self.beta != 1.0:
                raise ValueError("TS mode requires beta = 1")
        else:
            if self.alpha != 0.0:
                raise ValueError("PF mode requires alpha = 0")
            if self.beta == 0.0:
                warnings.warn("PF with beta = 0 produces zero gradients everywhere")
            elif self.beta != 1.0:
                raise ValueError("PF mode requires beta = 1")
        if not self.learning_rate > 0:
            raise ValueError("learning rate must be positive")
        if self.epochs < 0 or self.batch_size < 1:
            raise ValueError("epochs must be >= 0 and batch size >= 1")
        if self.weight_decay < 0:
            raise ValueError("weight decay must be nonnegative")
        if not self.teacher_temperature > 0:
            raise ValueError("teacher temperature must be positive")

    @classmethod
    def ts(cls, **overrides) -> "TrainConfig":
        base = dict(
            mode="ts",
            alpha=1.0,
            beta=1.0,
            learning_rate=1e-3,
            epochs=30,
            schedule=Schedule.step(period=20),
        )
        base.update(overrides)
        return cls(**base)

    @classmethod
    def pf(cls, **overrides) -> "TrainConfig":
        base = dict(mode="pf", alpha=0.0, beta=1.0, learning_rate=1e-4, epochs=10)
        base.update(overrides)
        return cls(**base)


@dataclass
class LossBreakdown:
    """Batch-mean loss terms; total = alpha*ce + beta*kld, with the
    selective mask already folded into the kld term."""

    ce_term: float
    kld_term: float
    total: float
    kld_active_fraction: float


@dataclass
class Gradients:
    """Mean-loss gradients; None marks a parameter group the loss does
    not reach under the active routing."""

    cape_weights: np.ndarray
    cape_bias: np.ndarray
    cape_log_temperature: float
    vanilla_weights: np.ndarray | None = None
    vanilla_bias: np.ndarray | None = None
    backbone: list[tuple[np.ndarray, np.ndarray]] | None = None


def cross_entropy(probs: np.ndarray, target) -> float:
    """-log of the probability the distribution assigns to the target.

    `target` is a class index or a one-hot vector over the same classes.
    """
    probs = np.asarray(probs, dtype=np.float64)
    if probs.ndim != 1:
        raise ValueError(f"expected a single distribution, got shape {probs.shape}")
    if np.isscalar(target) or getattr(target, "ndim", None) == 0:
        idx = int(target)
        if not 0 <= idx < probs.shape[0]:
            raise ValueError(f"class {idx} out of range")
    else:
        onehot = np.asarray(target, dtype=np.float64)
        if onehot.shape != probs.shape:
            raise ValueError(f"target shape {onehot.shape} != {probs.shape}")
        ones = np.flatnonzero(onehot == 1.0)
        if ones.size != 1 or not np.all((onehot == 0.0) | (onehot == 1.0)):
            raise ValueError("target must be one-hot")
        idx = int(ones[0])
    return float(-np.log(max(probs[idx], TINY)))


def kld(target: np.ndarray, approx: np.ndarray) -> float:
    """Kullback-Leibler divergence D(target || approx) with 1e-12 clamps;
    zero target entries contribute nothing."""
    target = np.asarray(target, dtype=np.float64)
    approx = np.asarray(approx, dtype=np.float64)
    if target.shape != approx.shape:
        raise ValueError(f"shape mismatch: {target.shape} vs {approx.shape}")
    return float(_kld_rows(target[None], approx[None])[0])


def _kld_rows(target: np.ndarray, approx: np.ndarray) -> np.ndarray:
    """Row-wise divergence for (n, classes) stacks."""
    logs = np.log(np.maximum(target, TINY)) - np.log(np.maximum(approx, TINY))
    return np.where(target > TINY, target * logs, 0.0).sum(axis=-1)


def _cape_soft_forward(maps: np.ndarray, temperature: float):
    """Student forward pass keeping the intermediates needed by backward.

    maps: (n, h, w, classes) bias-shifted activation maps.
    Returns (probs, cache) with cache = (u, A, v, w):
    u class logits, A per-pixel class softmax, v saliency logits,
    w spatial softmax.
    """
    u = maps / temperature
    a = softmax_axis(u, axes=3)
    v = maps.mean(axis=3) / temperature
    w = softmax_axis(v, axes=(1, 2))
    probs = np.einsum("nijc,nij->nc", a, w)
    return probs, (u, a, v, w)


def _cape_backward(
    dprobs: np.ndarray,
    cache,
    features: np.ndarray,
    weights: np.ndarray,
    temperature: float,
):
    """Chain dLoss/dprobs back to head parameters and features.

    Returns (dweights, dbias, dlog_temperature, dfeatures); the
    log-temperature gradient assumes temperature = exp(log_temperature)
    and must be ignored when the temperature was fixed.
    """
    u, a, v, w = cache
    c = a.shape[3]
    gbar = np.einsum("nijc,nc->nij", a, dprobs)
    du = w[..., None] * a * (dprobs[:, None, None, :] - gbar[..., None])
    hbar = np.einsum("nij,nij->n", w, gbar)
    dv = w * (gbar - hbar[:, None, None])
    dmaps = (du + dv[..., None] / c) / temperature
    dlog_t = -(float(np.sum(du * u)) + float(np.sum(dv * v)))
    dweights = np.einsum("nijk,nijc->kc", features, dmaps)
    dbias = dmaps.sum(axis=(0, 1, 2))
    dfeatures = np.einsum("nijc,kc->nijk", dmaps, weights)
    return dweights, dbias, dlog_t, dfeatures


def bootstrap_loss(
    model: CapeModel,
    images: np.ndarray | None,
    labels: np.ndarray,
    config: TrainConfig,
    features: np.ndarray | None = None,
    teacher_probs: np.ndarray | None = None,
    with_grads: bool = True,
) -> tuple[LossBreakdown, Gradients | None]:
    """Distillation loss over one batch, with routed gradients.

    The divergence term reaches only the ensemble head (features are
    constants on that path, the teacher always is). The cross-entropy
    term drives the vanilla head and, in TS mode, the backbone; with
    ce_on_cape it drives the ensemble head and backbone instead.
    Precomputed `features` (PF fast path) skip the backbone forward and
    disable backbone gradients.
    """
    labels = np.asarray(labels)
    n = labels.shape[0]
    if n == 0:
        raise ValueError("empty batch")
    tape = None
    if features is None:
        features, tape = forward_batch(np.asarray(images, dtype=np.float64), model.backbone)
    num_classes = model.num_classes
    onehot = np.eye(num_classes)[labels]

    pooled = features.mean(axis=(1, 2))
    logits = pooled @ model.vanilla.weights + model.vanilla.bias
    vanilla_probs = softmax_axis(logits, axes=1, temperature=model.vanilla.temperature)
    if teacher_probs is None:
        teacher_probs = softmax_axis(logits, axes=1, temperature=config.teacher_temperature)

    maps = batch_shifted_maps(features, model.cape)
    t_student = model.cape.temperature
    student_probs, student_cache = _cape_soft_forward(maps, t_student)

    if config.selective_kld:
        # The ensemble head predicts at its own learned temperature, so
        # the disagreement gate compares that prediction with the
        # vanilla argmax.
        indicator = (student_probs.argmax(axis=1) != logits.argmax(axis=1)).astype(
            np.float64
        )
    else:
        indicator = np.ones(n)

    rescale = config.teacher_temperature**2 if config.kld_t2_rescale else 1.0
    if config.kld_reverse:
        klds = _kld_rows(student_probs, teacher_probs)
    else:
        klds = _kld_rows(teacher_probs, student_probs)
    kld_term = float((indicator * klds).mean()) * rescale

    if config.ce_on_cape:
        ce_probs = student_probs
    else:
        ce_probs = vanilla_probs
    picked = np.maximum(ce_probs[np.arange(n), labels], TINY)
    ce_term = float(-np.log(picked).mean())

    total = config.alpha * ce_term + config.beta * kld_term
    breakdown = LossBreakdown(ce_term, kld_term, total, float(indicator.mean()))
    if not with_grads:
        return breakdown, None

    dcape_w = np.zeros_like(model.cape.weights)
    dcape_b = np.zeros_like(model.cape.bias)
    dcape_logt = 0.0
    dfeat_total = None

    if config.beta > 0:
        scale = config.beta * rescale / n
        if config.kld_reverse:
            dp = (
                np.log(np.maximum(student_probs, TINY))
                + 1.0
                - np.log(np.maximum(teacher_probs, TINY))
            )
        else:
            dp = -teacher_probs / np.maximum(student_probs, TINY)
        dp = scale * indicator[:, None] * dp
        dw, db, dlogt, _ = _cape_backward(
            dp, student_cache, features, model.cape.weights, t_student
        )
        dcape_w += dw
        dcape_b += db
        dcape_logt += dlogt

    dvan_w = dvan_b = None
    if config.alpha > 0:
        if config.ce_on_cape:
            dp = np.zeros_like(student_probs)
            rows = np.arange(n)
            dp[rows, labels] = -config.alpha / (
                n * np.maximum(student_probs[rows, labels], TINY)
            )
            dw, db, dlogt, dfeat = _cape_backward(
                dp, student_cache, features, model.cape.weights, t_student
            )
            dcape_w += dw
            dcape_b += db
            dcape_logt += dlogt
            dfeat_total = dfeat
        else:
            dlogits = (
                config.alpha / n * (vanilla_probs - onehot) / model.vanilla.temperature
            )
            dvan_w = np.einsum("nk,nc->kc", pooled, dlogits)
            dvan_b = dlogits.sum(axis=0)
            h, w = features.shape[1], features.shape[2]
            dpooled = dlogits @ model.vanilla.weights.T / (h * w)
            dfeat_total = np.broadcast_to(dpooled[:, None, None, :], features.shape)

    backbone_grads = None
    if config.mode == "ts" and tape is not None and dfeat_total is not None:
        grads_list, _ = backward_batch(tape, model.backbone, dfeat_total)
        backbone_grads = grads_list or None

    return breakdown, Gradients(dcape_w, dcape_b, dcape_logt, dvan_w, dvan_b, backbone_grads)


def sgd_step(param: np.ndarray, grad: np.ndarray, lr: float, weight_decay: float = 0.0):
    """One decoupled-free SGD update: p - lr * (g + weight_decay * p)."""
    param = np.asarray(param, dtype=np.float64)
    grad = np.asarray(grad, dtype=np.float64)
    if param.shape != grad.shape:
        raise ValueError(f"shape mismatch: param {param.shape}, grad {grad.shape}")
    return param - lr * (grad + weight_decay * param)


def apply_gradients(model: CapeModel, grads: Gradients, lr: float, weight_decay: float = 0.0):
    """SGD-update every parameter group present in `grads`.

    The log-temperature never receives weight decay (decaying it would
    pull the temperature toward 1 for no reason).
    """
    model.cape.weights = sgd_step(model.cape.weights, grads.cape_weights, lr, weight_decay)
    model.cape.bias = sgd_step(model.cape.bias, grads.cape_bias, lr, weight_decay)
    model.cape.log_temperature = float(
        model.cape.log_temperature - lr * grads.cape_log_temperature
    )
    if grads.vanilla_weights is not None:
        model.vanilla.weights = sgd_step(
            model.vanilla.weights, grads.vanilla_weights, lr, weight_decay
        )
        model.vanilla.bias = sgd_step(model.vanilla.bias, grads.vanilla_bias, lr, weight_decay)
    if grads.backbone:
        params = model.backbone
        for i, (dw, db) in enumerate(grads.backbone):
            params.weights[i] = sgd_step(params.weights[i], dw, lr, weight_decay)
            params.biases[i] = sgd_step(params.biases[i], db, lr, weight_decay)


@dataclass
class EpochStats:
    """One epoch-log row (accuracies in [0, 1], losses are batch means)."""

    epoch: int
    lr: float
    ce: float
    kld: float
    kld_active_fraction: float
    vanilla_train_acc: float
    cape_train_acc: float
    vanilla_val_acc: float = float("nan")
    cape_val_acc: float = float("nan")


@dataclass
class TrainResult:
    model: CapeModel
    log: list[EpochStats]


def _as_arrays(data) -> tuple[np.ndarray, np.ndarray]:
    if isinstance(data, tuple):
        images, labels = data
    else:
        images, labels = data.images, data.labels
    return np.asarray(images, dtype=np.float64), np.asarray(labels, dtype=np.int64)


def _accuracies_from_features(model: CapeModel, features: np.ndarray, labels: np.ndarray):
    from .heads import batch_cape_forward, batch_vanilla_forward

    vanilla = batch_vanilla_forward(features, model.vanilla)
    cape = batch_cape_forward(
        batch_shifted_maps(features, model.cape), model.cape.temperature
    )
    return (
        float((vanilla.argmax(axis=1) == labels).mean()),
        float((cape.argmax(axis=1) == labels).mean()),
    )


def model_accuracies(model: CapeModel, images: np.ndarray, labels: np.ndarray, chunk: int = 256):
    """(vanilla accuracy, ensemble accuracy at its learned temperature)."""
    labels = np.asarray(labels)
    features = batch_features(model, images, chunk)
    return _accuracies_from_features(model, features, labels)


def calibrate_cape_temperature(model: CapeModel, features: np.ndarray, grid=None) -> float:
    """Temperature at which the ensemble head best matches the vanilla head.

    The ensemble temperature has no vanilla counterpart to inherit, so it is
    set by calibration: measure argmax agreement between the two heads on the
    given features over a geometric grid of temperatures and return the
    smallest temperature attaining the maximum agreement. Agreement converges
    to 1 as the temperature grows (the first-order expansion of the spatial
    ensemble reduces to the pooled logits), so this picks the least flattening
    that makes the ensemble behave like the classifier it was copied from.
    """
    from .heads import batch_cape_forward, batch_vanilla_forward

    features = np.asarray(features, dtype=np.float64)
    if features.ndim != 4 or features.shape[0] == 0:
        raise ValueError("features must be a nonempty (n, h, w, k) array")
    if grid is None:
        cells = features.shape[1] * features.shape[2]
        grid = np.geomspace(1.0, max(4.0 * cells, 4.0), 49)
    grid = np.asarray(grid, dtype=np.float64)
    if grid.size == 0 or np.any(grid <= 0.0):
        raise ValueError("temperature grid must be nonempty and positive")
    vanilla = batch_vanilla_forward(features, model.vanilla).argmax(axis=1)
    maps = batch_shifted_maps(features, model.cape)
    agreement = [
        float((batch_cape_forward(maps, float(t)).argmax(axis=1) == vanilla).mean())
        for t in grid
    ]
    return float(grid[int(np.argmax(agreement))])


def train(model: CapeModel, train_data, config: TrainConfig, val_data=None) -> TrainResult:
    """Run the configured number of epochs over shuffled minibatches.

    PF mode freezes the backbone and vanilla head, so their features and
    the teacher distribution are computed once and reused. Unless
    config.init_cape_from_vanilla is off, the ensemble head starts from the
    vanilla parameters, with its temperature calibrated for maximum initial
    agreement between the two heads on the training split.
    """
    images, labels = _as_arrays(train_data)
    n = images.shape[0]
    if n == 0:
        raise ValueError("empty training dataset")
    if config.epochs == 0:
        return TrainResult(model, [])
    if config.mode == "pf" and not model.pretrained:
        raise ValueError("PF mode requires a pretrained model (model.pretrained is False)")

    val_arrays = _as_arrays(val_data) if val_data is not None else None
    rng = np.random.default_rng(config.seed)
    pf = config.mode == "pf"
    cached_features = cached_teacher = None
    if pf:
        cached_features = batch_features(model, images)
        logits = cached_features.mean(axis=(1, 2)) @ model.vanilla.weights + model.vanilla.bias
        cached_teacher = softmax_axis(logits, axes=1, temperature=config.teacher_temperature)

    if config.init_cape_from_vanilla:
        model.cape.weights = model.vanilla.weights.copy()
        model.cape.bias = model.vanilla.bias.copy()
        if pf:
            calib = cached_features[:CALIBRATION_SAMPLE]
        else:
            calib = batch_features(model, images[:CALIBRATION_SAMPLE])
        model.cape.log_temperature = float(np.log(calibrate_cape_temperature(model, calib)))

    log: list[EpochStats] = []
    for epoch in range(config.epochs):
        lr = config.learning_rate * config.schedule.scale_at(epoch, config.epochs)
        order = rng.permutation(n)
        ce_sum = kld_sum = active_sum = 0.0
        for start in range(0, n, config.batch_size):
            idx = order[start : start + config.batch_size]
            if pf:
                breakdown, grads = bootstrap_loss(
                    model,
                    None,
                    labels[idx],
                    config,
                    features=cached_features[idx],
                    teacher_probs=cached_teacher[idx],
                )
            else:
                breakdown, grads = bootstrap_loss(model, images[idx], labels[idx], config)
            apply_gradients(model, grads, lr, config.weight_decay)
            ce_sum += breakdown.ce_term * idx.size
            kld_sum += breakdown.kld_term * idx.size
            active_sum += breakdown.kld_active_fraction * idx.size

        if pf:
            train_feats = cached_features
        else:
            train_feats = batch_features(model, images)
        van_acc, cape_acc = _accuracies_from_features(model, train_feats, labels)
        stats = EpochStats(
            epoch=epoch,
            lr=lr,
            ce=ce_sum / n,
            kld=kld_sum / n,
            kld_active_fraction=active_sum / n,
            vanilla_train_acc=van_acc,
            cape_train_acc=cape_acc,
        )
        if val_arrays is not None:
            stats.vanilla_val_acc, stats.cape_val_acc = model_accuracies(
                model, val_arrays[0], val_arrays[1]
            )
        log.append(stats)

    if config.init_cape_from_vanilla and not pf:
        # The scratch-mode teacher evolves during training, so the
        # temperature calibrated against it at epoch 0 is stale. Once the
        # heads agree everywhere the selective divergence is zero at any
        # such temperature, making the smallest agreement-maximizing one
        # the natural deployment choice; re-pick it against the final
        # teacher. Post-fitting keeps its init calibration: that teacher
        # is frozen.
        calib = batch_features(model, images[:CALIBRATION_SAMPLE])
        model.cape.log_temperature = float(np.log(calibrate_cape_temperature(model, calib)))
    return TrainResult(model, log)


def write_epoch_log(path, log: list[EpochStats]) -> None:
    """Epoch log as CSV; floats keep full precision via repr."""
    path = Path(path)
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(EPOCH_LOG_COLUMNS)
        for row in log:
            writer.writerow(
                [row.epoch]
                + [repr(float(getattr(row, name))) for name in EPOCH_LOG_COLUMNS[1:]]
            )


def read_epoch_log(path) -> list[EpochStats]:
    with Path(path).open(newline="") as fh:
        reader = csv.DictReader(fh)
        return [
            EpochStats(
                epoch=int(r["epoch"]),
                **{name: float(r[name]) for name in EPOCH_LOG_COLUMNS[1:]},
            )
            for r in reader
        ]


@dataclass
class GradEntryReport:
    name: str
    checked: int
    max_rel_error: float


@dataclass
class GradCheckReport:
    tolerance: float
    step: float
    entries: list[GradEntryReport]
    max_rel_error: float
    passed: bool


def _rel_error(analytic: float, numeric: float, abs_floor: float = 1e-9) -> float:
    """Relative disagreement, treating differences below the central-
    difference noise floor as exact agreement."""
    diff = abs(analytic - numeric)
    if diff <= abs_floor:
        return 0.0
    return diff / max(abs(analytic), abs(numeric), 1e-6)


def _refined_rel_error(
    write, orig: float, analytic: float, loss, step: float, abs_floor: float,
    refinements: int = 3,
) -> float:
    """Central difference against `analytic`, shrinking the step on demand.

    The loss surface is only piecewise smooth (rectifier kinks, the
    selective-divergence gate): when the symmetric bracket straddles a
    non-smooth point, the difference quotient measures the kink rather
    than the derivative. Such contamination vanishes as the bracket
    shrinks, while a genuinely wrong analytic gradient keeps disagreeing
    at every step, so the smallest disagreement across step sizes is the
    meaningful one.
    """
    best = float("inf")
    h = step
    for _ in range(refinements + 1):
        write(orig + h)
        hi = loss()
        write(orig - h)
        lo = loss()
        write(orig)
        numeric = (hi - lo) / (2 * h)
        best = min(best, _rel_error(analytic, numeric, abs_floor))
        if best == 0.0:
            break
        h /= 10.0
    return best


def grad_check(
    model: CapeModel,
    images: np.ndarray,
    labels: np.ndarray,
    config: TrainConfig,
    tolerance: float = 1e-4,
    step: float = 1e-5,
    max_entries: int = 16,
    seed: int = 0,
    corrupt: str | None = None,
    abs_floor: float = 1e-9,
) -> GradCheckReport:
    """Compare every reachable analytic gradient with central differences.

    Large arrays are spot-checked on `max_entries` seeded random entries.
    `corrupt` names a parameter group whose analytic gradient gets +0.1
    before comparison — a self-test that the harness can fail. Absolute
    differences at or below `abs_floor` count as agreement, since the
    differencing itself carries that much truncation noise. Entries that
    disagree at `step` are re-measured at smaller steps, which clears
    difference quotients contaminated by a rectifier kink inside the
    bracket without masking real gradient errors (those persist at every
    step size).
    """
    images = np.asarray(images, dtype=np.float64)
    labels = np.asarray(labels)
    _, grads = bootstrap_loss(model, images, labels, config)

    def routed_loss(group: str) -> float:
        """The loss component whose gradient reaches this parameter group.

        The divergence term treats the teacher and the features as
        constants, so for vanilla-head and backbone parameters only the
        cross-entropy term is differenced; ensemble-head parameters see
        the full loss.
        """
        breakdown, _ = bootstrap_loss(model, images, labels, config, with_grads=False)
        if group.startswith("cape"):
            return breakdown.total
        return config.alpha * breakdown.ce_term

    targets: list[tuple[str, np.ndarray, np.ndarray]] = [
        ("cape.weights", model.cape.weights, grads.cape_weights),
        ("cape.bias", model.cape.bias, grads.cape_bias),
    ]
    if grads.vanilla_weights is not None:
        targets.append(("vanilla.weights", model.vanilla.weights, grads.vanilla_weights))
        targets.append(("vanilla.bias", model.vanilla.bias, grads.vanilla_bias))
    if grads.backbone:
        for i, (dw, db) in enumerate(grads.backbone):
            targets.append((f"backbone.w{i}", model.backbone.weights[i], dw))
            targets.append((f"backbone.b{i}", model.backbone.biases[i], db))

    rng = np.random.default_rng(seed)
    entries: list[GradEntryReport] = []
    for name, param, analytic in targets:
        analytic = analytic + 0.1 if corrupt == name else analytic
        size = param.size
        if size <= max_entries:
            idxs = np.arange(size)
        else:
            idxs = np.sort(rng.choice(size, size=max_entries, replace=False))
        worst = 0.0
        flat = param.reshape(-1)
        for idx in idxs:

            def write(value, flat=flat, idx=idx):
                flat[idx] = value

            rel = _refined_rel_error(
                write,
                float(flat[idx]),
                float(analytic.reshape(-1)[idx]),
                lambda name=name: routed_loss(name),
                step,
                abs_floor,
            )
            worst = max(worst, rel)
        entries.append(GradEntryReport(name, len(idxs), worst))

    analytic_t = grads.cape_log_temperature + (0.1 if corrupt == "cape.log_temperature" else 0.0)

    def write_t(value):
        model.cape.log_temperature = value

    rel_t = _refined_rel_error(
        write_t,
        model.cape.log_temperature,
        analytic_t,
        lambda: routed_loss("cape.log_temperature"),
        step,
        abs_floor,
    )
    entries.append(GradEntryReport("cape.log_temperature", 1, rel_t))

    worst = max(e.max_rel_error for e in entries)
    return GradCheckReport(tolerance, step, entries, worst, worst <= tolerance)
