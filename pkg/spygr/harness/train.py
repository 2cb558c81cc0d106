"""
Training and evaluation on the synthetic task.

SGD with momentum, L2 weight decay folded into the gradient and a
polynomial learning-rate decay applied every iteration:

    lr(t) = base_lr * (1 - t / total_iters) ** power
    v     = momentum * v + (g + weight_decay * w)
    w     = w - lr * v

The loss is cross entropy on the final logits plus `aux_weight` times cross
entropy on the auxiliary head, both averaged over pixels.
"""

import csv
from dataclasses import dataclass, field, replace
import logging
import math
import os
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from ..core import ops
from ..core.errors import ConfigError, NonFiniteError, TrainingDivergedError
from ..core.layer import project_static_lambda
from ..core.pyramid import PyramidConfig
from ..core.tensor import Tape, Tensor
from .dataset import SyntheticSample, generate_dataset, stack_images, stack_labels
from .model import AblationSpec, SegModel, SegModelConfig, forward, init_model

logger = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    """
    Optimizer schedule, data and model knobs for one training run.

    Schedule defaults follow the reference segmentation recipe; the data
    and width defaults are sized for a CPU run of a few minutes.
    """
    base_lr: float = 0.009
    power: float = 0.9
    momentum: float = 0.9
    weight_decay: float = 1e-4
    aux_weight: float = 0.4
    total_iters: int = 2000
    batch: int = 4
    ablation: AblationSpec = field(default_factory=AblationSpec)
    seed: int = 0
    height: int = 64
    width: int = 64
    num_classes: int = 5
    train_samples: int = 2000
    test_samples: int = 500
    widths: Tuple[int, ...] = (8, 16, 16, 16)
    reduce_channels: int = 16
    embed_dim: int = 8
    eval_every: int = 0
    log_every: int = 100

    def __post_init__(self):
        if not 0.0 <= self.aux_weight <= 1.0:
            raise ConfigError("aux_weight", f"must be in [0, 1], got {self.aux_weight}")
        if self.total_iters < 1:
            raise ConfigError("total_iters", f"must be >= 1, got {self.total_iters}")
        if self.batch < 1:
            raise ConfigError("batch", f"must be >= 1, got {self.batch}")
        if self.base_lr <= 0 or self.power <= 0:
            raise ConfigError("base_lr", "base_lr and power must be positive")
        if not 0.0 <= self.momentum < 1.0:
            raise ConfigError("momentum", f"must be in [0, 1), got {self.momentum}")
        if self.weight_decay < 0:
            raise ConfigError("weight_decay", "must be non-negative")
        if self.eval_every < 0:
            raise ConfigError("eval_every", "must be non-negative")
        self.widths = tuple(self.widths)

    def model_config(self) -> SegModelConfig:
        return SegModelConfig(
            widths=self.widths,
            reduce_channels=self.reduce_channels,
            embed_dim=self.embed_dim,
            num_classes=self.num_classes,
            ablation=self.ablation,
        )

    def to_dict(self) -> Dict:
        return {
            "base_lr": self.base_lr,
            "power": self.power,
            "momentum": self.momentum,
            "weight_decay": self.weight_decay,
            "aux_weight": self.aux_weight,
            "total_iters": self.total_iters,
            "batch": self.batch,
            "ablation": self.ablation.row.value,
            "pyramid_levels": self.ablation.pyramid_levels,
            "seed": self.seed,
            "height": self.height,
            "width": self.width,
            "num_classes": self.num_classes,
            "train_samples": self.train_samples,
            "test_samples": self.test_samples,
            "widths": list(self.widths),
            "reduce_channels": self.reduce_channels,
            "embed_dim": self.embed_dim,
            "eval_every": self.eval_every,
            "log_every": self.log_every,
        }

    @classmethod
    def from_dict(cls, data: Dict) -> "TrainConfig":
        """Inverse of `to_dict`; missing keys keep their defaults."""
        known = {f for f in cls.__dataclass_fields__ if f != "ablation"}
        values = {k: v for k, v in data.items() if k in known}
        if "widths" in values:
            values["widths"] = tuple(int(w) for w in values["widths"])
        levels = int(data.get("pyramid_levels", 4))
        row = data.get("ablation", AblationSpec().row.value)
        values["ablation"] = row if isinstance(row, AblationSpec) else AblationSpec.parse(str(row), levels)
        return cls(**values)


def poly_lr(iteration: int, config: TrainConfig) -> float:
    """base_lr * (1 - iteration / total_iters) ** power for 0 <= iteration <= total_iters."""
    if not 0 <= iteration <= config.total_iters:
        raise ConfigError("iteration", f"{iteration} outside [0, {config.total_iters}]")
    return config.base_lr * (1.0 - iteration / config.total_iters) ** config.power


# =============================================================================
# Loss
# =============================================================================

def loss_components(
    final_logits: Tensor,
    aux_logits: Tensor,
    labels: np.ndarray,
    aux_weight: float = 0.4,
) -> Tuple[Tensor, Tensor, Tensor]:
    """(total, final cross entropy, auxiliary cross entropy)."""
    if not 0.0 <= aux_weight <= 1.0:
        raise ConfigError("aux_weight", f"must be in [0, 1], got {aux_weight}")
    main = ops.cross_entropy(final_logits, labels)
    aux = ops.cross_entropy(aux_logits, labels)
    if aux_weight == 0.0:
        return main, main, aux
    return ops.add(main, ops.scale(aux, aux_weight)), main, aux


def loss(final_logits: Tensor, aux_logits: Tensor, labels: np.ndarray, aux_weight: float = 0.4) -> Tensor:
    """CE(final) + aux_weight * CE(aux); logits must already match the label grid."""
    return loss_components(final_logits, aux_logits, labels, aux_weight)[0]


# =============================================================================
# Metrics
# =============================================================================

def confusion_matrix(predictions: np.ndarray, labels: np.ndarray, num_classes: int) -> np.ndarray:
    """[K x K] counts, rows are ground truth, columns are predictions."""
    predictions = np.asarray(predictions).ravel().astype(np.int64)
    labels = np.asarray(labels).ravel().astype(np.int64)
    if predictions.shape != labels.shape:
        raise ConfigError("predictions", f"{predictions.size} predictions for {labels.size} labels")
    index = labels * num_classes + predictions
    return np.bincount(index, minlength=num_classes * num_classes).reshape(num_classes, num_classes)


@dataclass
class MIoUReport:
    """
    Attributes:
        confusion: [K x K] ground truth by prediction counts
        per_class_iou: TP / (TP + FP + FN), NaN for classes absent from both
        miou: mean IoU over classes present in prediction or label
        pixel_accuracy: fraction of pixels predicted correctly
        keyed_accuracy: pixel accuracy restricted to keyed regions (NaN without a mask)
    """
    confusion: np.ndarray
    per_class_iou: np.ndarray
    miou: float
    pixel_accuracy: float
    keyed_accuracy: float = float("nan")

    def to_dict(self) -> Dict:
        return {
            "confusion": self.confusion,
            "per_class_iou": self.per_class_iou,
            "miou": self.miou,
            "pixel_accuracy": self.pixel_accuracy,
            "keyed_accuracy": self.keyed_accuracy,
        }


def miou_from_confusion(confusion: np.ndarray) -> Tuple[np.ndarray, float]:
    tp = np.diag(confusion).astype(np.float64)
    union = confusion.sum(axis=0) + confusion.sum(axis=1) - tp
    with np.errstate(invalid="ignore", divide="ignore"):
        iou = np.where(union > 0, tp / np.maximum(union, 1), np.nan)
    present = union > 0
    miou = float(iou[present].mean()) if present.any() else float("nan")
    return iou, miou


def score_predictions(
    predictions: np.ndarray,
    labels: np.ndarray,
    num_classes: int,
    keyed_mask: Optional[np.ndarray] = None,
) -> MIoUReport:
    """mIoU, pixel accuracy and keyed-region accuracy of an arg-max class map."""
    confusion = confusion_matrix(predictions, labels, num_classes)
    iou, miou = miou_from_confusion(confusion)
    correct = np.asarray(predictions) == np.asarray(labels)
    keyed = float("nan")
    if keyed_mask is not None and np.any(keyed_mask):
        keyed = float(correct[np.asarray(keyed_mask, dtype=bool)].mean())
    return MIoUReport(confusion, iou, miou, float(correct.mean()), keyed)


def evaluate_miou(
    model: SegModel,
    samples: Sequence[SyntheticSample],
    batch_size: int = 8,
) -> MIoUReport:
    """Score `model` on `samples`, batched to bound memory."""
    if not samples:
        raise ConfigError("samples", "evaluation needs at least one sample")
    predictions = []
    for start in range(0, len(samples), batch_size):
        chunk = samples[start:start + batch_size]
        logits, _ = forward(model, stack_images(chunk))
        predictions.append(logits.data.argmax(axis=1))
    pred = np.concatenate(predictions)
    labels = stack_labels(samples)
    mask = np.stack([s.keyed_mask for s in samples])
    return score_predictions(pred, labels, model.config.num_classes, mask)


# =============================================================================
# Optimizer
# =============================================================================

def sgd_step(
    named: Dict[str, Tensor],
    grads: Dict[str, np.ndarray],
    velocity: Dict[str, np.ndarray],
    lr: float,
    config: TrainConfig,
) -> Dict[str, Tensor]:
    """Momentum update in place on `velocity`; returns the new tensors."""
    updated = {}
    for name, tensor in named.items():
        w = tensor.data.astype(np.float64)
        g = grads[name] + config.weight_decay * w
        v = velocity.get(name)
        v = g if v is None else config.momentum * v + g
        velocity[name] = v
        updated[name] = Tensor(w - lr * v, dtype=tensor.dtype, name=name)
    return updated


def project_model(model: SegModel) -> SegModel:
    """Keep static attention positive after an update."""
    graph = model.graph
    if isinstance(graph, PyramidConfig):
        graph = replace(graph, per_level_params=[project_static_lambda(p) for p in graph.per_level_params])
    elif graph is not None:
        graph = project_static_lambda(graph)
    return SegModel(model.config, model.weights, graph)


# =============================================================================
# Training loop
# =============================================================================

# test sets are drawn from a seed range disjoint from training seeds
TEST_SEED_OFFSET = 10_000

TRACE_COLUMNS = ("iter", "lr", "loss", "aux_loss", "miou")


@dataclass
class TraceRow:
    iter: int
    lr: float
    loss: float
    aux_loss: float
    miou: Optional[float] = None

    def as_csv(self) -> List[str]:
        miou = "" if self.miou is None else f"{self.miou:.10f}"
        return [str(self.iter), f"{self.lr:.10e}", f"{self.loss:.10f}", f"{self.aux_loss:.10f}", miou]


@dataclass
class TrainResult:
    model: SegModel
    trace: List[TraceRow]
    metrics: Optional[MIoUReport] = None

    @property
    def final_loss(self) -> float:
        return self.trace[-1].loss

    def to_dict(self) -> Dict:
        return {
            "ablation": self.model.config.ablation.row.value,
            "iterations": len(self.trace),
            "final_loss": self.final_loss,
            "metrics": self.metrics,
        }


def write_trace(trace: Sequence[TraceRow], path: str) -> str:
    """Metric trace as CSV with columns iter, lr, loss, aux_loss, miou."""
    parent = os.path.dirname(path)
    if parent:
        os.makedirs(parent, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(TRACE_COLUMNS)
        for row in trace:
            writer.writerow(row.as_csv())
    return path


def read_trace(path: str) -> List[TraceRow]:
    with open(path, "r", encoding="utf-8", newline="") as f:
        reader = csv.DictReader(f)
        return [
            TraceRow(int(r["iter"]), float(r["lr"]), float(r["loss"]), float(r["aux_loss"]),
                     float(r["miou"]) if r["miou"] else None)
            for r in reader
        ]


def _batches(n_samples: int, batch: int, seed: int):
    """Endless deterministic stream of index batches, reshuffled every epoch."""
    rng = np.random.default_rng(seed)
    while True:
        order = rng.permutation(n_samples)
        for start in range(0, n_samples - batch + 1, batch):
            yield order[start:start + batch]


def train_step(
    model: SegModel,
    images: Tensor,
    labels: np.ndarray,
    aux_weight: float,
) -> Tuple[float, float, Dict[str, np.ndarray]]:
    """One forward/backward pass: (loss, aux loss, gradients by tensor name)."""
    leaves = {name: t.as_leaf(name) for name, t in model.named_tensors().items()}
    with Tape() as tape:
        bound = model.with_tensors(leaves)
        final, aux = forward(bound, images)
        total, _, aux_ce = loss_components(final, aux, labels, aux_weight)
    grads = tape.backward(total)
    by_name = {name: grads.get(leaf, np.zeros(leaf.shape)) for name, leaf in leaves.items()}
    return total.item(), aux_ce.item(), by_name


def train(
    config: TrainConfig,
    train_samples: Optional[Sequence[SyntheticSample]] = None,
    test_samples: Optional[Sequence[SyntheticSample]] = None,
) -> TrainResult:
    """
    Train one ablation row from scratch.

    Args:
        config: schedule, data and model settings
        train_samples: training set (generated from config.seed when omitted)
        test_samples: evaluation set (generated from config.seed + TEST_SEED_OFFSET when omitted)

    Returns:
        TrainResult with the trained model, the per-iteration trace and the
        final evaluation on the test set.

    Raises:
        TrainingDivergedError: the loss stopped being finite.
    """
    if train_samples is None:
        train_samples = generate_dataset(config.train_samples, config.height, config.width,
                                         config.seed, config.num_classes)
    if test_samples is None:
        test_samples = generate_dataset(config.test_samples, config.height, config.width,
                                        config.seed + TEST_SEED_OFFSET, config.num_classes)
    if len(train_samples) < config.batch:
        raise ConfigError("batch", f"batch {config.batch} exceeds {len(train_samples)} training samples")

    model = init_model(config.model_config(), seed=config.seed)
    velocity: Dict[str, np.ndarray] = {}
    batches = _batches(len(train_samples), config.batch, config.seed)
    trace: List[TraceRow] = []
    last_finite: Optional[float] = None
    metrics: Optional[MIoUReport] = None

    logger.info(f"Training {config.ablation.row.value} for {config.total_iters} iterations "
                f"({model.parameter_count} parameters, batch {config.batch})")

    for it in range(config.total_iters):
        lr = poly_lr(it, config)
        idx = next(batches)
        chunk = [train_samples[i] for i in idx]
        try:
            value, aux_value, grads = train_step(model, stack_images(chunk), stack_labels(chunk), config.aux_weight)
            if not math.isfinite(value):
                raise TrainingDivergedError(it, last_finite)
            updated = sgd_step(model.named_tensors(), grads, velocity, lr, config)
        except NonFiniteError as e:
            raise TrainingDivergedError(it, last_finite) from e
        last_finite = value
        model = project_model(model.with_tensors(updated))

        row = TraceRow(it, lr, value, aux_value)
        final_iter = it == config.total_iters - 1
        if final_iter or (config.eval_every and (it + 1) % config.eval_every == 0):
            metrics = evaluate_miou(model, test_samples)
            row.miou = metrics.miou
        trace.append(row)

        if config.log_every and ((it + 1) % config.log_every == 0 or final_iter):
            miou = f" miou={row.miou:.4f}" if row.miou is not None else ""
            logger.info(f"iter {it + 1}/{config.total_iters} lr={lr:.6f} loss={value:.4f} aux={aux_value:.4f}{miou}")

    return TrainResult(model, trace, metrics)
