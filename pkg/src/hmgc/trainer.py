"""Dataset splitting, optimization loop, and evaluation metrics.

Training is deterministic given the config seed: the shuffle order, batch
boundaries, and gradient reductions are all fixed, so identical inputs
reproduce identical histories and metrics byte for byte on one platform.
"""

from __future__ import annotations

import csv
import io
import os
from dataclasses import dataclass, field

import numpy as np

from . import hmgchead, imagegray, tensorcore as tc
from .effnet import Backbone, ScaledSpec, build_backbone
from .errors import ConfigError, DataError
from .hmgchead import BranchParams, HierLogits, build_branch_params, forward_heads
from .plantsim import CorpusManifest, ManifestRow
from .taxonomy import LabelPath, TaxonomyTree
from .tensorcore import Tape, Tensor, backward

__all__ = [
    "TrainConfig",
    "SplitManifest",
    "split_dataset",
    "DiagnosisModel",
    "SGD",
    "Adam",
    "load_images",
    "train",
    "evaluate",
    "EvalReport",
    "ConfusionMatrix",
    "TrainingHistory",
    "EpochRecord",
    "export_history",
    "read_history",
    "export_confusion",
    "read_confusion",
]


@dataclass
class TrainConfig:
    batch_size: int = 32
    epochs: int = 20
    optimizer: str = "adam"  # "sgd" | "adam"
    learning_rate: float = 1e-3
    momentum: float = 0.9
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0
    level_weights: tuple = (1.0, 1.0, 1.0)
    branch_hidden: int | None = 128
    # desk-profile compound scaling
    phi: float = -3.0
    alpha: float = 1.2
    beta: float = 1.1
    gamma: float = 1.15
    channel_divisor: int = 8

    def __post_init__(self):
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.learning_rate < 0:
            raise ConfigError("learning_rate must be >= 0")
        if self.optimizer not in ("sgd", "adam"):
            raise ConfigError(f"unknown optimizer {self.optimizer!r}")


# --- dataset splitting ----------------------------------------------------------


@dataclass
class SplitManifest:
    train: list[ManifestRow]
    val: list[ManifestRow]
    test: list[ManifestRow]

    def part(self, name: str) -> list[ManifestRow]:
        try:
            return getattr(self, name)
        except AttributeError:
            raise ConfigError(f"unknown split part {name!r}") from None


def split_dataset(manifest: CorpusManifest, ratios=(8, 1, 1), seed: int = 0) -> SplitManifest:
    """Stratified train/val/test split.

    Rows are grouped by (fault, condition); each stratum is shuffled with the
    seed and divided floor(n * r / sum(r)) per part, remainders going to
    train first, then val, then test.
    """
    if not manifest.rows:
        raise ConfigError("cannot split an empty manifest")
    if len(ratios) != 3 or min(ratios) < 0 or sum(ratios) <= 0:
        raise ConfigError(f"bad split ratios {ratios}")
    strata: dict[tuple, list[ManifestRow]] = {}
    for row in manifest.rows:
        strata.setdefault((row.fault, row.condition), []).append(row)

    rng = np.random.default_rng(seed)
    total = sum(ratios)
    parts: tuple[list[ManifestRow], ...] = ([], [], [])
    for key in sorted(strata):
        rows = strata[key]
        order = rng.permutation(len(rows))
        counts = [len(rows) * r // total for r in ratios]
        leftover = len(rows) - sum(counts)
        for i in range(3):
            if leftover == 0:
                break
            counts[i] += 1
            leftover -= 1
        start = 0
        for part, count in zip(parts, counts):
            part.extend(rows[i] for i in order[start : start + count])
            start += count
    return SplitManifest(train=parts[0], val=parts[1], test=parts[2])


# --- model assembly -------------------------------------------------------------


class DiagnosisModel:
    """Backbone + hierarchical head over a fixed taxonomy."""

    def __init__(self, tree: TaxonomyTree, backbone: Backbone, head: BranchParams):
        self.tree = tree
        self.backbone = backbone
        self.head = head

    @classmethod
    def build(cls, tree: TaxonomyTree, spec: ScaledSpec, branch_hidden: int | None = None,
              seed: int = 0, in_channels: int = 1, dtype=np.float32) -> "DiagnosisModel":
        backbone = build_backbone(spec, in_channels=in_channels, seed=seed, dtype=dtype)
        head = build_branch_params(
            backbone.trunk_width, tree, hidden=branch_hidden, seed=seed + 1, dtype=dtype
        )
        return cls(tree, backbone, head)

    @property
    def spec(self) -> ScaledSpec:
        return self.backbone.spec

    def forward(self, images: np.ndarray, train: bool = False) -> HierLogits:
        x = Tensor(np.asarray(images, dtype=self.backbone.dtype))
        trunk = self.backbone.forward(x, train=train)
        return forward_heads(trunk, self.head)

    def decode(self, images: np.ndarray) -> list[hmgchead.HierPrediction]:
        logits = self.forward(images, train=False)
        return hmgchead.decode_batch(self.tree, logits)

    def parameters(self) -> list[tuple[str, Tensor]]:
        return [
            (f"backbone.{n}", t) for n, t in self.backbone.parameters()
        ] + self.head.parameters()

    def buffers(self) -> list[tuple[str, np.ndarray]]:
        return [(f"backbone.{n}", b) for n, b in self.backbone.buffers()]


# --- optimizers ------------------------------------------------------------------


class SGD:
    def __init__(self, params: list[tuple[str, Tensor]], lr: float, momentum: float = 0.0):
        self.params = [t for _, t in params]
        self.lr = lr
        self.momentum = momentum
        self.velocity = [np.zeros_like(t.data) for t in self.params]

    def step(self) -> None:
        for t, v in zip(self.params, self.velocity):
            if t.grad is None:
                continue
            v *= self.momentum
            v += t.grad
            t.data -= (self.lr * v).astype(t.data.dtype, copy=False)

    def zero_grad(self) -> None:
        for t in self.params:
            t.grad = None


class Adam:
    def __init__(self, params: list[tuple[str, Tensor]], lr: float = 1e-3,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.params = [t for _, t in params]
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = [np.zeros_like(t.data) for t in self.params]
        self.v = [np.zeros_like(t.data) for t in self.params]

    def step(self) -> None:
        self.t += 1
        b1c = 1.0 - self.beta1**self.t
        b2c = 1.0 - self.beta2**self.t
        for t, m, v in zip(self.params, self.m, self.v):
            if t.grad is None:
                continue
            g = t.grad
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            update = (m / b1c) / (np.sqrt(v / b2c) + self.eps)
            t.data -= (self.lr * update).astype(t.data.dtype, copy=False)

    def zero_grad(self) -> None:
        for t in self.params:
            t.grad = None


def make_optimizer(model: DiagnosisModel, config: TrainConfig):
    if config.optimizer == "sgd":
        return SGD(model.parameters(), config.learning_rate, config.momentum)
    return Adam(model.parameters(), config.learning_rate, config.beta1,
                config.beta2, config.eps)


# --- data loading ----------------------------------------------------------------


def load_images(rows: list[ManifestRow], root, tree: TaxonomyTree
                ) -> tuple[np.ndarray, list[LabelPath]]:
    """Read the rows' PGM images into a [N, 1, S, S] float32 batch in [0, 1]."""
    if not rows:
        raise ConfigError("no rows to load")
    images = None
    labels = []
    for i, row in enumerate(rows):
        img = imagegray.read_pgm(os.path.join(root, row.image_path))
        if images is None:
            images = np.empty((len(rows), 1, img.side, img.side), dtype=np.float32)
        elif img.side != images.shape[2]:
            raise DataError(
                f"inconsistent image side {img.side} in {row.image_path} "
                f"(expected {images.shape[2]})"
            )
        images[i, 0] = img.pixels.astype(np.float32) / 255.0
        labels.append(tree.path_from_names(row.loop, row.system, row.fault))
    return images, labels


# --- metrics ---------------------------------------------------------------------


@dataclass(eq=False)
class ConfusionMatrix:
    labels: tuple[str, ...]
    counts: np.ndarray  # [K, K] ints, rows = true class, columns = predicted

    @classmethod
    def empty(cls, labels) -> "ConfusionMatrix":
        k = len(labels)
        return cls(labels=tuple(labels), counts=np.zeros((k, k), dtype=np.int64))

    def record(self, true_idx: int, pred_idx: int) -> None:
        self.counts[true_idx, pred_idx] += 1

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def accuracy(self) -> float:
        return float(np.trace(self.counts)) / self.total if self.total else 0.0

    def __eq__(self, other):
        if not isinstance(other, ConfusionMatrix):
            return NotImplemented
        return self.labels == other.labels and np.array_equal(self.counts, other.counts)


@dataclass
class EvalReport:
    loss: float
    accuracy_root: float
    accuracy_system: float
    accuracy_fault: float
    confusion_root: ConfusionMatrix
    confusion_system: ConfusionMatrix
    confusion_fault: ConfusionMatrix
    mean_joint_confidence: float
    consistency_rate: float
    n_samples: int


def _forward_eval(model: DiagnosisModel, images, labels, weights, batch_size=64):
    """Batched eval-mode forward; returns stacked logits and the mean loss."""
    roots, systems, faults = [], [], []
    loss_sum = 0.0
    n = images.shape[0]
    for start in range(0, n, batch_size):
        batch = images[start : start + batch_size]
        batch_labels = labels[start : start + batch_size]
        logits = model.forward(batch, train=False)
        loss = hmgchead.hier_loss(model.tree, logits, batch_labels, weights)
        loss_sum += float(loss.data) * len(batch_labels)
        root, system, fault = logits.as_arrays()
        roots.append(root)
        systems.append(system)
        faults.append(fault)
    stacked = HierLogits(
        root=np.concatenate(roots), system=np.concatenate(systems),
        fault=np.concatenate(faults)
    )
    return stacked, loss_sum / n


def evaluate(model: DiagnosisModel, images: np.ndarray, labels: list[LabelPath],
             level_weights=(1.0, 1.0, 1.0), batch_size: int = 64) -> EvalReport:
    """Decode every sample and score it at all three levels.

    Accuracy at a level counts samples whose decoded path matches the true
    label at that level; confusion matrices are built from the decoded paths.
    Pure: repeated calls on the same inputs give identical numbers.
    """
    if len(labels) == 0:
        raise ConfigError("evaluate needs at least one sample")
    tree = model.tree
    logits, loss = _forward_eval(model, images, labels, level_weights, batch_size)
    preds = hmgchead.decode_batch(tree, logits)

    cm_root = ConfusionMatrix.empty(tree.loop_names)
    cm_system = ConfusionMatrix.empty(tree.system_names)
    cm_fault = ConfusionMatrix.empty(tree.fault_names)
    hits = np.zeros(3, dtype=np.int64)
    confidence_sum = 0.0
    for pred, true in zip(preds, labels):
        cm_root.record(true.loop_idx, pred.path.loop_idx)
        cm_system.record(true.system_idx, pred.path.system_idx)
        cm_fault.record(true.fault_idx, pred.path.fault_idx)
        hits += (
            pred.path.loop_idx == true.loop_idx,
            pred.path.system_idx == true.system_idx,
            pred.path.fault_idx == true.fault_idx,
        )
        confidence_sum += pred.joint_confidence
    n = len(labels)
    return EvalReport(
        loss=loss,
        accuracy_root=hits[0] / n,
        accuracy_system=hits[1] / n,
        accuracy_fault=hits[2] / n,
        confusion_root=cm_root,
        confusion_system=cm_system,
        confusion_fault=cm_fault,
        mean_joint_confidence=confidence_sum / n,
        consistency_rate=hmgchead.argmax_consistency_rate(tree, logits),
        n_samples=n,
    )


# --- training loop ----------------------------------------------------------------


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_loss: float
    acc_root: float
    acc_system: float
    acc_fault: float
    consistency_rate: float


@dataclass
class TrainingHistory:
    records: list[EpochRecord] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.records)


def train(
    model: DiagnosisModel,
    train_images: np.ndarray,
    train_labels: list[LabelPath],
    val_images: np.ndarray,
    val_labels: list[LabelPath],
    config: TrainConfig,
    stop_at_train_fault_accuracy: float | None = None,
) -> TrainingHistory:
    """Minimize the hierarchical loss; returns the per-epoch history.

    With stop_at_train_fault_accuracy set, training stops after the first
    epoch whose train-set leaf accuracy reaches the threshold (the check is
    deterministic, so early stopping preserves reproducibility).
    """
    optimizer = make_optimizer(model, config)
    rng = np.random.default_rng(config.seed)
    n = train_images.shape[0]
    history = TrainingHistory()
    for epoch in range(1, config.epochs + 1):
        order = rng.permutation(n)
        loss_sum = 0.0
        for start in range(0, n, config.batch_size):
            idx = order[start : start + config.batch_size]
            batch = train_images[idx]
            batch_labels = [train_labels[i] for i in idx]
            with Tape() as tape:
                logits = model.forward(batch, train=True)
                loss = hmgchead.hier_loss(
                    model.tree, logits, batch_labels, config.level_weights
                )
            loss_val = float(loss.data)
            if not np.isfinite(loss_val):
                raise FloatingPointError(
                    f"non-finite loss at epoch {epoch}, batch starting at "
                    f"sample {start} (first row index {int(idx[0])})"
                )
            backward(tape, loss)
            optimizer.step()
            optimizer.zero_grad()
            loss_sum += loss_val * len(batch_labels)
        val_report = evaluate(model, val_images, val_labels, config.level_weights)
        history.records.append(
            EpochRecord(
                epoch=epoch,
                train_loss=loss_sum / n,
                val_loss=val_report.loss,
                acc_root=val_report.accuracy_root,
                acc_system=val_report.accuracy_system,
                acc_fault=val_report.accuracy_fault,
                consistency_rate=val_report.consistency_rate,
            )
        )
        if stop_at_train_fault_accuracy is not None:
            train_report = evaluate(model, train_images, train_labels,
                                    config.level_weights)
            if train_report.accuracy_fault >= stop_at_train_fault_accuracy:
                break
    return history


# --- CSV exports -------------------------------------------------------------------

HISTORY_HEADER = [
    "epoch", "train_loss", "val_loss", "acc_root", "acc_system", "acc_fault",
    "consistency_rate",
]


def history_to_csv_text(history: TrainingHistory) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(HISTORY_HEADER)
    for r in history.records:
        writer.writerow([
            r.epoch, repr(r.train_loss), repr(r.val_loss), repr(r.acc_root),
            repr(r.acc_system), repr(r.acc_fault), repr(r.consistency_rate),
        ])
    return buf.getvalue()


def export_history(history: TrainingHistory, path) -> None:
    with open(path, "w", newline="") as fh:
        fh.write(history_to_csv_text(history))


def read_history(path) -> TrainingHistory:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != HISTORY_HEADER:
            raise DataError(f"bad history header: {header}")
        records = [
            EpochRecord(
                epoch=int(row[0]), train_loss=float(row[1]), val_loss=float(row[2]),
                acc_root=float(row[3]), acc_system=float(row[4]),
                acc_fault=float(row[5]), consistency_rate=float(row[6]),
            )
            for row in reader
        ]
    return TrainingHistory(records=records)


def confusion_to_csv_text(cm: ConfusionMatrix) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["true\\pred", *cm.labels])
    for i, label in enumerate(cm.labels):
        writer.writerow([label, *[int(v) for v in cm.counts[i]]])
    return buf.getvalue()


def export_confusion(cm: ConfusionMatrix, path) -> None:
    with open(path, "w", newline="") as fh:
        fh.write(confusion_to_csv_text(cm))


def read_confusion(path) -> ConfusionMatrix:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if not header or header[0] != "true\\pred":
            raise DataError(f"bad confusion header: {header}")
        labels = tuple(header[1:])
        rows = []
        for row in reader:
            if row[0] != labels[len(rows)]:
                raise DataError(f"confusion row label mismatch: {row[0]!r}")
            rows.append([int(v) for v in row[1:]])
    counts = np.array(rows, dtype=np.int64)
    if counts.shape != (len(labels), len(labels)):
        raise DataError("confusion matrix is not square")
    return ConfusionMatrix(labels=labels, counts=counts)
