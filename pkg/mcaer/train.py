"""
Training loop, evaluation and the per-epoch history log.

Each epoch shuffles the training split with a (seed, "shuffle", epoch) stream, runs
forward, cross-entropy (plus the masked keypoint heatmap loss when keypoints exist),
backward and one RMSProp step per minibatch, and scores the validation split. The
checkpoint with the best validation accuracy is kept; ties keep the earlier epoch.
"""
import logging
import math
import time
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import List, Optional

import numpy as np
from tabulate import tabulate

from mcaer import functional as F
from mcaer import rng as rngs
from mcaer.constants import BATCH_SIZE, CLASS_NAMES, EPOCHS, LR0, LR_DECAY, LR_STEP_EPOCHS, RMSPROP_ALPHA, RMSPROP_EPS
from mcaer.checkpoint import save_checkpoint
from mcaer.dataset import Dataset
from mcaer.errors import ConfigError, DatasetError, TrainingAborted
from mcaer.model import MCAERModel, mcaer_forward
from mcaer.optim import RmsPropState, lr_at_epoch, rmsprop_step
from mcaer.preprocessing import PrepConfig, StreamBatch, collate, prepare_many
from mcaer.tensor import backward, no_grad

logger = logging.getLogger(__name__)

PRECISIONS = ("float32", "float64")


@dataclass
class TrainConfig:
    lr0: float = LR0
    lr_decay: float = LR_DECAY
    lr_step_epochs: int = LR_STEP_EPOCHS
    batch_size: int = BATCH_SIZE
    epochs: int = EPOCHS
    seed: int = 0
    strict: bool = False
    precision: str = "float32"
    keypoint_weight: float = 0.1
    use_face_selector: bool = True
    rmsprop_alpha: float = RMSPROP_ALPHA
    rmsprop_eps: float = RMSPROP_EPS

    def __post_init__(self):
        self.validate()

    def validate(self):
        if self.batch_size < 1:
            raise ConfigError(f'train.batch_size must be >= 1, got {self.batch_size}')
        if self.epochs < 0:
            raise ConfigError(f'train.epochs must be >= 0, got {self.epochs}')
        if self.lr0 <= 0 or self.lr_decay <= 0 or self.lr_step_epochs < 1:
            raise ConfigError('train.lr0 and train.lr_decay must be positive, train.lr_step_epochs >= 1')
        if self.precision not in PRECISIONS:
            raise ConfigError(f'train.precision must be one of {PRECISIONS}, got {self.precision!r}')
        if self.keypoint_weight < 0:
            raise ConfigError(f'train.keypoint_weight must be >= 0, got {self.keypoint_weight}')

    @property
    def dtype(self):
        return np.dtype(self.precision)

    def lr(self, epoch: int) -> float:
        return lr_at_epoch(epoch, self.lr0, self.lr_decay, self.lr_step_epochs)


@dataclass
class EpochRecord:
    epoch: int
    loss: float
    val_acc: float
    lr: float


@dataclass
class History:
    records: List[EpochRecord] = field(default_factory=list)
    best_epoch: Optional[int] = None
    best_val_acc: Optional[float] = None
    steps: int = 0

    def losses(self) -> List[float]:
        return [record.loss for record in self.records]


@dataclass
class EvalReport:
    accuracy: float
    confusion: np.ndarray
    per_class: np.ndarray

    @classmethod
    def from_predictions(cls, labels, predictions, num_classes=len(CLASS_NAMES)) -> "EvalReport":
        labels = np.asarray(labels, dtype=np.int64)
        predictions = np.asarray(predictions, dtype=np.int64)
        if labels.size == 0:
            raise DatasetError('cannot evaluate an empty dataset')
        confusion = np.zeros((num_classes, num_classes), dtype=np.int64)
        np.add.at(confusion, (labels, predictions), 1)
        totals = confusion.sum(axis=1)
        with np.errstate(invalid="ignore", divide="ignore"):
            per_class = np.where(totals > 0, np.diag(confusion) / np.maximum(totals, 1), np.nan)
        return cls(float(np.trace(confusion)) / confusion.sum(), confusion, per_class)

    @property
    def count(self) -> int:
        return int(self.confusion.sum())

    def format(self, class_names=CLASS_NAMES) -> str:
        rows = [[name] + row.tolist() for name, row in zip(class_names, self.confusion)]
        matrix = tabulate(rows, headers=["truth \\ predicted"] + list(class_names), tablefmt="plain")
        per_class = tabulate(
            [[name, acc] for name, acc in zip(class_names, self.per_class)],
            headers=["emotion", "accuracy"],
            floatfmt=".2%",
        )
        return f'accuracy {self.accuracy:.2%} over {self.count} samples\n\n{matrix}\n\n{per_class}'


def batch_loss(model: MCAERModel, batch: StreamBatch, keypoint_weight: float):
    output = mcaer_forward(model, batch)
    loss = F.cross_entropy(output.logits, batch.labels)
    if keypoint_weight and output.heatmaps is not None and batch.heatmaps is not None and batch.heatmap_mask.any():
        loss = loss + F.mse_masked(output.heatmaps, batch.heatmaps, batch.heatmap_mask) * keypoint_weight
    return loss, output


def train_step(model: MCAERModel, batch: StreamBatch, state: RmsPropState, keypoint_weight=0.0) -> float:
    """
    One optimizer step. Returns the loss before the step; a non-finite loss skips the update.
    """
    loss, _ = batch_loss(model, batch, keypoint_weight)
    value = loss.item()
    if not math.isfinite(value):
        return value
    backward(loss)
    rmsprop_step(model.params, state)
    model.params.zero_grad()
    return value


def load_batch(dataset: Dataset, indices, prep: PrepConfig, model: MCAERModel, seed=0, epoch=0, strict=False):
    samples = prepare_many(dataset.load, indices, prep, model.config.streams, seed, epoch, strict)
    return collate(samples, model.config.joints if "body" in model.config.streams else 0).astype(model.dtype)


def predict(model: MCAERModel, dataset: Dataset, prep: PrepConfig, batch_size=BATCH_SIZE, strict=False) -> np.ndarray:
    """
    Class probabilities [N, K] for every sample, eval mode.
    """
    if len(dataset) == 0:
        raise DatasetError('cannot evaluate an empty dataset')
    model.eval()
    prep = replace(prep, mode="eval")
    out = []
    with no_grad():
        for start in range(0, len(dataset), batch_size):
            indices = list(range(start, min(start + batch_size, len(dataset))))
            batch = load_batch(dataset, indices, prep, model, strict=strict)
            out.append(mcaer_forward(model, batch).probabilities())
    return np.concatenate(out)


def evaluate(model: MCAERModel, dataset: Dataset, prep: PrepConfig, batch_size=BATCH_SIZE, strict=False) -> EvalReport:
    probabilities = predict(model, dataset, prep, batch_size, strict)
    # argmax takes the first index on exact ties
    report = EvalReport.from_predictions(dataset.labels, probabilities.argmax(axis=1))
    logger.info('evaluated %d samples accuracy=%.4f', report.count, report.accuracy)
    return report


def train(
    model: MCAERModel,
    train_set: Dataset,
    val_set: Optional[Dataset],
    config: TrainConfig,
    prep: PrepConfig,
    checkpoint_path=None,
    history_path=None,
    on_epoch=None,
) -> History:
    if len(train_set) == 0:
        raise DatasetError('the training split is empty')
    model.config.check_prep(prep)
    train_prep = replace(prep, mode="train")
    state = RmsPropState(config.lr0, config.rmsprop_alpha, config.rmsprop_eps)
    history = History()
    model.params.zero_grad()
    n = len(train_set)

    for epoch in range(config.epochs):
        start = time.time()
        state.lr = config.lr(epoch)
        order = rngs.stream(config.seed, "shuffle", epoch).permutation(n)
        model.train()
        total = 0.0
        for number, offset in enumerate(range(0, n, config.batch_size)):
            indices = order[offset : offset + config.batch_size].tolist()
            batch = load_batch(train_set, indices, train_prep, model, config.seed, epoch, config.strict)
            loss = train_step(model, batch, state, config.keypoint_weight)
            if not math.isfinite(loss):
                raise TrainingAborted(epoch, number, loss)
            logger.debug('epoch=%d batch=%d loss=%.6f', epoch, number, loss)
            total += loss * len(indices)

        val_acc = float('nan')
        if val_set is not None and len(val_set):
            val_acc = evaluate(model, val_set, prep, config.batch_size, config.strict).accuracy
        record = EpochRecord(epoch, float(total / n), float(val_acc), float(state.lr))
        history.records.append(record)
        history.steps = state.steps
        took = time.time() - start
        logger.info('epoch=%d loss=%.4f val_acc=%.4f lr=%.2e took=%.1fs', epoch, record.loss, val_acc, state.lr, took)

        # without a validation split the latest epoch is kept
        improved = math.isnan(val_acc) or history.best_val_acc is None or val_acc > history.best_val_acc
        if improved:
            history.best_epoch, history.best_val_acc = epoch, val_acc
            if checkpoint_path is not None:
                save_checkpoint(model, checkpoint_path, train_config=config, prep_config=prep)
        if history_path is not None:
            write_history(history.records, history_path)
        if on_epoch is not None:
            on_epoch(record)

    if checkpoint_path is not None and history.best_epoch is None:
        # zero epochs: keep the initial weights
        save_checkpoint(model, checkpoint_path, train_config=config, prep_config=prep)
    model.eval()
    return history


def format_history_line(record: EpochRecord) -> str:
    return f'{record.epoch} {record.loss!r} {record.val_acc!r} {record.lr!r}'


def write_history(records, path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(''.join(format_history_line(record) + '\n' for record in records))


def read_history(path) -> List[EpochRecord]:
    records = []
    for line in Path(path).read_text().splitlines():
        if not line.strip():
            continue
        epoch, loss, val_acc, lr = line.split()
        records.append(EpochRecord(int(epoch), float(loss), float(val_acc), float(lr)))
    return records
