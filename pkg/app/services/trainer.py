"""Mini-batch training with random feature masking, Adam, a plateau LR schedule and
early stopping after a warm-up period."""

import logging
import math
import time
from dataclasses import asdict, dataclass, field
from enum import Enum
from pathlib import Path
from typing import List, Optional, Tuple, Union

import numpy as np
import pandas as pd
from pydantic import BaseModel, ConfigDict, Field

from app.errors import MetricError, NonFiniteError, OptimizerError, SchemaError, TrainingDivergedError
from app.services import tensor as T
from app.services.data import TabularDataset
from app.services.metrics import auc
from app.services.missingness import AugmentationPolicy, augment_batch
from app.services.model import NaimParameters, forward_batch, loss_and_gradients, probabilities
from app.services.optim import AdamState, adam_step

logger = logging.getLogger(__name__)


class TrainConfig(BaseModel):
    model_config = ConfigDict(frozen=True)

    max_epochs: int = Field(1500, gt=0)
    batch_size: int = Field(32, gt=0)
    patience: int = Field(50, gt=0, description="Early-stopping patience in epochs")
    warmup_epochs: int = Field(50, gt=0, description="Epochs before early stopping and LR drops engage")
    plateau_window: int = Field(25, gt=0, description="Stagnant epochs before the LR is divided")
    lr_drop_factor: float = Field(10.0, gt=1.0)
    initial_lr: float = Field(1e-3, gt=0.0)
    l1: float = Field(0.0, ge=0.0)
    l2: float = Field(0.0, ge=0.0)
    improvement_threshold: float = Field(1e-6, ge=0.0, description="Absolute loss decrease that counts")
    augmentation_enabled: bool = Field(True, description="Randomly mask present features during training")
    seed: int = Field(0, ge=0)
    eval_chunk: int = Field(512, gt=0)


class StopDecision(str, Enum):
    proceed = "continue"
    stop = "stop"


@dataclass
class PlateauSchedule:
    lr: float
    window: int = 25
    factor: float = 10.0
    warmup: int = 50
    threshold: float = 1e-6
    best: float = math.inf
    stagnant: int = 0
    drops: int = 0


def lr_plateau_step(state: PlateauSchedule, val_loss: float, epoch: int) -> float:
    """Divide the LR by ``factor`` after ``window`` post-warm-up epochs without improvement."""
    if val_loss < state.best - state.threshold:
        state.best = val_loss
        state.stagnant = 0
    elif epoch > state.warmup:
        state.stagnant += 1
        if state.stagnant >= state.window:
            state.lr /= state.factor
            state.drops += 1
            state.stagnant = 0
    return state.lr


@dataclass
class EarlyStopping:
    patience: int = 50
    warmup: int = 50
    threshold: float = 1e-6
    best: float = math.inf
    stagnant: int = 0


def early_stop_check(state: EarlyStopping, val_loss: float, epoch: int) -> StopDecision:
    if val_loss < state.best - state.threshold:
        state.best = val_loss
        state.stagnant = 0
    elif epoch > state.warmup:
        state.stagnant += 1
    return StopDecision.stop if state.stagnant >= state.patience else StopDecision.proceed


@dataclass(frozen=True)
class EpochRecord:
    epoch: int
    train_loss: float
    val_loss: float
    val_auc: float
    lr: float
    masked_samples: int
    masked_cells: int


@dataclass
class TrainHistory:
    records: List[EpochRecord] = field(default_factory=list)
    best_epoch: int = 0
    stopped_early: bool = False

    def __len__(self) -> int:
        return len(self.records)

    @property
    def best_val_loss(self) -> float:
        return min((r.val_loss for r in self.records), default=math.inf)

    @property
    def lr_drops(self) -> int:
        return sum(1 for a, b in zip(self.records, self.records[1:]) if b.lr < a.lr)

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame([asdict(r) for r in self.records], columns=list(EpochRecord.__dataclass_fields__))

    def write_csv(self, path: Union[str, Path]) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        self.to_frame().to_csv(path, index=False)


def evaluate(params: NaimParameters, d: TabularDataset, chunk: int = 512) -> Tuple[float, np.ndarray]:
    """Mean cross-entropy and (n, C) probabilities on ``d`` without recording gradients."""
    if len(d) == 0:
        return math.nan, np.empty((0, params.config.n_classes))
    total = 0.0
    probs = []
    for start in range(0, len(d), chunk):
        sl = slice(start, start + chunk)
        logits = forward_batch(params, d.values[sl], d.present[sl])
        total += T.cross_entropy_logits(logits, d.labels[sl]).item() * logits.shape[0]
        probs.append(probabilities(logits.data))
    return total / len(d), np.concatenate(probs)


def positive_auc(probs: np.ndarray, labels: np.ndarray) -> float:
    """AUC of the class-1 probability; NaN when undefined (single class or not binary)."""
    if probs.shape[1] != 2:
        return math.nan
    try:
        return auc(probs[:, 1], labels)
    except MetricError:
        return math.nan


def train(
    params: NaimParameters,
    train_set: TabularDataset,
    val_set: TabularDataset,
    config: TrainConfig,
    history_path: Optional[Union[str, Path]] = None,
) -> Tuple[NaimParameters, TrainHistory]:
    """Train a copy of ``params``; return the snapshot with the lowest validation loss.

    When ``val_set`` is empty the training loss is monitored instead.
    """
    if train_set.schema != params.schema or (len(val_set) and val_set.schema != params.schema):
        raise SchemaError("datasets were not preprocessed with the model's schema")
    if len(train_set) == 0:
        raise SchemaError("training set is empty")

    current = params.copy()
    best = current.copy()
    best_loss = math.inf
    optimizer = AdamState()
    schedule = PlateauSchedule(
        lr=config.initial_lr,
        window=config.plateau_window,
        factor=config.lr_drop_factor,
        warmup=config.warmup_epochs,
        threshold=config.improvement_threshold,
    )
    stopper = EarlyStopping(config.patience, config.warmup_epochs, config.improvement_threshold)
    policy = AugmentationPolicy()
    history = TrainHistory()
    n = len(train_set)
    started = time.time()

    for epoch in range(1, config.max_epochs + 1):
        order = np.random.default_rng([config.seed, epoch]).permutation(n)
        lr = schedule.lr
        epoch_loss = 0.0
        masked_samples = masked_cells = 0

        for batch, start in enumerate(range(0, n, config.batch_size)):
            idx = order[start : start + config.batch_size]
            values = train_set.values[idx]
            present = train_set.present[idx]
            if config.augmentation_enabled:
                present, samples, cells = augment_batch(values, present, idx, policy, config.seed, epoch)
                masked_samples += samples
                masked_cells += cells
            try:
                loss, grads = loss_and_gradients(current, values, present, train_set.labels[idx])
                adam_step(current.arrays, grads, optimizer, lr, config.l2, config.l1)
            except (NonFiniteError, OptimizerError) as e:
                logger.error(f"❌ Training diverged at epoch {epoch}, batch {batch}: {e}")
                raise TrainingDivergedError(f"training diverged: {e}", epoch=epoch, batch=batch)
            epoch_loss += loss * idx.size

        train_loss = epoch_loss / n
        if len(val_set):
            val_loss, val_probs = evaluate(current, val_set, config.eval_chunk)
            val_auc = positive_auc(val_probs, val_set.labels)
        else:
            val_loss, val_auc = train_loss, math.nan

        history.records.append(
            EpochRecord(epoch, train_loss, val_loss, val_auc, lr, masked_samples, masked_cells)
        )
        logger.debug(
            f"Epoch {epoch}: train_loss={train_loss:.6f} val_loss={val_loss:.6f} val_auc={val_auc:.4f} lr={lr:g}"
        )

        if val_loss < best_loss:
            best_loss = val_loss
            best = current.copy()
            history.best_epoch = epoch

        drops = schedule.drops
        lr_plateau_step(schedule, val_loss, epoch)
        if schedule.drops > drops:
            logger.info(f"📉 Validation loss stagnated; learning rate {lr:g} -> {schedule.lr:g} at epoch {epoch}")
        if early_stop_check(stopper, val_loss, epoch) == StopDecision.stop:
            history.stopped_early = True
            logger.info(f"⏹️ Early stop at epoch {epoch} (no improvement for {config.patience} epochs)")
            break

    elapsed = time.time() - started
    logger.info(
        f"✅ Training finished after {len(history)} epochs in {elapsed:.1f}s; "
        f"best epoch {history.best_epoch} with val_loss={best_loss:.6f}"
    )
    if history_path is not None:
        history.write_csv(history_path)
    return best, history
