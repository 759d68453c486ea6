"""
Weight training for separation models: full training, fine-tuning of pruned models and the joint mask-and-weight
search used as an ablation arm.

Every epoch runs Adam over the training split and then scores the validation split by mean SI-SDRi. The learning
rate halves whenever `plateau_patience` epochs pass without a new best score, and training stops after
`early_stop_patience` such epochs. The weights of the best epoch are returned.
"""
import logging
from typing import Iterator, List, NamedTuple, Optional, Tuple

import numpy as np
from pandas import DataFrame
from tqdm import tqdm

from sepprune.config import TrainConfig
from sepprune.core.autodiff import Tape
from sepprune.core.errors import InvalidArgumentError, NumericFailureError
from sepprune.core.models import ModelGraph
from sepprune.core.optimizer import AdamState, adam_step, gradients_of, zero_grads
from sepprune.data import AudioBatch, AudioDataset
from sepprune.losses import improvements, pit_neg_sisdr_loss
from sepprune.mask_learning import (
    DEFAULT_ITERATIONS,
    DEFAULT_MASK_LR,
    MaskSet,
    descend,
    finalize_masks,
    masked_forward_loss,
)
from sepprune.sepnet import forward, trainable_parameters

log = logging.getLogger("root")

LOG_COLUMNS = ["epoch", "train_loss", "val_sisdri", "lr"]


class TrainingDivergedError(NumericFailureError):
    def __init__(self, epoch: int, message: str) -> None:
        self.epoch = epoch
        super().__init__("train", "training diverged in epoch {}: {}".format(epoch, message))


class PlateauScheduler(object):
    """
    Tracks the best validation score (higher is better). Halves the learning rate on every `plateau_patience`
    consecutive epochs without improvement and asks to stop after `early_stop_patience` of them.
    """

    def __init__(
        self, lr: float, plateau_patience: int = 15, early_stop_patience: int = 30, factor: float = 0.5
    ) -> None:
        if lr <= 0:
            raise InvalidArgumentError("Learning rate must be positive, got {}".format(lr))
        if plateau_patience < 1 or early_stop_patience < 1:
            raise InvalidArgumentError("Patience values must be positive")
        self.lr = lr
        self.plateau_patience = plateau_patience
        self.early_stop_patience = early_stop_patience
        self.factor = factor
        self.best = None  # type: Optional[float]
        self.best_epoch = None  # type: Optional[int]
        self.stale = 0
        self.halvings = []  # type: List[int]
        self.stopped_at = None  # type: Optional[int]

    def step(self, epoch: int, metric: float) -> bool:
        """Records the score of `epoch`; returns False once training should stop."""
        if self.best is None or metric > self.best:
            self.best, self.best_epoch, self.stale = metric, epoch, 0
            return True
        self.stale += 1
        if self.stale >= self.early_stop_patience:
            self.stopped_at = epoch
            log.info("No improvement for {} epochs, stopping after epoch {}".format(self.stale, epoch))
            return False
        if self.stale % self.plateau_patience == 0:
            self.lr *= self.factor
            self.halvings.append(epoch)
            log.info("Plateau after epoch {}, learning rate halved to {}".format(epoch, self.lr))
        return True

    @property
    def improved(self) -> bool:
        return self.stale == 0


class TrainingLogRow(NamedTuple):
    epoch: int
    train_loss: float
    val_sisdri: float
    lr: float


class TrainingLog(object):
    def __init__(self) -> None:
        self.rows = []  # type: List[TrainingLogRow]

    def append(self, row: TrainingLogRow) -> None:
        self.rows.append(row)

    def __len__(self) -> int:
        return len(self.rows)

    def __iter__(self) -> Iterator[TrainingLogRow]:
        return iter(self.rows)

    def to_frame(self) -> DataFrame:
        return DataFrame.from_records([row._asdict() for row in self.rows], columns=LOG_COLUMNS)

    def to_csv(self, path: str) -> None:
        self.to_frame().to_csv(path, index=False)


class TrainResult(NamedTuple):
    model: ModelGraph
    log: TrainingLog
    optimizer: AdamState
    best_epoch: Optional[int]
    best_val_sisdri: Optional[float]
    halvings: List[int]
    reached_target: Optional[int] = None


def mean_si_sdri(model: ModelGraph, dataset: AudioDataset, batch_size: int = 1) -> float:
    """Mean SI-SDRi over every utterance of `dataset`, best speaker permutation per utterance."""
    if len(dataset) == 0:
        raise InvalidArgumentError("Cannot score an empty dataset")
    gains = []  # type: List[float]
    for batch in dataset.batches(batch_size):
        estimates = forward(model, batch.mixture).values
        for b in range(batch.batch_size):
            gains.append(improvements(batch.mixture[b, 0], batch.sources[b], estimates[b])[1])
    return float(np.mean(gains))


class Trainer(object):
    """
    Trains a copy of `model`; the input model is never modified. Subclasses may override `validate` to
    change the selection score.
    """

    def __init__(
        self,
        model: ModelGraph,
        train_set: AudioDataset,
        val_set: AudioDataset,
        config: TrainConfig,
        progress: bool = False,
    ) -> None:
        if len(train_set) == 0 or len(val_set) == 0:
            raise InvalidArgumentError("Training needs non-empty training and validation splits")
        self.model = model.copy()
        self.train_set = train_set
        self.val_set = val_set
        self.config = config
        self.progress = progress
        self.params = trainable_parameters(self.model)
        self.optimizer = AdamState()
        self.rng = np.random.default_rng(config.seed)

    def _epoch_batches(self) -> Iterator[AudioBatch]:
        order = self.rng.permutation(len(self.train_set))
        size = self.config.batch_size
        for start in range(0, len(order), size):
            yield AudioBatch.concatenate([self.train_set[int(i)] for i in order[start : start + size]])

    def train_epoch(self, epoch: int, lr: float) -> float:
        losses = []  # type: List[float]
        batches = tqdm(
            self._epoch_batches(),
            desc="epoch {}".format(epoch),
            total=-(-len(self.train_set) // self.config.batch_size),
            disable=not self.progress,
        )
        for batch in batches:
            with Tape() as tape:
                estimates = forward(self.model, batch.mixture, params=self.params)
                loss = pit_neg_sisdr_loss(batch.sources.astype(estimates.dtype), estimates)
                if not np.isfinite(loss.item()):
                    raise TrainingDivergedError(epoch, "loss is {}".format(loss.item()))
                tape.backward(loss)
            adam_step(self.params, gradients_of(self.params), self.optimizer, lr)
            zero_grads(self.params)
            losses.append(loss.item())
        return float(np.mean(losses))

    def validate(self) -> float:
        return mean_si_sdri(self.model, self.val_set, self.config.batch_size)

    def fit(self, max_epochs: Optional[int] = None, target_sisdri: Optional[float] = None) -> TrainResult:
        """
        :param max_epochs: epoch cap, defaults to the config's
        :param target_sisdri: also stop at the first epoch whose validation score reaches this value
        """
        max_epochs = self.config.max_epochs if max_epochs is None else max_epochs
        if max_epochs < 0:
            raise InvalidArgumentError("max_epochs must be >= 0, got {}".format(max_epochs))
        scheduler = PlateauScheduler(self.config.lr, self.config.plateau_patience, self.config.early_stop_patience)
        training_log = TrainingLog()
        best_model = self.model.copy()
        reached = None

        for epoch in range(1, max_epochs + 1):
            lr = scheduler.lr
            try:
                train_loss = self.train_epoch(epoch, lr)
                val_sisdri = self.validate()
            except TrainingDivergedError:
                raise
            except NumericFailureError as ex:
                log.exception(ex)
                raise TrainingDivergedError(epoch, str(ex)) from ex
            training_log.append(TrainingLogRow(epoch, train_loss, val_sisdri, lr))
            log.info(
                "Epoch {}: train loss {:.4f}, val SI-SDRi {:.3f} dB, lr {}".format(epoch, train_loss, val_sisdri, lr)
            )

            keep_going = scheduler.step(epoch, val_sisdri)
            if scheduler.improved:
                best_model = self.model.copy()
            if target_sisdri is not None and val_sisdri >= target_sisdri:
                reached = epoch
                break
            if not keep_going:
                break

        return TrainResult(
            best_model,
            training_log,
            self.optimizer,
            scheduler.best_epoch,
            scheduler.best,
            list(scheduler.halvings),
            reached,
        )


def train(
    model: ModelGraph,
    train_set: AudioDataset,
    val_set: AudioDataset,
    config: TrainConfig,
    max_epochs: Optional[int] = None,
    progress: bool = False,
) -> TrainResult:
    log.info("Training {} for up to {} epochs".format(model, config.max_epochs if max_epochs is None else max_epochs))
    return Trainer(model, train_set, val_set, config, progress).fit(max_epochs)


def finetune(
    model: ModelGraph,
    train_set: AudioDataset,
    val_set: AudioDataset,
    config: TrainConfig,
    epochs: Optional[int] = None,
    progress: bool = False,
) -> TrainResult:
    """Same loop as train, starting from the model's surviving weights with a fresh optimizer."""
    epochs = config.finetune_epochs if epochs is None else epochs
    log.info("Fine-tuning {} for {} epochs".format(model, epochs))
    return Trainer(model, train_set, val_set, config, progress).fit(epochs)


def epochs_to_match(
    model: ModelGraph,
    train_set: AudioDataset,
    val_set: AudioDataset,
    config: TrainConfig,
    target_sisdri: float,
    max_epochs: int,
) -> Optional[int]:
    """First epoch at which training `model` reaches `target_sisdri` on validation, None within `max_epochs`."""
    result = Trainer(model, train_set, val_set, config).fit(max_epochs, target_sisdri=target_sisdri)
    return result.reached_target


def recovery_rate(finetuned_sisdri: float, original_sisdri: float) -> float:
    """Share of the original model's SI-SDRi that the fine-tuned model recovers, in percent."""
    if original_sisdri <= 0:
        raise InvalidArgumentError("Original SI-SDRi must be positive, got {}".format(original_sisdri))
    return 100.0 * finetuned_sisdri / original_sisdri


def joint_optimize(
    model: ModelGraph,
    masks: MaskSet,
    dataset: AudioDataset,
    iterations: int = DEFAULT_ITERATIONS,
    lr: float = DEFAULT_MASK_LR,
    weight_lr: float = 0.001,
    seed: Optional[int] = None,
    progress: bool = False,
) -> Tuple[MaskSet, ModelGraph]:
    """
    Mask search in which the weights are trained too: each step descends the mask logits and takes an Adam step
    on a copy of the model's weights. Returns the finalized masks and the updated copy.
    """
    if len(dataset) == 0:
        raise InvalidArgumentError("Cannot learn masks on an empty dataset")
    if iterations < 0:
        raise InvalidArgumentError("iterations must be >= 0, got {}".format(iterations))
    masks.check_model(model)
    learned = masks.copy()
    if seed is not None:
        learned.seed = seed
        learned.rng = np.random.default_rng(seed)
    joint = model.copy()
    if iterations == 0:
        return learned, joint

    params = trainable_parameters(joint)
    state = AdamState()
    log.info("Jointly optimizing masks and weights for {} iterations".format(iterations))
    for step in tqdm(range(iterations), desc="joint search", disable=not progress):
        batch = dataset[step % len(dataset)]
        with Tape() as tape:
            temperature = learned.schedule.at(step, iterations)
            loss = masked_forward_loss(joint, learned, batch, params=params, temperature=temperature)
            tape.backward(loss)
        descend(learned, lr)
        adam_step(params, gradients_of(params), state, weight_lr)
        zero_grads(params)
    finalize_masks(learned)
    return learned, joint
