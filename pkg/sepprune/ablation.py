"""
Desk-scale ablation studies. Each returns a pandas DataFrame that the `ablate` command writes as CSV.
"""
import logging
from typing import Any, Callable, Dict, List, Optional, Sequence

from pandas import DataFrame, concat

from sepprune.config import TrainConfig
from sepprune.core.errors import InvalidArgumentError
from sepprune.core.models import ModelGraph
from sepprune.data import AudioDataset
from sepprune.evaluation import EvalRecord, evaluate
from sepprune.mask_learning import MaskSet, finalize_masks, kept_fraction, learn_masks
from sepprune.profiler import TIMING_MODES, profile, speedup, timing_harness
from sepprune.pruner import prune
from sepprune.sepnet import reinitialize
from sepprune.training import epochs_to_match, finetune, joint_optimize, recovery_rate

log = logging.getLogger("root")


class Splits(object):
    def __init__(self, train: AudioDataset, val: AudioDataset, test: AudioDataset) -> None:
        self.train = train
        self.val = val
        self.test = test


def _prune_and_score(
    model: ModelGraph, masks: MaskSet, splits: Splits, config: TrainConfig, name: str, workers: int
) -> EvalRecord:
    pruned, _ = prune(model, masks)
    tuned = finetune(pruned, splits.train, splits.val, config).model
    return evaluate(tuned, splits.test, name, workers)


def _row(record: EvalRecord, **extra: Any) -> Dict[str, Any]:
    row = dict(extra)
    row.update(record.summary_row())
    return row


def threshold_sweep(
    model: ModelGraph,
    learned: MaskSet,
    thresholds: Sequence[float],
    splits: Splits,
    config: TrainConfig,
    workers: int = 1,
) -> DataFrame:
    """Re-thresholds the same learned logits at every threshold, then prunes, fine-tunes and evaluates."""
    rows = []  # type: List[Dict[str, Any]]
    for threshold in sorted(thresholds):
        masks = learned.with_threshold(threshold)
        finalize_masks(masks)
        record = _prune_and_score(model, masks, splits, config, "threshold={}".format(threshold), workers)
        rows.append(_row(record, threshold=threshold, kept_fraction=kept_fraction(masks.binary_masks())))
        log.info("Threshold {}: {}".format(threshold, record))
    return DataFrame.from_records(rows)


def iteration_sweep(
    model: ModelGraph,
    initial: MaskSet,
    iterations: Sequence[int],
    splits: Splits,
    config: TrainConfig,
    mask_lr: float,
    workers: int = 1,
) -> DataFrame:
    """Learns masks from the same starting point for every iteration count."""
    rows = []  # type: List[Dict[str, Any]]
    for count in iterations:
        masks = learn_masks(model, initial, splits.train, count, mask_lr)
        if count == 0:
            finalize_masks(masks)
        record = _prune_and_score(model, masks, splits, config, "iterations={}".format(count), workers)
        rows.append(_row(record, iterations=count, kept_fraction=kept_fraction(masks.binary_masks())))
    return DataFrame.from_records(rows)


def joint_vs_stepwise(
    model: ModelGraph,
    initial: MaskSet,
    iterations: int,
    splits: Splits,
    config: TrainConfig,
    mask_lr: float,
    workers: int = 1,
) -> DataFrame:
    """
    Step-wise: masks are searched on frozen weights, then the pruned model is fine-tuned. Joint: masks and
    weights are updated together, then the result is pruned and fine-tuned the same way.
    """
    stepwise_masks = learn_masks(model, initial, splits.train, iterations, mask_lr)
    stepwise = _prune_and_score(model, stepwise_masks, splits, config, "stepwise", workers)
    joint_masks, joint_model = joint_optimize(model, initial, splits.train, iterations, mask_lr, config.lr)
    joint = _prune_and_score(joint_model, joint_masks, splits, config, "joint", workers)
    return DataFrame.from_records([stepwise.summary_row(), joint.summary_row()])


def recovery_study(
    model: ModelGraph,
    pruned: ModelGraph,
    splits: Splits,
    config: TrainConfig,
    epochs: int,
    scratch_max_epochs: int,
    seed: int = 0,
    workers: int = 1,
) -> DataFrame:
    """
    How much of the original model's SI-SDRi the pruned model recovers after `epochs` of fine-tuning, against a
    model of the same shape trained from scratch for as long. The last column is how many epochs the scratch
    model needs to match the fine-tuned one (empty when it does not within `scratch_max_epochs`).
    """
    original = evaluate(model, splits.test, "original", workers)
    tuned = finetune(pruned, splits.train, splits.val, config, epochs).model
    tuned_record = evaluate(tuned, splits.test, "finetuned", workers)
    scratch_model = reinitialize(pruned, seed)
    scratch = finetune(scratch_model, splits.train, splits.val, config, epochs).model
    scratch_record = evaluate(scratch, splits.test, "scratch", workers)
    needed = epochs_to_match(
        scratch_model, splits.train, splits.val, config, tuned_record.mean_si_sdri, scratch_max_epochs
    )

    rows = []
    for record in (tuned_record, scratch_record):
        rate = recovery_rate(record.mean_si_sdri, original.mean_si_sdri) if original.mean_si_sdri > 0 else None
        rows.append(_row(record, epochs=epochs, recovery=rate))
    rows[1]["epochs_to_match"] = needed
    rows[0]["epochs_to_match"] = None
    return DataFrame.from_records(rows)


def efficiency(
    model: ModelGraph, pruned: ModelGraph, input_length: int, runs: int, seed: Optional[int] = 0
) -> DataFrame:
    """Mean wall-clock time of the original and pruned models for inference and for a training step."""
    rows = []
    for mode in TIMING_MODES:
        original_ms = timing_harness(model, input_length, runs, mode, seed=seed)
        pruned_ms = timing_harness(pruned, input_length, runs, mode, seed=seed)
        rows.append(
            {
                "mode": mode,
                "original_ms": original_ms,
                "pruned_ms": pruned_ms,
                "speedup": speedup(original_ms, pruned_ms),
                "original_macs": profile(model, input_length).total_macs,
                "pruned_macs": profile(pruned, input_length).total_macs,
            }
        )
    return DataFrame.from_records(rows)


def over_seeds(study: Callable[[int], DataFrame], seeds: Sequence[int]) -> DataFrame:
    """Runs `study(seed)` for every seed and stacks the tables under a leading `seed` column."""
    if not seeds:
        raise InvalidArgumentError("At least one seed is needed")
    frames = []
    for seed in seeds:
        frame = study(seed)
        frame.insert(0, "seed", seed)
        frames.append(frame)
        log.info("Finished seed {}".format(seed))
    return concat(frames, ignore_index=True)


def stepwise_wins(joint: DataFrame) -> int:
    """Number of seeds at which the step-wise pipeline scores at least the joint one."""
    scores = joint.pivot(index="seed", columns="Method", values="SI-SDRi")
    return int((scores["stepwise"] >= scores["joint"]).sum())


def kept_fraction_spread(iterations: DataFrame) -> Dict[int, float]:
    """Per seed, the largest difference in kept fraction between any two iteration counts."""
    kept = iterations.groupby("seed")["kept_fraction"]
    return {int(seed): float(spread) for seed, spread in (kept.max() - kept.min()).items()}
