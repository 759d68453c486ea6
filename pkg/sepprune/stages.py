"""
Pipeline stages. Each stage reads its inputs from the run's ArtifactStore, writes its outputs there together
with a `<stage>.manifest.json`, and returns the names it wrote.

Registry contents used by the stages:
    config    RunConfig
    store     ArtifactStore
    seed      int, the run seed
    splits    Splits of the train/val/test datasets, built on first use
    options   dict of per-invocation options (checkpoint, length)
"""
import logging
import os
from typing import Any, Callable, Dict, List, Optional, Tuple

from numpy.random import Generator

from sepprune.ablation import (
    Splits,
    efficiency,
    iteration_sweep,
    joint_vs_stepwise,
    kept_fraction_spread,
    over_seeds,
    recovery_study,
    stepwise_wins,
    threshold_sweep,
)
from sepprune.config import RunConfig
from sepprune.core.checkpoint import load_checkpoint, read_checkpoint, save_checkpoint
from sepprune.core.datastore import ArtifactStore
from sepprune.core.errors import InvalidArgumentError, NumericFailureError
from sepprune.core.models import ModelGraph
from sepprune.core.pipeline import PipelineComponent
from sepprune.core.registry import Registry
from sepprune.data import SPLITS, AudioDataset, DatasetManifest, make_dataset
from sepprune.evaluation import MethodResult, compare_methods, evaluate
from sepprune.mask_learning import (
    MaskSet,
    TemperatureSchedule,
    init_masks,
    kept_counts,
    learn_masks,
    load_masks,
    save_masks,
)
from sepprune.profiler import profile
from sepprune.pruner import group_summary, predicted_parameter_count, prune
from sepprune.sepnet import build_toy_sepnet
from sepprune.strategies import MagnitudeMaskStrategy, MaskStrategy, RandomMaskStrategy
from sepprune.training import finetune, train

log = logging.getLogger("root")

MODEL = "model.ckpt"
TRAIN_LOG = "train_log.csv"
MASKS = "masks.txt"
PRUNED = "pruned.ckpt"
FINETUNED = "finetuned.ckpt"
FINETUNE_LOG = "finetune_log.csv"
EVAL_JSON = "eval.json"
EVAL_CSV = "eval.csv"
COMPARISON = "comparison.csv"
PROFILE_CSV = "profile.csv"
PROFILE_JSON = "profile.json"


def schedule_of(config: RunConfig) -> TemperatureSchedule:
    if config.mask.schedule == TemperatureSchedule.LINEAR:
        return TemperatureSchedule.linear(config.mask.temperature, config.mask.temperature_end)
    return TemperatureSchedule.constant(config.mask.temperature)


def initial_masks(model: ModelGraph, config: RunConfig, seed: Optional[int] = None) -> MaskSet:
    seed = config.mask.seed if seed is None else seed
    return init_masks(model, config.mask.threshold, config.mask.temperature, seed, schedule_of(config))


def data_file(config: RunConfig, split: str) -> str:
    """Manifest file of one split, keyed by the [data] section so a changed section never reuses old utterances."""
    return "data_{}_{}.txt".format(config.data.fingerprint(), split)


def build_splits(config: RunConfig, store: ArtifactStore) -> Splits:
    """Dataset manifests are written once per [data] section and output directory, and reloaded afterwards."""
    created = []  # type: List[DatasetManifest]

    def compute(split: str) -> Callable[[], DatasetManifest]:
        def make() -> DatasetManifest:
            if not created:
                created.extend(
                    make_dataset(
                        config.data.n_train,
                        config.data.n_val,
                        config.data.n_test,
                        config.data.base_seed,
                        config.data.length,
                        config.data.sample_rate,
                        config.data.source_snr_range,
                        config.data.noise_snr_range,
                    )
                )
            return created[SPLITS.index(split)]

        return make

    manifests = [
        store.get_or_compute(
            data_file(config, split), compute(split), lambda manifest, path: manifest.save(path), DatasetManifest.load
        )
        for split in SPLITS
    ]
    return Splits(*(AudioDataset(manifest) for manifest in manifests))


class Stage(PipelineComponent):
    name = ""
    # artifact name -> stage that produces it
    inputs = {}  # type: Dict[str, str]
    outputs = ()  # type: Tuple[str, ...]

    def all_outputs(self) -> List[str]:
        return list(self.outputs) + ["{}.manifest.json".format(self.name)]

    def run(self, registry: Registry, random: Generator, *args: Any) -> Tuple[str, ...]:
        store = registry.get("store")  # type: ArtifactStore
        config = registry.get("config")  # type: RunConfig
        for artifact, producer in self.inputs.items():
            store.require(artifact, self.name, producer)
        store.check_writable(self.all_outputs())
        extra = self.execute(registry, store, config) or {}
        if "splits" in registry:
            extra["data_manifests"] = [data_file(config, split) for split in SPLITS]
        seeds = {
            "run": registry.get("seed"),
            "model": config.model.seed,
            "data": config.data.base_seed,
            "train": config.train.seed,
            "mask": config.mask.seed,
        }
        store.write_manifest(self.name, config.config_hash(), seeds, self.outputs, extra)
        return tuple(self.outputs)

    def execute(self, registry: Registry, store: ArtifactStore, config: RunConfig) -> Optional[Dict[str, Any]]:
        raise NotImplementedError

    @staticmethod
    def splits(registry: Registry) -> Splits:
        return registry.get_or_register("splits", lambda: build_splits(registry.get("config"), registry.get("store")))

    @staticmethod
    def options(registry: Registry) -> Dict[str, Any]:
        return registry.get("options", {})

    def __str__(self) -> str:
        return "{}({})".format(self.__class__.__name__, self.name)


class ProfileStage(Stage):
    name = "profile"
    outputs = (PROFILE_CSV, PROFILE_JSON)

    def execute(self, registry: Registry, store: ArtifactStore, config: RunConfig) -> Dict[str, Any]:
        options = self.options(registry)
        checkpoint = options.get("checkpoint")
        if checkpoint:
            if not os.path.isfile(checkpoint):
                raise InvalidArgumentError("Checkpoint {} does not exist".format(checkpoint))
            model = load_checkpoint(checkpoint)
        else:
            model = build_toy_sepnet(**config.model.builder_kwargs())
        length = options.get("length") or config.data.length
        report = profile(model, length)
        report.to_csv(store.path(PROFILE_CSV))
        report.to_json(store.path(PROFILE_JSON))
        summary = report.summary(checkpoint or "toy-sepnet")
        log.info("Profile: {}".format(summary))
        return {"input_length": length, "summary": summary}


class TrainStage(Stage):
    name = "train"
    outputs = (MODEL, TRAIN_LOG)

    def execute(self, registry: Registry, store: ArtifactStore, config: RunConfig) -> Dict[str, Any]:
        splits = self.splits(registry)
        model = build_toy_sepnet(**config.model.builder_kwargs())
        result = train(model, splits.train, splits.val, config.train, progress=config.run.progress)
        metadata = {
            "stage": self.name,
            "config_hash": config.config_hash(),
            "best_epoch": result.best_epoch,
            "best_val_sisdri": result.best_val_sisdri,
        }
        save_checkpoint(result.model, store.path(MODEL), metadata, result.optimizer)
        result.log.to_csv(store.path(TRAIN_LOG))
        return {"best_epoch": result.best_epoch, "lr_halvings": result.halvings}


class LearnMaskStage(Stage):
    name = "learn-mask"
    inputs = {MODEL: "train"}
    outputs = (MASKS, "masks.logits.npy")

    def execute(self, registry: Registry, store: ArtifactStore, config: RunConfig) -> Dict[str, Any]:
        model = load_checkpoint(store.path(MODEL))
        masks = initial_masks(model, config)
        learned = learn_masks(
            model,
            masks,
            self.splits(registry).train,
            config.mask.iterations,
            config.mask.lr,
            progress=config.run.progress,
        )
        save_masks(learned, store.path(MASKS))
        return {"kept": {str(group_id): count for group_id, count in kept_counts(learned.binary_masks()).items()}}


class PruneStage(Stage):
    name = "prune"
    inputs = {MODEL: "train", MASKS: "learn-mask"}
    outputs = (PRUNED,)

    def execute(self, registry: Registry, store: ArtifactStore, config: RunConfig) -> Dict[str, Any]:
        model = load_checkpoint(store.path(MODEL))
        masks = load_masks(store.path(MASKS), model)
        pruned, blueprint = prune(model, masks)
        predicted = predicted_parameter_count(model, blueprint.kept_counts())
        if predicted != pruned.parameter_count():
            raise NumericFailureError(
                "Pruned model has {} parameters, the builder config predicts {}".format(
                    pruned.parameter_count(), predicted
                )
            )
        metadata = {"stage": self.name, "config_hash": config.config_hash(), "blueprint": blueprint.describe()}
        save_checkpoint(pruned, store.path(PRUNED), metadata)
        groups = group_summary(model, masks)
        for row in groups:
            log.info("Group {group} ({label}): kept {kept} of {size} channels".format(**row))
        return {"params_before": model.parameter_count(), "params_after": predicted, "groups": groups}


class FinetuneStage(Stage):
    name = "finetune"
    inputs = {PRUNED: "prune"}
    outputs = (FINETUNED, FINETUNE_LOG)

    def execute(self, registry: Registry, store: ArtifactStore, config: RunConfig) -> Dict[str, Any]:
        pruned = read_checkpoint(store.path(PRUNED))
        splits = self.splits(registry)
        result = finetune(pruned.model, splits.train, splits.val, config.train, progress=config.run.progress)
        metadata = dict(pruned.metadata)
        metadata.update({"stage": self.name, "config_hash": config.config_hash(), "best_epoch": result.best_epoch})
        save_checkpoint(result.model, store.path(FINETUNED), metadata, result.optimizer)
        result.log.to_csv(store.path(FINETUNE_LOG))
        return {"best_epoch": result.best_epoch}


class EvalStage(Stage):
    """
    Evaluates the fine-tuned model and compares it with the original and with random and magnitude pruning at
    the same per-group kept counts.
    """

    name = "eval"
    inputs = {MODEL: "train", MASKS: "learn-mask", FINETUNED: "finetune"}
    outputs = (EVAL_JSON, EVAL_CSV, COMPARISON)

    def execute(self, registry: Registry, store: ArtifactStore, config: RunConfig) -> Dict[str, Any]:
        model = load_checkpoint(store.path(MODEL))
        masks = load_masks(store.path(MASKS), model)
        finetuned = load_checkpoint(store.path(FINETUNED))
        splits = self.splits(registry)
        workers = config.run.workers

        record = evaluate(finetuned, splits.test, "sepprune", workers)
        record.to_json(store.path(EVAL_JSON))
        record.to_csv(store.path(EVAL_CSV))

        baselines = [RandomMaskStrategy(), MagnitudeMaskStrategy()]  # type: List[MaskStrategy]
        comparison = compare_methods(
            model,
            baselines,
            splits.train,
            splits.val,
            splits.test,
            config.train,
            keep=MaskStrategy.matching(masks.binary_masks()),
            seed=config.mask.seed,
            workers=workers,
        )
        comparison.methods.append(MethodResult("sepprune", masks.binary_masks(), finetuned, record))
        comparison.to_csv(store.path(COMPARISON))
        return {"mean_sdri": record.mean_sdri, "mean_si_sdri": record.mean_si_sdri}


class AblateStage(Stage):
    """
    Runs the ablation studies. The threshold sweep, recovery and efficiency tables use the run's learned masks;
    the iteration and joint-vs-stepwise studies start a fresh mask search for every `[ablation] seeds` entry.
    """

    name = "ablate"
    inputs = {MODEL: "train"}
    outputs = (
        "ablation_threshold.csv",
        "ablation_iterations.csv",
        "ablation_joint.csv",
        "ablation_recovery.csv",
        "ablation_efficiency.csv",
    )

    def execute(self, registry: Registry, store: ArtifactStore, config: RunConfig) -> Dict[str, Any]:
        model = load_checkpoint(store.path(MODEL))
        splits = self.splits(registry)
        workers = config.run.workers
        seeds = config.ablation.seeds
        learned = self._learned(store, model, initial_masks(model, config), splits, config)

        store.write_frame(
            "ablation_threshold.csv",
            threshold_sweep(model, learned, config.ablation.thresholds, splits, config.train, workers),
        )
        iterations = over_seeds(
            lambda seed: iteration_sweep(
                model,
                initial_masks(model, config, seed),
                config.ablation.iterations,
                splits,
                config.train,
                config.mask.lr,
                workers,
            ),
            seeds,
        )
        store.write_frame("ablation_iterations.csv", iterations)
        joint = over_seeds(
            lambda seed: joint_vs_stepwise(
                model,
                initial_masks(model, config, seed),
                config.mask.iterations,
                splits,
                config.train,
                config.mask.lr,
                workers,
            ),
            seeds,
        )
        store.write_frame("ablation_joint.csv", joint)

        pruned, _ = prune(model, learned)
        store.write_frame(
            "ablation_recovery.csv",
            recovery_study(
                model,
                pruned,
                splits,
                config.train,
                config.train.finetune_epochs,
                config.ablation.scratch_max_epochs,
                config.model.seed + 1,
                workers,
            ),
        )
        store.write_frame(
            "ablation_efficiency.csv", efficiency(model, pruned, config.data.length, config.ablation.timing_runs)
        )

        wins = stepwise_wins(joint)
        spread = kept_fraction_spread(iterations)
        log.info("Step-wise at least as good as joint at {} of {} seeds".format(wins, len(seeds)))
        log.info("Largest kept-fraction spread over iteration counts: {:.3f}".format(max(spread.values())))
        return {
            "thresholds": list(config.ablation.thresholds),
            "iterations": list(config.ablation.iterations),
            "seeds": list(seeds),
            "stepwise_wins": wins,
            "kept_fraction_spread": {str(seed): value for seed, value in spread.items()},
        }

    @staticmethod
    def _learned(
        store: ArtifactStore, model: ModelGraph, initial: MaskSet, splits: Splits, config: RunConfig
    ) -> MaskSet:
        if store.exists(MASKS):
            log.info("Reusing learned masks from {}".format(store.path(MASKS)))
            return load_masks(store.path(MASKS), model)
        return learn_masks(model, initial, splits.train, config.mask.iterations, config.mask.lr)


STAGES = {
    stage.name: stage
    for stage in (ProfileStage, TrainStage, LearnMaskStage, PruneStage, FinetuneStage, EvalStage, AblateStage)
}
PIPELINE = ("train", "learn-mask", "prune", "finetune", "eval")


def stage_named(name: str) -> Stage:
    if name not in STAGES:
        raise InvalidArgumentError("Unknown stage '{}', expected one of {}".format(name, sorted(STAGES)))
    return STAGES[name]()

