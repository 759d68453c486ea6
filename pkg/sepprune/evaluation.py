import json
import logging
from concurrent.futures import ThreadPoolExecutor
from typing import Any, Callable, Dict, List, NamedTuple, Optional, Sequence, Tuple

import numpy as np
from pandas import DataFrame

from sepprune.config import TrainConfig
from sepprune.core.errors import InvalidArgumentError
from sepprune.core.models import ModelGraph
from sepprune.data import AudioBatch, AudioDataset
from sepprune.losses import improvements
from sepprune.profiler import MAC_NOTE, profile
from sepprune.pruner import KeepSpec, prune
from sepprune.sepnet import forward
from sepprune.strategies import MaskStrategy
from sepprune.training import finetune

log = logging.getLogger("root")

COMPARISON_COLUMNS = ["Method", "Params", "MACs", "SDRi", "SI-SDRi"]

# Maps a one-utterance batch to its [C, T] source estimates.
Separator = Callable[[AudioBatch], np.ndarray]


class EvalRecord(object):
    """Per-utterance SDRi and SI-SDRi of one model on one split, with the model's profiled cost."""

    def __init__(self, name: str, sdri: Sequence[float], si_sdri: Sequence[float], params: int, macs: int) -> None:
        if len(sdri) != len(si_sdri):
            raise InvalidArgumentError("Per-utterance score lists differ in length")
        self.name = name
        self.sdri = [float(value) for value in sdri]
        self.si_sdri = [float(value) for value in si_sdri]
        self.params = params
        self.macs = macs

    @property
    def mean_sdri(self) -> float:
        return float(np.mean(self.sdri))

    @property
    def mean_si_sdri(self) -> float:
        return float(np.mean(self.si_sdri))

    def summary_row(self) -> Dict[str, Any]:
        return {
            "Method": self.name,
            "Params": self.params,
            "MACs": self.macs,
            "SDRi": round(self.mean_sdri, 2),
            "SI-SDRi": round(self.mean_si_sdri, 2),
        }

    def to_dict(self) -> Dict[str, Any]:
        return {
            "name": self.name,
            "params": self.params,
            "macs": self.macs,
            "mean_sdri": self.mean_sdri,
            "mean_si_sdri": self.mean_si_sdri,
            "sdri": self.sdri,
            "si_sdri": self.si_sdri,
            "note": MAC_NOTE,
        }

    @staticmethod
    def from_dict(values: Dict[str, Any]) -> "EvalRecord":
        return EvalRecord(values["name"], values["sdri"], values["si_sdri"], values["params"], values["macs"])

    def to_frame(self) -> DataFrame:
        return DataFrame(
            {"utterance": list(range(len(self.sdri))), "sdri": self.sdri, "si_sdri": self.si_sdri},
            columns=["utterance", "sdri", "si_sdri"],
        )

    def to_json(self, path: str) -> None:
        with open(path, "w") as f:
            json.dump(self.to_dict(), f, indent=2, sort_keys=True)

    def to_csv(self, path: str) -> None:
        self.to_frame().to_csv(path, index=False)

    def __repr__(self) -> str:
        return "<EvalRecord {} SDRi={:.2f} SI-SDRi={:.2f} n={}>".format(
            self.name, self.mean_sdri, self.mean_si_sdri, len(self.sdri)
        )


def model_separator(model: ModelGraph) -> Separator:
    def separate(batch: AudioBatch) -> np.ndarray:
        return forward(model, batch.mixture).values[0]

    return separate


def score_utterance(batch: AudioBatch, estimates: np.ndarray) -> Tuple[float, float]:
    return improvements(batch.mixture[0, 0], batch.sources[0], estimates)


def evaluate(
    model: ModelGraph,
    dataset: AudioDataset,
    name: str = "model",
    workers: int = 1,
    separator: Optional[Separator] = None,
) -> EvalRecord:
    """
    Scores every utterance of `dataset`. With workers > 1 utterances are spread over threads sharing the
    read-only model; scores are always listed in dataset order.

    :param separator: produces the estimates instead of the model, e.g. for oracle checks
    """
    if len(dataset) == 0:
        raise InvalidArgumentError("Cannot evaluate on an empty dataset")
    if workers < 1:
        raise InvalidArgumentError("workers must be >= 1, got {}".format(workers))
    separate = separator or model_separator(model)

    def score(index: int) -> Tuple[int, Tuple[float, float]]:
        batch = dataset[index]
        return index, score_utterance(batch, separate(batch))

    if workers == 1:
        results = [score(index) for index in range(len(dataset))]
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(score, range(len(dataset))))
    results.sort(key=lambda result: result[0])

    report = profile(model, dataset[0].length)
    record = EvalRecord(
        name,
        [scores[0] for _, scores in results],
        [scores[1] for _, scores in results],
        report.total_params,
        report.total_macs,
    )
    log.info("Evaluated {}".format(record))
    return record


class MethodResult(NamedTuple):
    label: str
    masks: Dict[int, np.ndarray]
    model: ModelGraph
    record: EvalRecord


class Comparison(object):
    def __init__(self, original: EvalRecord, methods: List[MethodResult]) -> None:
        self.original = original
        self.methods = methods

    def to_frame(self) -> DataFrame:
        rows = [self.original.summary_row()] + [method.record.summary_row() for method in self.methods]
        return DataFrame.from_records(rows, columns=COMPARISON_COLUMNS)

    def to_csv(self, path: str) -> None:
        self.to_frame().to_csv(path, index=False)

    def method(self, label: str) -> MethodResult:
        for method in self.methods:
            if method.label == label:
                return method
        raise InvalidArgumentError("No method '{}' in comparison".format(label))


def compare_methods(
    model: ModelGraph,
    strategies: Sequence[MaskStrategy],
    train_set: AudioDataset,
    val_set: AudioDataset,
    test_set: AudioDataset,
    config: TrainConfig,
    keep: Optional[KeepSpec] = None,
    seed: int = 0,
    workers: int = 1,
    finetune_epochs: Optional[int] = None,
) -> Comparison:
    """
    Prunes `model` with every strategy, fine-tunes each result and evaluates it next to the unpruned model.
    Strategies run in order; when `keep` is None every strategy after the first prunes to the kept counts of the
    first, so all arms are compared at matched sparsity.
    """
    if not strategies:
        raise InvalidArgumentError("Nothing to compare: no strategies given")
    original = evaluate(model, test_set, "original", workers)
    methods = []  # type: List[MethodResult]
    for strategy in strategies:
        masks = strategy.generate(model, train_set, keep, seed)
        if keep is None:
            keep = MaskStrategy.matching(masks)
        pruned, _ = prune(model, masks)
        tuned = finetune(pruned, train_set, val_set, config, finetune_epochs).model
        record = evaluate(tuned, test_set, strategy.label, workers)
        methods.append(MethodResult(strategy.label, masks, tuned, record))
    return Comparison(original, methods)
