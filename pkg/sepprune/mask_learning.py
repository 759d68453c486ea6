"""
Differentiable channel-mask search.

Every dependency group gets a pair of logits per channel (keep, drop). A training step perturbs them with Gumbel
noise, turns them into a per-channel keep probability with a tempered two-class softmax, thresholds that
probability into a binary mask and multiplies the mask into the group's features. The threshold's gradient is
the upstream gradient clipped to [-1, 1]. Only the logits are updated, by plain gradient descent; the model's
weights stay frozen.
"""
import logging
import os
import warnings
from collections import OrderedDict
from typing import Dict, Iterator, List, Mapping, Optional, Sequence, Union

import numpy as np
from tqdm import tqdm

import sepprune.core.functional as F
from sepprune.core.autodiff import TensorNode, Tape
from sepprune.core.errors import InvalidArgumentError
from sepprune.core.models import ModelGraph
from sepprune.data import AudioBatch, AudioDataset
from sepprune.losses import pit_neg_sisdr_loss
from sepprune.sepnet import forward

log = logging.getLogger("root")

DEFAULT_THRESHOLD = 0.7
DEFAULT_TEMPERATURE = 1.0
DEFAULT_ITERATIONS = 500
DEFAULT_MASK_LR = 0.1


class EmptyMaskGroupWarning(UserWarning):
    pass


class TemperatureSchedule(object):
    """Constant temperature, or a linear anneal from `start` to `end` over the search."""

    CONSTANT = "constant"
    LINEAR = "linear"

    def __init__(self, kind: str = CONSTANT, start: float = DEFAULT_TEMPERATURE, end: Optional[float] = None) -> None:
        if kind not in (self.CONSTANT, self.LINEAR):
            raise InvalidArgumentError("Unknown temperature schedule '{}'".format(kind))
        end = start if end is None else end
        if start <= 0 or end <= 0:
            raise InvalidArgumentError("Temperatures must be positive, got {} -> {}".format(start, end))
        self.kind = kind
        self.start = start
        self.end = end if kind == self.LINEAR else start

    @staticmethod
    def constant(temperature: float = DEFAULT_TEMPERATURE) -> "TemperatureSchedule":
        return TemperatureSchedule(TemperatureSchedule.CONSTANT, temperature)

    @staticmethod
    def linear(start: float = 2.0, end: float = 0.5) -> "TemperatureSchedule":
        return TemperatureSchedule(TemperatureSchedule.LINEAR, start, end)

    def at(self, step: int, total: int) -> float:
        if self.kind == self.CONSTANT or total <= 1:
            return self.start
        return self.start + (self.end - self.start) * step / (total - 1)

    def __repr__(self) -> str:
        if self.kind == self.CONSTANT:
            return "constant({})".format(self.start)
        return "linear({}->{})".format(self.start, self.end)


class GumbelChannelMask(object):
    """Keep/drop logits [C, 2] of one dependency group, with the latest keep probabilities and binary mask."""

    def __init__(self, group_id: int, logits: np.ndarray, temperature: float, threshold: float) -> None:
        logits = np.asarray(logits, dtype=np.float32)
        if logits.ndim != 2 or logits.shape[1] != 2 or logits.shape[0] < 1:
            raise InvalidArgumentError("Mask logits must have shape [C, 2], got {}".format(logits.shape))
        self.group_id = group_id
        self.logits = TensorNode(logits, requires_grad=True, name="mask{}.logits".format(group_id))
        self.temperature = temperature
        self.threshold = threshold
        self.probabilities = self.keep_probabilities()
        self.binary = (self.probabilities > threshold).astype(np.float32)

    @property
    def size(self) -> int:
        return self.logits.shape[0]

    def keep_probabilities(self) -> np.ndarray:
        """Noise-free keep probabilities: the plain softmax of the logits."""
        logits = self.logits.values.astype(np.float64)
        return np.exp(logits[:, 0] - np.logaddexp(logits[:, 0], logits[:, 1]))

    def copy(self) -> "GumbelChannelMask":
        mask = GumbelChannelMask(self.group_id, self.logits.values.copy(), self.temperature, self.threshold)
        mask.probabilities = self.probabilities.copy()
        mask.binary = self.binary.copy()
        return mask

    def __repr__(self) -> str:
        return "<GumbelChannelMask group={} size={} kept={}>".format(self.group_id, self.size, int(self.binary.sum()))


class MaskSet(object):
    """One GumbelChannelMask per dependency group of a model, plus the random stream that drives sampling."""

    def __init__(
        self,
        masks: Sequence[GumbelChannelMask],
        threshold: float,
        schedule: TemperatureSchedule,
        seed: int,
    ) -> None:
        self.masks = OrderedDict((mask.group_id, mask) for mask in masks)  # type: Dict[int, GumbelChannelMask]
        self.threshold = threshold
        self.schedule = schedule
        self.seed = seed
        self.rng = np.random.default_rng(seed)

    def __len__(self) -> int:
        return len(self.masks)

    def __iter__(self) -> Iterator[GumbelChannelMask]:
        return iter(self.masks.values())

    def __getitem__(self, group_id: int) -> GumbelChannelMask:
        return self.masks[group_id]

    @property
    def group_ids(self) -> List[int]:
        return list(self.masks)

    def binary_masks(self) -> Dict[int, np.ndarray]:
        return {group_id: mask.binary.copy() for group_id, mask in self.masks.items()}

    def logits(self) -> Dict[int, np.ndarray]:
        return {group_id: mask.logits.values.copy() for group_id, mask in self.masks.items()}

    def copy(self) -> "MaskSet":
        masks = MaskSet([mask.copy() for mask in self], self.threshold, self.schedule, self.seed)
        masks.rng = np.random.default_rng(self.seed)
        return masks

    def with_threshold(self, threshold: float) -> "MaskSet":
        """A copy using another threshold; call finalize_masks on it to get the corresponding binary masks."""
        _check_threshold(threshold)
        masks = self.copy()
        masks.threshold = threshold
        for mask in masks:
            mask.threshold = threshold
        return masks

    def check_model(self, model: ModelGraph) -> None:
        expected = {group.group_id: group.size for group in model.prunable_groups}
        actual = {group_id: mask.size for group_id, mask in self.masks.items()}
        if expected != actual:
            raise InvalidArgumentError("Mask set {} does not match the model's groups {}".format(actual, expected))


def _check_threshold(threshold: float) -> None:
    if not 0.0 < threshold < 1.0:
        raise InvalidArgumentError("Threshold must lie in (0, 1), got {}".format(threshold))


def init_masks(
    model: ModelGraph,
    threshold: float = DEFAULT_THRESHOLD,
    temperature: float = DEFAULT_TEMPERATURE,
    seed: int = 0,
    schedule: Optional[TemperatureSchedule] = None,
) -> MaskSet:
    """Equal keep and drop logits for every channel of every prunable group, so every keep probability is 0.5."""
    _check_threshold(threshold)
    if temperature <= 0:
        raise InvalidArgumentError("Temperature must be positive, got {}".format(temperature))
    groups = model.prunable_groups
    if not groups:
        raise InvalidArgumentError("Model has no prunable dependency groups")
    schedule = schedule or TemperatureSchedule.constant(temperature)
    masks = [
        GumbelChannelMask(group.group_id, np.zeros((group.size, 2)), schedule.start, threshold) for group in groups
    ]
    log.debug("Initialized {} channel masks ({} channels)".format(len(masks), sum(mask.size for mask in masks)))
    return MaskSet(masks, threshold, schedule, seed)


def gumbel_noise(rng: np.random.Generator, shape: Sequence[int]) -> np.ndarray:
    """Standard Gumbel draws -log(-log(U)); U == 0 is redrawn."""
    uniforms = rng.random(shape)
    zeros = uniforms == 0.0
    while np.any(zeros):
        uniforms[zeros] = rng.random(int(zeros.sum()))
        zeros = uniforms == 0.0
    return -np.log(-np.log(uniforms))


def sample_soft(mask: GumbelChannelMask, rng: np.random.Generator, temperature: Optional[float] = None) -> TensorNode:
    """Keep probabilities [C] under fresh Gumbel noise; differentiable with respect to the mask's logits."""
    temperature = mask.temperature if temperature is None else temperature
    if temperature <= 0:
        raise InvalidArgumentError("Temperature must be positive, got {}".format(temperature))
    probabilities = F.gumbel_keep_probability(mask.logits, gumbel_noise(rng, mask.logits.shape), temperature)
    mask.probabilities = probabilities.values.astype(np.float64)
    return probabilities


def draw_keep_probabilities(
    logits: np.ndarray, temperature: float, rng: np.random.Generator, draws: int
) -> np.ndarray:
    """`draws` independent samples of the keep probabilities of a [C, 2] logit array, as [draws, C]."""
    logits = np.asarray(logits, dtype=np.float64)
    scores = (logits[None] + gumbel_noise(rng, (draws,) + logits.shape)) / temperature
    return np.exp(scores[..., 0] - np.logaddexp(scores[..., 0], scores[..., 1]))


def sample_binary_masks(masks: MaskSet, temperature: Optional[float] = None) -> Dict[int, TensorNode]:
    """Samples and binarizes every mask of the set with the set's random stream."""
    binary = {}
    for mask in masks:
        probabilities = sample_soft(mask, masks.rng, temperature)
        binary[mask.group_id] = F.binarize_ste(probabilities, mask.threshold)
        mask.binary = binary[mask.group_id].values.copy()
    return binary


def masked_forward_loss(
    model: ModelGraph,
    masks: Union[MaskSet, Mapping[int, Union[TensorNode, np.ndarray]]],
    batch: AudioBatch,
    params: Optional[Mapping[str, TensorNode]] = None,
    temperature: Optional[float] = None,
) -> TensorNode:
    """
    Negative permutation-invariant SI-SDR of the model run with channel masks. A MaskSet is sampled and binarized
    first; a plain mapping of group_id to mask is applied as given.
    """
    if isinstance(masks, MaskSet):
        masks.check_model(model)
        masks = sample_binary_masks(masks, temperature)
    estimates = forward(model, batch.mixture, masks=masks, params=params)
    return pit_neg_sisdr_loss(batch.sources.astype(estimates.dtype), estimates)


def descend(masks: MaskSet, lr: float) -> None:
    """One plain gradient-descent step on every mask's logits."""
    for mask in masks:
        if mask.logits.grad is not None:
            mask.logits.values -= (lr * mask.logits.grad).astype(mask.logits.dtype)
        mask.logits.zero_grad()


def learn_masks(
    model: ModelGraph,
    masks: MaskSet,
    dataset: AudioDataset,
    iterations: int = DEFAULT_ITERATIONS,
    lr: float = DEFAULT_MASK_LR,
    seed: Optional[int] = None,
    progress: bool = False,
) -> MaskSet:
    """
    Searches masks with the model frozen, cycling through `dataset` in order, and returns a new, finalized MaskSet.
    The input mask set and the model are left untouched.
    """
    if len(dataset) == 0:
        raise InvalidArgumentError("Cannot learn masks on an empty dataset")
    if iterations < 0:
        raise InvalidArgumentError("iterations must be >= 0, got {}".format(iterations))
    if lr <= 0:
        raise InvalidArgumentError("Mask learning rate must be positive, got {}".format(lr))
    masks.check_model(model)
    learned = masks.copy()
    if seed is not None:
        learned.seed = seed
        learned.rng = np.random.default_rng(seed)
    if iterations == 0:
        return learned

    log.info("Learning channel masks for {} iterations (lr={}, seed={})".format(iterations, lr, learned.seed))
    for step in tqdm(range(iterations), desc="mask search", disable=not progress):
        batch = dataset[step % len(dataset)]
        temperature = learned.schedule.at(step, iterations)
        with Tape() as tape:
            loss = masked_forward_loss(model, learned, batch, temperature=temperature)
            tape.backward(loss)
        descend(learned, lr)
        log.debug("Mask step {}: loss {:.4f}, tau {:.3f}".format(step, loss.item(), temperature))

    finalize_masks(learned)
    log.info("Mask search done, kept {} of {} channels".format(*_kept_totals(learned.binary_masks())))
    return learned


def finalize_masks(masks: MaskSet) -> Dict[int, np.ndarray]:
    """
    Thresholds the noise-free keep probabilities of every mask. A group that would lose every channel keeps its
    most probable one.
    """
    binary = {}
    for mask in masks:
        probabilities = mask.keep_probabilities()
        kept = (probabilities > mask.threshold).astype(np.float32)
        if not kept.any():
            winner = int(np.argmax(probabilities))
            kept[winner] = 1.0
            message = "Mask group {} would be empty at threshold {}; keeping channel {}".format(
                mask.group_id, mask.threshold, winner
            )
            warnings.warn(message, EmptyMaskGroupWarning)
            log.warning(message)
        mask.probabilities = probabilities
        mask.binary = kept
        binary[mask.group_id] = kept.copy()
    return binary


def kept_counts(binary_masks: Mapping[int, np.ndarray]) -> Dict[int, int]:
    return {group_id: int(np.count_nonzero(mask)) for group_id, mask in binary_masks.items()}


def _kept_totals(binary_masks: Mapping[int, np.ndarray]) -> List[int]:
    return [sum(kept_counts(binary_masks).values()), sum(mask.size for mask in binary_masks.values())]


def kept_fraction(binary_masks: Mapping[int, np.ndarray]) -> float:
    kept, total = _kept_totals(binary_masks)
    return kept / total


def logits_path(path: str) -> str:
    return os.path.splitext(path)[0] + ".logits.npy"


def save_masks(masks: MaskSet, path: str) -> None:
    """
    Writes one line per group (id, size, threshold, kept indices, keep probabilities to 6 decimals) and a
    `.logits.npy` sidecar with the raw logits of all groups stacked in group order.
    """
    lines = [
        "# threshold={!r} schedule={} start={!r} end={!r} seed={}".format(
            masks.threshold, masks.schedule.kind, masks.schedule.start, masks.schedule.end, masks.seed
        )
    ]
    for mask in masks:
        kept = np.flatnonzero(mask.binary)
        lines.append(
            "group={} size={} threshold={!r} kept={} pi={}".format(
                mask.group_id,
                mask.size,
                mask.threshold,
                ",".join(str(i) for i in kept),
                ",".join("{:.6f}".format(p) for p in mask.probabilities),
            )
        )
    with open(path, "w") as f:
        f.write("\n".join(lines) + "\n")
    np.save(logits_path(path), np.concatenate([mask.logits.values for mask in masks]).astype(np.float32))
    log.debug("Saved {} masks to {}".format(len(masks), path))


def _fields(line: str) -> Dict[str, str]:
    return dict(field.split("=", 1) for field in line.split())


def load_masks(path: str, model: ModelGraph) -> MaskSet:
    with open(path) as f:
        lines = [line.strip() for line in f if line.strip()]
    if not lines or not lines[0].startswith("#"):
        raise InvalidArgumentError("{} is not a mask file".format(path))
    header = _fields(lines[0][1:])
    schedule = TemperatureSchedule(header["schedule"], float(header["start"]), float(header["end"]))
    threshold = float(header["threshold"])

    records = [_fields(line) for line in lines[1:]]
    sizes = [int(record["size"]) for record in records]
    sidecar = logits_path(path)
    if os.path.exists(sidecar):
        stacked = np.load(sidecar)
        if stacked.shape != (sum(sizes), 2):
            raise InvalidArgumentError("{} does not match the groups listed in {}".format(sidecar, path))
        logits = np.split(stacked, np.cumsum(sizes)[:-1])
    else:
        logits = [np.zeros((size, 2), dtype=np.float32) for size in sizes]

    masks = []
    for record, size, group_logits in zip(records, sizes, logits):
        mask = GumbelChannelMask(int(record["group"]), group_logits, schedule.start, float(record["threshold"]))
        binary = np.zeros(size, dtype=np.float32)
        if record["kept"]:
            binary[[int(i) for i in record["kept"].split(",")]] = 1.0
        mask.binary = binary
        mask.probabilities = np.array([float(p) for p in record["pi"].split(",")])
        masks.append(mask)
    mask_set = MaskSet(masks, threshold, schedule, int(header["seed"]))
    mask_set.check_model(model)
    return mask_set
