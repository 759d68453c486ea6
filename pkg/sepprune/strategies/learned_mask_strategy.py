import logging
from typing import Dict, Optional

import numpy as np

from sepprune.core.errors import InvalidArgumentError
from sepprune.core.models import ModelGraph
from sepprune.data import AudioDataset
from sepprune.mask_learning import (
    DEFAULT_ITERATIONS,
    DEFAULT_MASK_LR,
    DEFAULT_TEMPERATURE,
    DEFAULT_THRESHOLD,
    MaskSet,
    TemperatureSchedule,
    init_masks,
    learn_masks,
)
from sepprune.pruner import KeepSpec
from sepprune.strategies.mask_strategy import MaskStrategy

log = logging.getLogger("root")


class LearnedMaskStrategy(MaskStrategy):
    """
    Differentiable mask search on the frozen model. The threshold decides how many channels survive, so a
    requested keep fraction is ignored. The last learned MaskSet is kept for saving.
    """

    def __init__(
        self,
        threshold: float = DEFAULT_THRESHOLD,
        temperature: float = DEFAULT_TEMPERATURE,
        iterations: int = DEFAULT_ITERATIONS,
        lr: float = DEFAULT_MASK_LR,
        schedule: Optional[TemperatureSchedule] = None,
        progress: bool = False,
    ) -> None:
        self.threshold = threshold
        self.temperature = temperature
        self.iterations = iterations
        self.lr = lr
        self.schedule = schedule
        self.progress = progress
        self.learned = None  # type: Optional[MaskSet]

    @property
    def label(self) -> str:
        return "sepprune"

    def generate(
        self, model: ModelGraph, dataset: Optional[AudioDataset], keep: Optional[KeepSpec], seed: int
    ) -> Dict[int, np.ndarray]:
        if dataset is None:
            raise InvalidArgumentError("Mask learning needs a dataset")
        if keep is not None:
            log.debug("Learned masks choose their own sparsity, ignoring keep={}".format(keep))
        masks = init_masks(model, self.threshold, self.temperature, seed, self.schedule)
        self.learned = learn_masks(model, masks, dataset, self.iterations, self.lr, progress=self.progress)
        return self.learned.binary_masks()
