import logging
from typing import Dict, Optional

import numpy as np

from sepprune.core.models import ModelGraph
from sepprune.data import AudioDataset
from sepprune.pruner import KeepSpec, random_mask
from sepprune.strategies.mask_strategy import MaskStrategy

log = logging.getLogger("root")


class RandomMaskStrategy(MaskStrategy):
    @property
    def label(self) -> str:
        return "random"

    def generate(
        self, model: ModelGraph, dataset: Optional[AudioDataset], keep: Optional[KeepSpec], seed: int
    ) -> Dict[int, np.ndarray]:
        masks = random_mask(model, self._require_keep(keep, self.label), seed)
        log.debug("Random masks with seed {} keep {}".format(seed, self.matching(masks)))
        return masks
