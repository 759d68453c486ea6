from typing import Dict, Optional

import numpy as np

from sepprune.core.models import ModelGraph
from sepprune.data import AudioDataset
from sepprune.pruner import KeepSpec, magnitude_mask
from sepprune.strategies.mask_strategy import MaskStrategy


class MagnitudeMaskStrategy(MaskStrategy):
    """Conventional L1 criterion: no data, no randomness."""

    @property
    def label(self) -> str:
        return "magnitude"

    def generate(
        self, model: ModelGraph, dataset: Optional[AudioDataset], keep: Optional[KeepSpec], seed: int
    ) -> Dict[int, np.ndarray]:
        return magnitude_mask(model, self._require_keep(keep, self.label))
