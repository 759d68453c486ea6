from abc import ABC, abstractmethod
from typing import Dict, Mapping, Optional

import numpy as np

from sepprune.core.errors import InvalidArgumentError
from sepprune.core.models import ModelGraph
from sepprune.data import AudioDataset
from sepprune.pruner import KeepSpec


class MaskStrategy(ABC):
    """
    One way of choosing which channels of every dependency group survive pruning. The comparison harness runs
    each strategy on the same model and prunes with the masks it returns.
    """

    @property
    @abstractmethod
    def label(self) -> str:
        pass

    @abstractmethod
    def generate(
        self, model: ModelGraph, dataset: Optional[AudioDataset], keep: Optional[KeepSpec], seed: int
    ) -> Dict[int, np.ndarray]:
        """
        Finalized binary masks, group_id -> [size] of 0/1.

        :param keep: kept fraction or per-group kept counts; strategies that choose their own sparsity ignore it
        """
        pass

    @staticmethod
    def matching(masks: Mapping[int, np.ndarray]) -> Dict[int, int]:
        """Per-group kept counts of `masks`, to run another strategy at the same sparsity."""
        return {group_id: int(np.count_nonzero(mask)) for group_id, mask in masks.items()}

    @staticmethod
    def _require_keep(keep: Optional[KeepSpec], label: str) -> KeepSpec:
        if keep is None:
            raise InvalidArgumentError("The {} strategy needs a keep fraction or kept counts".format(label))
        return keep

    def __str__(self) -> str:
        return self.label
