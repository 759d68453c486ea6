from sepprune.strategies.learned_mask_strategy import LearnedMaskStrategy
from sepprune.strategies.magnitude_mask_strategy import MagnitudeMaskStrategy
from sepprune.strategies.mask_strategy import MaskStrategy
from sepprune.strategies.random_mask_strategy import RandomMaskStrategy

__all__ = ["MaskStrategy", "LearnedMaskStrategy", "RandomMaskStrategy", "MagnitudeMaskStrategy"]
