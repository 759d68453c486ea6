import logging
from unittest import TestCase, main

import numpy as np

from sepprune.core.errors import InvalidArgumentError
from sepprune.data import AudioDataset, make_dataset
from sepprune.pruner import magnitude_mask, random_mask
from sepprune.sepnet import build_toy_sepnet
from sepprune.strategies import LearnedMaskStrategy, MagnitudeMaskStrategy, MaskStrategy, RandomMaskStrategy


class TestStrategies(TestCase):
    def setUp(self):
        logging.disable(logging.CRITICAL)
        self.model = build_toy_sepnet(4, 1, 8, 3, 2, 8, 4, seed=0)
        train, _, _ = make_dataset(2, 1, 1, length=256)
        self.dataset = AudioDataset(train)

    def test_labels(self):
        labels = [str(strategy) for strategy in (LearnedMaskStrategy(), RandomMaskStrategy(), MagnitudeMaskStrategy())]
        self.assertEqual(labels, ["sepprune", "random", "magnitude"])

    def test_baselines_match_the_mask_functions(self):
        counts = {0: 3, 1: 5}
        random_masks = RandomMaskStrategy().generate(self.model, None, counts, 4)
        magnitude_masks = MagnitudeMaskStrategy().generate(self.model, None, counts, 4)
        expected_random, expected_magnitude = random_mask(self.model, counts, 4), magnitude_mask(self.model, counts)
        for group_id in counts:
            np.testing.assert_array_equal(random_masks[group_id], expected_random[group_id])
            np.testing.assert_array_equal(magnitude_masks[group_id], expected_magnitude[group_id])

    def test_baselines_need_a_keep_spec(self):
        for strategy in (RandomMaskStrategy(), MagnitudeMaskStrategy()):
            with self.assertRaises(InvalidArgumentError):
                strategy.generate(self.model, None, None, 0)

    def test_matching(self):
        masks = {0: np.array([1, 0, 1, 1]), 1: np.array([0, 0, 1, 0, 0, 0, 0, 1])}
        self.assertEqual(MaskStrategy.matching(masks), {0: 3, 1: 2})

    def test_learned_strategy_needs_data(self):
        with self.assertRaises(InvalidArgumentError):
            LearnedMaskStrategy(iterations=1).generate(self.model, None, None, 0)

    def test_learned_strategy_keeps_its_masks(self):
        strategy = LearnedMaskStrategy(iterations=2, lr=0.5)
        masks = strategy.generate(self.model, self.dataset, 0.25, 1)
        self.assertIsNotNone(strategy.learned)
        self.assertEqual(sorted(masks), [0, 1])
        for group_id, mask in masks.items():
            np.testing.assert_array_equal(mask, strategy.learned.binary_masks()[group_id])
            self.assertGreaterEqual(int(mask.sum()), 1)

    def test_learned_strategy_is_deterministic(self):
        first = LearnedMaskStrategy(iterations=2).generate(self.model, self.dataset, None, 5)
        second = LearnedMaskStrategy(iterations=2).generate(self.model, self.dataset, None, 5)
        for group_id in first:
            np.testing.assert_array_equal(first[group_id], second[group_id])


if __name__ == "__main__":
    main()
