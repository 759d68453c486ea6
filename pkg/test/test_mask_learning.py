import logging
import os
import tempfile
from unittest import TestCase, main

import numpy as np

from sepprune.core.autodiff import Tape
from sepprune.core.errors import InvalidArgumentError
from sepprune.data import AudioDataset, DatasetManifest, make_dataset
from sepprune.losses import pit_neg_sisdr_loss
from sepprune.mask_learning import (
    EmptyMaskGroupWarning,
    GumbelChannelMask,
    TemperatureSchedule,
    draw_keep_probabilities,
    finalize_masks,
    gumbel_noise,
    init_masks,
    kept_counts,
    kept_fraction,
    learn_masks,
    load_masks,
    logits_path,
    masked_forward_loss,
    sample_soft,
    save_masks,
)
from sepprune.sepnet import build_toy_sepnet, forward


def small_setup():
    model = build_toy_sepnet(4, 1, 8, 3, 2, 8, 4, seed=0)
    train, _, _ = make_dataset(2, 1, 1, length=256)
    return model, AudioDataset(train)


class TestSchedule(TestCase):
    def test_constant(self):
        schedule = TemperatureSchedule.constant(0.8)
        self.assertEqual(schedule.at(0, 10), 0.8)
        self.assertEqual(schedule.at(9, 10), 0.8)

    def test_linear(self):
        schedule = TemperatureSchedule.linear(2.0, 0.5)
        self.assertEqual(schedule.at(0, 5), 2.0)
        self.assertEqual(schedule.at(4, 5), 0.5)
        self.assertAlmostEqual(schedule.at(2, 5), 1.25)

    def test_rejects_bad_values(self):
        with self.assertRaises(InvalidArgumentError):
            TemperatureSchedule("cosine")
        with self.assertRaises(InvalidArgumentError):
            TemperatureSchedule.linear(1.0, 0.0)


class TestSampling(TestCase):
    def test_gumbel_noise_is_finite(self):
        noise = gumbel_noise(np.random.default_rng(0), (1000,))
        self.assertTrue(np.all(np.isfinite(noise)))

    def test_equal_logits_keep_probability_is_uniform(self):
        draws = draw_keep_probabilities(np.zeros((4, 2)), 1.0, np.random.default_rng(0), 20000)
        self.assertEqual(draws.shape, (20000, 4))
        self.assertAlmostEqual(float(np.mean(draws > 0.7)), 0.3, delta=0.01)

    def test_keep_frequency_follows_softmax(self):
        rng = np.random.default_rng(2)
        for _ in range(5):
            logits = rng.normal(scale=2.0, size=(3, 2))
            draws = draw_keep_probabilities(logits, 1.0, rng, 100000)
            expected = np.exp(logits[:, 0]) / np.exp(logits).sum(axis=1)
            np.testing.assert_allclose(np.mean(draws > 0.5, axis=0), expected, atol=0.01)

    def test_sample_soft_keeps_with_softmax_frequency(self):
        rng = np.random.default_rng(7)
        for temperature in (1.0, 0.5):
            mask = GumbelChannelMask(0, rng.normal(scale=2.0, size=(3, 2)), temperature, 0.7)
            stream = np.random.default_rng(int(rng.integers(1 << 30)))
            kept = np.mean([sample_soft(mask, stream).values > 0.5 for _ in range(20000)], axis=0)
            np.testing.assert_allclose(kept, mask.keep_probabilities(), atol=0.015)

    def test_sample_soft_with_equal_logits_is_uniform(self):
        mask = GumbelChannelMask(0, np.zeros((4, 2)), 1.0, 0.7)
        stream = np.random.default_rng(8)
        draws = np.array([sample_soft(mask, stream).values for _ in range(20000)])
        self.assertAlmostEqual(float(np.mean(draws > 0.7)), 0.3, delta=0.01)

    def test_low_temperature_sharpens(self):
        rng = np.random.default_rng(1)
        hot = draw_keep_probabilities(np.zeros((1, 2)), 5.0, rng, 5000)
        cold = draw_keep_probabilities(np.zeros((1, 2)), 0.1, rng, 5000)
        self.assertGreater(np.mean(np.abs(cold - 0.5)), np.mean(np.abs(hot - 0.5)))


class TestInitAndFinalize(TestCase):
    def setUp(self):
        logging.disable(logging.CRITICAL)
        self.model, _ = small_setup()

    def test_init_covers_every_group(self):
        masks = init_masks(self.model)
        self.assertEqual(masks.group_ids, [0, 1])
        self.assertEqual(masks[0].size, 4)
        self.assertEqual(masks[1].size, 8)
        np.testing.assert_array_equal(masks[1].probabilities, 0.5)
        self.assertEqual(masks.threshold, 0.7)

    def test_threshold_must_be_open_interval(self):
        for threshold in (0.0, 1.0, 1.5):
            with self.assertRaises(InvalidArgumentError):
                init_masks(self.model, threshold=threshold)

    def test_finalize_thresholds_noise_free_probabilities(self):
        masks = init_masks(self.model)
        masks[1].logits.values[:3, 0] = 3.0
        masks[0].logits.values[:, 0] = 2.0
        binary = finalize_masks(masks)
        np.testing.assert_array_equal(binary[1], [1, 1, 1, 0, 0, 0, 0, 0])
        np.testing.assert_array_equal(binary[0], [1, 1, 1, 1])
        self.assertEqual(kept_counts(binary), {0: 4, 1: 3})
        self.assertAlmostEqual(kept_fraction(binary), 7 / 12)

    def test_empty_group_keeps_most_probable_channel(self):
        masks = init_masks(self.model)
        masks[0].logits.values[:, 0] = 1.0
        masks[1].logits.values[5, 0] = 0.5
        with self.assertWarns(EmptyMaskGroupWarning):
            binary = finalize_masks(masks)
        np.testing.assert_array_equal(np.flatnonzero(binary[1]), [5])

    def test_with_threshold_leaves_original(self):
        masks = init_masks(self.model)
        masks[1].logits.values[:, 0] = np.linspace(-2, 2, 8)
        lowered = masks.with_threshold(0.3)
        finalize_masks(lowered)
        self.assertEqual(masks.threshold, 0.7)
        self.assertGreater(kept_counts(lowered.binary_masks())[1], kept_counts(masks.binary_masks())[1])

    def test_check_model(self):
        masks = init_masks(self.model)
        with self.assertRaises(InvalidArgumentError):
            masks.check_model(build_toy_sepnet(4, 2, 8, 3, 2, 8, 4))


class TestLearnMasks(TestCase):
    def setUp(self):
        logging.disable(logging.CRITICAL)
        self.model, self.dataset = small_setup()
        self.masks = init_masks(self.model, seed=3)

    def test_masked_loss_with_all_ones_is_plain_loss(self):
        batch = self.dataset[0]
        ones = {group.group_id: np.ones(group.size, dtype=np.float32) for group in self.model.dependency_groups}
        plain = pit_neg_sisdr_loss(batch.sources, forward(self.model, batch.mixture)).item()
        self.assertAlmostEqual(masked_forward_loss(self.model, ones, batch).item(), plain, places=5)

    def test_gradient_reaches_logits(self):
        with Tape() as tape:
            loss = masked_forward_loss(self.model, self.masks, self.dataset[0])
            tape.backward(loss)
        for mask in self.masks:
            self.assertIsNotNone(mask.logits.grad)
            self.assertEqual(mask.logits.grad.shape, (mask.size, 2))

    def test_search_updates_logits_only(self):
        before = {name: value.copy() for name, value in self.model.parameters.items()}
        learned = learn_masks(self.model, self.masks, self.dataset, iterations=3, lr=0.5)
        for name, value in self.model.parameters.items():
            np.testing.assert_array_equal(value, before[name])
        np.testing.assert_array_equal(self.masks[1].logits.values, 0.0)
        self.assertTrue(
            any(not np.array_equal(learned[g].logits.values, self.masks[g].logits.values) for g in learned.group_ids)
        )
        refinalized = finalize_masks(learned.copy())
        for group_id, binary in learned.binary_masks().items():
            np.testing.assert_array_equal(binary, refinalized[group_id])
            self.assertGreaterEqual(int(binary.sum()), 1)

    def test_search_is_deterministic(self):
        first = learn_masks(self.model, self.masks, self.dataset, iterations=2, lr=0.5)
        second = learn_masks(self.model, self.masks, self.dataset, iterations=2, lr=0.5)
        for group_id in first.group_ids:
            np.testing.assert_array_equal(first[group_id].logits.values, second[group_id].logits.values)

    def test_zero_iterations_is_a_copy(self):
        learned = learn_masks(self.model, self.masks, self.dataset, iterations=0)
        self.assertIsNot(learned, self.masks)
        np.testing.assert_array_equal(learned[0].logits.values, self.masks[0].logits.values)

    def test_rejects_bad_arguments(self):
        with self.assertRaises(InvalidArgumentError):
            learn_masks(self.model, self.masks, self.dataset, iterations=-1)
        with self.assertRaises(InvalidArgumentError):
            learn_masks(self.model, self.masks, self.dataset, iterations=1, lr=0.0)
        with self.assertRaises(InvalidArgumentError):
            learn_masks(self.model, self.masks, AudioDataset(DatasetManifest("train", [])), iterations=1)


class TestMaskFiles(TestCase):
    def setUp(self):
        logging.disable(logging.CRITICAL)
        self.model, _ = small_setup()
        self.masks = init_masks(self.model, threshold=0.6, seed=4)
        self.masks[1].logits.values[:, 0] = np.linspace(-1.0, 1.0, 8)
        finalize_masks(self.masks)
        self.directory = tempfile.TemporaryDirectory()
        self.path = os.path.join(self.directory.name, "masks.txt")

    def tearDown(self):
        self.directory.cleanup()

    def test_save_and_load(self):
        save_masks(self.masks, self.path)
        self.assertTrue(os.path.exists(logits_path(self.path)))
        loaded = load_masks(self.path, self.model)
        self.assertEqual(loaded.threshold, 0.6)
        self.assertEqual(loaded.seed, 4)
        for group_id in self.masks.group_ids:
            np.testing.assert_array_equal(loaded[group_id].binary, self.masks[group_id].binary)
            np.testing.assert_array_equal(loaded[group_id].logits.values, self.masks[group_id].logits.values)
            np.testing.assert_allclose(loaded[group_id].probabilities, self.masks[group_id].probabilities, atol=1e-6)

    def test_file_lists_kept_indices(self):
        save_masks(self.masks, self.path)
        with open(self.path) as f:
            lines = f.read().splitlines()
        self.assertTrue(lines[0].startswith("# threshold=0.6"))
        self.assertIn("kept=5,6,7", lines[2])

    def test_wrong_model(self):
        save_masks(self.masks, self.path)
        with self.assertRaises(InvalidArgumentError):
            load_masks(self.path, build_toy_sepnet(4, 1, 6, 3, 2, 8, 4))

    def test_not_a_mask_file(self):
        with open(self.path, "w") as f:
            f.write("group=0\n")
        with self.assertRaises(InvalidArgumentError):
            load_masks(self.path, self.model)


if __name__ == "__main__":
    main()
