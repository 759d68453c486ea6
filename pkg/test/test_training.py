import logging
from unittest import TestCase, main

import numpy as np

from sepprune.config import TrainConfig
from sepprune.core.errors import InvalidArgumentError, NumericFailureError
from sepprune.data import AudioDataset, make_dataset
from sepprune.mask_learning import init_masks
from sepprune.sepnet import build_toy_sepnet
from sepprune.training import (
    LOG_COLUMNS,
    PlateauScheduler,
    Trainer,
    TrainingDivergedError,
    epochs_to_match,
    finetune,
    joint_optimize,
    mean_si_sdri,
    recovery_rate,
    train,
)


def small_setup():
    model = build_toy_sepnet(4, 1, 8, 3, 2, 8, 4, seed=0)
    train_split, val_split, _ = make_dataset(2, 1, 1, length=256)
    return model, AudioDataset(train_split), AudioDataset(val_split)


class FrozenTrainer(Trainer):
    """Skips the weight updates and reports the same validation score every epoch."""

    def train_epoch(self, epoch, lr):
        return 0.0

    def validate(self):
        return 1.0


class FailingTrainer(Trainer):
    def validate(self):
        raise NumericFailureError("conv1d", "non-finite value in forward pass")


class TestPlateauScheduler(TestCase):
    def setUp(self):
        logging.disable(logging.CRITICAL)

    def test_improvement_resets_patience(self):
        scheduler = PlateauScheduler(0.1, plateau_patience=2, early_stop_patience=4)
        for epoch, metric in enumerate([1.0, 0.5, 0.5, 2.0, 1.0], start=1):
            self.assertTrue(scheduler.step(epoch, metric))
        self.assertEqual(scheduler.best_epoch, 4)
        self.assertEqual(scheduler.halvings, [3])
        self.assertAlmostEqual(scheduler.lr, 0.05)
        self.assertFalse(scheduler.improved)

    def test_stop_takes_precedence_over_halving(self):
        scheduler = PlateauScheduler(1.0, plateau_patience=2, early_stop_patience=4)
        results = [scheduler.step(epoch, 0.0) for epoch in range(1, 6)]
        self.assertEqual(results, [True, True, True, True, False])
        self.assertEqual(scheduler.halvings, [3])
        self.assertEqual(scheduler.stopped_at, 5)

    def test_rejects_bad_arguments(self):
        with self.assertRaises(InvalidArgumentError):
            PlateauScheduler(0.0)
        with self.assertRaises(InvalidArgumentError):
            PlateauScheduler(0.1, plateau_patience=0)


class TestTrainer(TestCase):
    def setUp(self):
        logging.disable(logging.CRITICAL)
        self.model, self.train_set, self.val_set = small_setup()
        self.config = TrainConfig(lr=0.001, max_epochs=2)

    def test_frozen_score_halves_once_then_stops(self):
        result = FrozenTrainer(self.model, self.train_set, self.val_set, self.config).fit(max_epochs=40)
        self.assertEqual(len(result.log), 31)
        self.assertEqual(result.halvings, [16])
        self.assertEqual(result.best_epoch, 1)
        lrs = [row.lr for row in result.log]
        self.assertEqual(lrs[15], 0.001)
        self.assertEqual(lrs[16], 0.0005)

    def test_zero_epochs(self):
        result = train(self.model, self.train_set, self.val_set, self.config, max_epochs=0)
        self.assertEqual(len(result.log), 0)
        self.assertIsNone(result.best_epoch)
        for name, value in self.model.parameters.items():
            np.testing.assert_array_equal(result.model.parameters[name], value)

    def test_training_updates_a_copy(self):
        before = {name: value.copy() for name, value in self.model.parameters.items()}
        result = train(self.model, self.train_set, self.val_set, self.config)
        for name, value in self.model.parameters.items():
            np.testing.assert_array_equal(value, before[name])
        self.assertEqual(list(result.log.to_frame().columns), LOG_COLUMNS)
        self.assertEqual([row.epoch for row in result.log], [1, 2])
        self.assertIn(result.best_epoch, (1, 2))
        self.assertEqual(result.best_val_sisdri, max(row.val_sisdri for row in result.log))
        self.assertGreater(result.optimizer.step, 0)
        changed = any(
            not np.array_equal(result.model.parameters[name], value) for name, value in before.items()
        )
        self.assertTrue(changed)

    def test_training_is_deterministic(self):
        first = train(self.model, self.train_set, self.val_set, self.config, max_epochs=1)
        second = train(self.model, self.train_set, self.val_set, self.config, max_epochs=1)
        np.testing.assert_array_equal(
            first.model.parameters["encoder.weight"], second.model.parameters["encoder.weight"]
        )

    def test_finetune_uses_configured_epochs(self):
        config = TrainConfig(finetune_epochs=1)
        self.assertEqual(len(finetune(self.model, self.train_set, self.val_set, config).log), 1)

    def test_numeric_failure_becomes_divergence(self):
        with self.assertRaises(TrainingDivergedError) as context:
            FailingTrainer(self.model, self.train_set, self.val_set, self.config).fit()
        self.assertEqual(context.exception.epoch, 1)

    def test_score_is_finite(self):
        self.assertTrue(np.isfinite(mean_si_sdri(self.model, self.val_set)))


class TestRecovery(TestCase):
    def setUp(self):
        logging.disable(logging.CRITICAL)

    def test_recovery_rate(self):
        self.assertAlmostEqual(recovery_rate(9.0, 10.0), 90.0)
        with self.assertRaises(InvalidArgumentError):
            recovery_rate(9.0, 0.0)

    def test_epochs_to_match(self):
        model, train_set, val_set = small_setup()
        config = TrainConfig()
        self.assertEqual(epochs_to_match(model, train_set, val_set, config, -1e9, 3), 1)
        self.assertIsNone(epochs_to_match(model, train_set, val_set, config, 1e9, 1))


class TestJointOptimize(TestCase):
    def setUp(self):
        logging.disable(logging.CRITICAL)
        self.model, self.train_set, _ = small_setup()
        self.masks = init_masks(self.model, seed=1)

    def test_updates_masks_and_weights(self):
        before = {name: value.copy() for name, value in self.model.parameters.items()}
        learned, joint = joint_optimize(self.model, self.masks, self.train_set, iterations=2, lr=0.5)
        for name, value in self.model.parameters.items():
            np.testing.assert_array_equal(value, before[name])
        self.assertTrue(any(not np.array_equal(joint.parameters[name], before[name]) for name in before))
        self.assertTrue(
            any(not np.array_equal(learned[g].logits.values, self.masks[g].logits.values) for g in learned.group_ids)
        )
        for binary in learned.binary_masks().values():
            self.assertGreaterEqual(int(binary.sum()), 1)

    def test_zero_iterations(self):
        learned, joint = joint_optimize(self.model, self.masks, self.train_set, iterations=0)
        self.assertEqual(joint.parameter_count(), self.model.parameter_count())
        np.testing.assert_array_equal(learned[0].logits.values, self.masks[0].logits.values)


if __name__ == "__main__":
    main()
