import logging
import os
import tempfile
from concurrent.futures import ThreadPoolExecutor
from unittest import TestCase, main

import numpy as np
import soundfile as sf

from sepprune.core.errors import InvalidArgumentError
from sepprune.data import (
    PEAK,
    AudioBatch,
    AudioDataset,
    DatasetManifest,
    MalformedHeaderError,
    StereoInputError,
    UnsupportedEncodingError,
    UtteranceDescriptor,
    check_disjoint,
    draw_levels,
    load_wav,
    make_dataset,
    synth_utterance,
    write_wav,
)


def power(x):
    return float(np.mean(np.asarray(x, dtype=np.float64) ** 2))


class TestSynthUtterance(TestCase):
    def test_same_seed_same_audio(self):
        first, second = synth_utterance(7, length=512), synth_utterance(7, length=512)
        np.testing.assert_array_equal(first.mixture, second.mixture)
        np.testing.assert_array_equal(first.sources, second.sources)
        self.assertFalse(np.array_equal(first.mixture, synth_utterance(8, length=512).mixture))

    def test_mixture_is_exact_sum_of_sources(self):
        batch = synth_utterance(3, length=1024)
        self.assertEqual(batch.mixture.dtype, np.float32)
        self.assertEqual(batch.mixture.shape, (1, 1, 1024))
        self.assertEqual(batch.sources.shape, (1, 2, 1024))
        np.testing.assert_array_equal(batch.mixture[0, 0], batch.sources[0, 0] + batch.sources[0, 1])

    def test_noise_is_part_of_the_mixture(self):
        batch = synth_utterance(3, length=1024, noise_snr_db=10.0)
        self.assertEqual(batch.noise.shape, (1, 1, 1024))
        expected = (batch.sources[0, 0] + batch.sources[0, 1]) + batch.noise[0, 0]
        np.testing.assert_array_equal(batch.mixture[0, 0], expected)

    def test_source_level_and_peak(self):
        batch = synth_utterance(11, length=4000, snr_db=2.5)
        ratio = 10.0 * np.log10(power(batch.sources[0, 0]) / power(batch.sources[0, 1]))
        self.assertAlmostEqual(ratio, 2.5, places=3)
        peak = max(np.max(np.abs(batch.mixture)), np.max(np.abs(batch.sources)))
        self.assertAlmostEqual(float(peak), PEAK, places=5)

    def test_drawn_level_is_recorded(self):
        batch = synth_utterance(5, length=512, source_snr_range=(-5.0, 5.0))
        drawn, noise = draw_levels(5, (-5.0, 5.0))
        self.assertEqual(batch.metadata[0]["snr_db"], drawn)
        self.assertIsNone(noise)
        self.assertTrue(-5.0 <= drawn <= 5.0)

    def test_rejects_bad_arguments(self):
        with self.assertRaises(InvalidArgumentError):
            synth_utterance(0, length=100)
        with self.assertRaises(InvalidArgumentError):
            synth_utterance(0, length=512, sample_rate=4000)
        with self.assertRaises(InvalidArgumentError):
            synth_utterance(0, length=512, source_snr_range=(5.0, -5.0))


class TestManifests(TestCase):
    def setUp(self):
        logging.disable(logging.CRITICAL)

    def test_splits_are_disjoint_and_consecutive(self):
        train, val, test = make_dataset(4, 2, 2, base_seed=10, length=512)
        self.assertEqual(train.seeds(), [10, 11, 12, 13])
        self.assertEqual(val.seeds(), [14, 15])
        self.assertEqual(test.seeds(), [16, 17])
        check_disjoint([train, val, test])

    def test_overlapping_seed_starts_are_rejected(self):
        with self.assertRaises(InvalidArgumentError):
            make_dataset(4, 2, 2, seed_starts={"train": 0, "val": 3, "test": 100})

    def test_empty_split_is_rejected(self):
        with self.assertRaises(InvalidArgumentError):
            make_dataset(4, 0, 2)

    def test_check_disjoint_detects_leaks(self):
        a = DatasetManifest("train", [UtteranceDescriptor(1), UtteranceDescriptor(2)])
        b = DatasetManifest("test", [UtteranceDescriptor(2)])
        with self.assertRaises(InvalidArgumentError):
            check_disjoint([a, b])

    def test_duplicates_are_rejected(self):
        with self.assertRaises(InvalidArgumentError):
            DatasetManifest("train", [UtteranceDescriptor(1), UtteranceDescriptor(1)])

    def test_save_and_load(self):
        train, _, _ = make_dataset(3, 1, 1, length=512, noise_snr_range=(10.0, 20.0))
        with tempfile.TemporaryDirectory() as directory:
            path = os.path.join(directory, "data_train.txt")
            train.save(path)
            loaded = DatasetManifest.load(path)
        self.assertEqual(loaded.split, "train")
        self.assertEqual(loaded.length, 512)
        self.assertEqual(loaded.descriptors, train.descriptors)

    def test_malformed_line(self):
        with self.assertRaises(InvalidArgumentError):
            UtteranceDescriptor.from_line("seed=abc, length=12, snr_db=0.0")
        with self.assertRaises(InvalidArgumentError):
            UtteranceDescriptor.from_line("wav=only_one.wav")


class TestAudioDataset(TestCase):
    def setUp(self):
        logging.disable(logging.CRITICAL)
        train, _, _ = make_dataset(5, 1, 1, length=512)
        self.dataset = AudioDataset(train, cache_size=2)

    def test_items_follow_manifest(self):
        self.assertEqual(len(self.dataset), 5)
        item = self.dataset[2]
        self.assertEqual(item.metadata[0]["seed"], 2)
        np.testing.assert_array_equal(item.mixture, synth_utterance(2, length=512).mixture)
        self.assertIs(self.dataset[2], item)

    def test_batches(self):
        sizes = [batch.batch_size for batch in self.dataset.batches(2)]
        self.assertEqual(sizes, [2, 2, 1])
        first = next(self.dataset.batches(2))
        self.assertEqual(first.sources.shape, (2, 2, 512))
        self.assertEqual([meta["seed"] for meta in first.metadata], [0, 1])
        with self.assertRaises(InvalidArgumentError):
            next(self.dataset.batches(0))

    def test_concurrent_reads_keep_the_cache_bounded(self):
        indices = [i % 5 for i in range(400)]
        with ThreadPoolExecutor(max_workers=8) as pool:
            seeds = list(pool.map(lambda index: self.dataset[index].metadata[0]["seed"], indices))
        self.assertEqual(seeds, indices)
        self.assertLessEqual(len(self.dataset._cache), 2)

    def test_concatenate_rejects_mixed_lengths(self):
        with self.assertRaises(InvalidArgumentError):
            AudioBatch.concatenate([synth_utterance(0, length=512), synth_utterance(1, length=1024)])


class TestWav(TestCase):
    def setUp(self):
        self.directory = tempfile.TemporaryDirectory()

    def tearDown(self):
        self.directory.cleanup()

    def path(self, name):
        return os.path.join(self.directory.name, name)

    def test_write_and_read(self):
        waveform = 0.5 * np.sin(np.linspace(0, 30, 800))
        write_wav(self.path("a.wav"), waveform, 8000)
        samples, rate = load_wav(self.path("a.wav"))
        self.assertEqual(rate, 8000)
        self.assertEqual(samples.dtype, np.float32)
        np.testing.assert_allclose(samples, waveform, atol=1.0 / 32768)

    def test_clipping_waveform_is_rejected(self):
        with self.assertRaises(InvalidArgumentError):
            write_wav(self.path("a.wav"), np.array([0.0, 1.5]), 8000)

    def test_stereo(self):
        sf.write(self.path("s.wav"), np.zeros((100, 2), dtype=np.int16), 8000, subtype="PCM_16")
        with self.assertRaises(StereoInputError):
            load_wav(self.path("s.wav"))

    def test_float_encoding(self):
        sf.write(self.path("f.wav"), np.zeros(100, dtype=np.float32), 8000, subtype="FLOAT")
        with self.assertRaises(UnsupportedEncodingError):
            load_wav(self.path("f.wav"))

    def test_garbage_header(self):
        with open(self.path("g.wav"), "wb") as f:
            f.write(b"this is not audio at all")
        with self.assertRaises(MalformedHeaderError):
            load_wav(self.path("g.wav"))

    def test_missing_file(self):
        with self.assertRaises(FileNotFoundError):
            load_wav(self.path("missing.wav"))

    def test_wav_backed_dataset(self):
        sources = [0.3 * np.sin(np.linspace(0, 10, 600)), 0.3 * np.cos(np.linspace(0, 17, 600))]
        write_wav(self.path("s1.wav"), sources[0], 8000)
        write_wav(self.path("s2.wav"), sources[1], 8000)
        write_wav(self.path("mix.wav"), sources[0] + sources[1], 8000)
        paths = (self.path("mix.wav"), self.path("s1.wav"), self.path("s2.wav"))
        dataset = AudioDataset(DatasetManifest("test", [UtteranceDescriptor(wav=paths)], 8000, 600))
        batch = dataset[0]
        self.assertEqual(batch.mixture.shape, (1, 1, 600))
        self.assertEqual(batch.sources.shape, (1, 2, 600))


if __name__ == "__main__":
    main()
