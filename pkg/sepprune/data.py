"""
Synthetic two-source mixtures, dataset manifests and PCM-16 WAV I/O.

Source A is a sum of three harmonics (fundamental chosen so that all of them stay in 100-1000 Hz) under a slowly
varying amplitude envelope. Source B is white noise band-passed to 1-3 kHz. The disjoint spectral supports make
the separation task learnable by a small model on a CPU.
"""
import logging
import os
import threading
from collections import OrderedDict
from typing import Any, Dict, Iterator, List, NamedTuple, Optional, Sequence, Tuple

import numpy as np
import soundfile as sf
from scipy import signal

from sepprune.core.errors import InvalidArgumentError

log = logging.getLogger("root")

DEFAULT_SAMPLE_RATE = 8000
DEFAULT_LENGTH = 16000
MIN_LENGTH = 256
PEAK = 0.9
HARMONIC_BAND = (100.0, 1000.0)
NOISE_BAND = (1000.0, 3000.0)
ENVELOPE_CUTOFF_HZ = 4.0
SPLITS = ("train", "val", "test")


class WavError(Exception):
    pass


class MalformedHeaderError(WavError):
    pass


class UnsupportedEncodingError(WavError):
    pass


class StereoInputError(WavError):
    pass


class AudioBatch(NamedTuple):
    """mixture [B, 1, T], sources [B, C, T], optional noise [B, 1, T]; all 32-bit."""

    mixture: np.ndarray
    sources: np.ndarray
    sample_rate: int
    noise: Optional[np.ndarray] = None
    metadata: Tuple[Dict[str, Any], ...] = ()

    @property
    def batch_size(self) -> int:
        return self.mixture.shape[0]

    @property
    def length(self) -> int:
        return self.mixture.shape[2]

    @staticmethod
    def concatenate(batches: Sequence["AudioBatch"]) -> "AudioBatch":
        if not batches:
            raise InvalidArgumentError("Cannot concatenate an empty list of batches")
        rates = {batch.sample_rate for batch in batches}
        lengths = {batch.length for batch in batches}
        if len(rates) != 1 or len(lengths) != 1:
            raise InvalidArgumentError("Batches differ in sample rate or length: {} / {}".format(rates, lengths))
        noise = None
        if all(batch.noise is not None for batch in batches):
            noise = np.concatenate([batch.noise for batch in batches])
        return AudioBatch(
            np.concatenate([batch.mixture for batch in batches]),
            np.concatenate([batch.sources for batch in batches]),
            batches[0].sample_rate,
            noise,
            tuple(meta for batch in batches for meta in batch.metadata),
        )


def _power(x: np.ndarray) -> float:
    return float(np.mean(x * x))


def _check_range(snr_range: Sequence[float], name: str) -> Tuple[float, float]:
    lo, hi = float(snr_range[0]), float(snr_range[1])
    if lo > hi:
        raise InvalidArgumentError("Invalid {} range: {} > {}".format(name, lo, hi))
    return lo, hi


def _scale_draw(u: float, snr_range: Sequence[float], name: str) -> float:
    lo, hi = _check_range(snr_range, name)
    return float(lo + (hi - lo) * u)


def draw_levels(
    seed: int, source_snr_range: Sequence[float], noise_snr_range: Optional[Sequence[float]] = None
) -> Tuple[float, Optional[float]]:
    """
    The (source SNR, noise SNR) synth_utterance draws for `seed`. They are the first two uniforms of the
    utterance's random stream, so they can be recorded in a manifest without synthesizing any audio.
    """
    u_source, u_noise = np.random.default_rng(seed).random(2)
    noise_snr_db = None
    if noise_snr_range is not None:
        noise_snr_db = _scale_draw(u_noise, noise_snr_range, "noise SNR")
    return _scale_draw(u_source, source_snr_range, "source SNR"), noise_snr_db


def _harmonic_source(rng: np.random.Generator, length: int, sample_rate: int) -> np.ndarray:
    t = np.arange(length) / sample_rate
    f0 = rng.uniform(HARMONIC_BAND[0], HARMONIC_BAND[1] / 3.0)
    amplitudes = rng.uniform(0.3, 1.0, size=3)
    phases = rng.uniform(0.0, 2 * np.pi, size=3)
    tone = sum(a * np.sin(2 * np.pi * (k + 1) * f0 * t + p) for k, (a, p) in enumerate(zip(amplitudes, phases)))
    sos = signal.butter(2, ENVELOPE_CUTOFF_HZ, btype="lowpass", fs=sample_rate, output="sos")
    envelope = np.abs(signal.sosfilt(sos, rng.standard_normal(length)))
    envelope = 0.2 + envelope / (envelope.max() + 1e-12)
    return tone * envelope


def _band_noise_source(rng: np.random.Generator, length: int, sample_rate: int) -> np.ndarray:
    sos = signal.butter(6, NOISE_BAND, btype="bandpass", fs=sample_rate, output="sos")
    return signal.sosfilt(sos, rng.standard_normal(length))


def synth_utterance(
    seed: int,
    length: int = DEFAULT_LENGTH,
    sample_rate: int = DEFAULT_SAMPLE_RATE,
    source_snr_range: Sequence[float] = (-5.0, 5.0),
    noise_snr_range: Optional[Sequence[float]] = None,
    snr_db: Optional[float] = None,
    noise_snr_db: Optional[float] = None,
) -> AudioBatch:
    """
    One deterministic two-source mixture (B=1). The second source is scaled so that the level of source A over
    source B is `snr_db` (drawn from `source_snr_range` unless given); optional white noise sits `noise_snr_db`
    below the sum of the sources. Everything is then scaled so the largest peak of any signal is 0.9.
    """
    if length < MIN_LENGTH:
        raise InvalidArgumentError("Utterance length must be >= {}, got {}".format(MIN_LENGTH, length))
    if sample_rate <= 2 * NOISE_BAND[1]:
        raise InvalidArgumentError("Sample rate must exceed {} Hz, got {}".format(2 * NOISE_BAND[1], sample_rate))
    drawn, drawn_noise = draw_levels(seed, source_snr_range, noise_snr_range)
    snr_db = drawn if snr_db is None else snr_db
    noise_snr_db = drawn_noise if noise_snr_db is None else noise_snr_db
    rng = np.random.default_rng(seed)
    rng.random(2)

    s1 = _harmonic_source(rng, length, sample_rate)
    s2 = _band_noise_source(rng, length, sample_rate)
    s2 = s2 * np.sqrt(_power(s1) / (_power(s2) * 10.0 ** (snr_db / 10.0)))
    noise = None
    if noise_snr_db is not None:
        noise = rng.standard_normal(length)
        noise = noise * np.sqrt(_power(s1 + s2) / (_power(noise) * 10.0 ** (noise_snr_db / 10.0)))

    total = s1 + s2 if noise is None else s1 + s2 + noise
    peaks = [np.max(np.abs(s1)), np.max(np.abs(s2)), np.max(np.abs(total))]
    if noise is not None:
        peaks.append(np.max(np.abs(noise)))
    scale = PEAK / max(peaks)
    s1 = (s1 * scale).astype(np.float32)
    s2 = (s2 * scale).astype(np.float32)
    mixture = s1 + s2
    if noise is not None:
        noise = (noise * scale).astype(np.float32)
        mixture = mixture + noise
        noise = noise[None, None, :]

    metadata = {"seed": seed, "snr_db": float(snr_db), "noise_snr_db": noise_snr_db}
    return AudioBatch(mixture[None, None, :], np.stack([s1, s2])[None], sample_rate, noise, (metadata,))


class UtteranceDescriptor(NamedTuple):
    """
    One manifest line. Synthetic utterances are described by their seed; WAV-backed ones by the mixture path
    followed by one path per source.
    """

    seed: Optional[int] = None
    length: int = DEFAULT_LENGTH
    snr_db: float = 0.0
    noise_snr_db: Optional[float] = None
    wav: Tuple[str, ...] = ()

    def to_line(self) -> str:
        if self.wav:
            return "wav={}".format("|".join(self.wav))
        fields = ["seed={}".format(self.seed), "length={}".format(self.length), "snr_db={!r}".format(self.snr_db)]
        if self.noise_snr_db is not None:
            fields.append("noise_snr_db={!r}".format(self.noise_snr_db))
        return ", ".join(fields)

    @staticmethod
    def from_line(line: str) -> "UtteranceDescriptor":
        line = line.strip()
        if line.startswith("wav="):
            paths = tuple(line[len("wav=") :].split("|"))
            if len(paths) < 2:
                raise InvalidArgumentError("WAV descriptor needs a mixture and at least one source: {}".format(line))
            return UtteranceDescriptor(wav=paths)
        fields = {}
        for field in line.split(","):
            key, _, value = field.strip().partition("=")
            fields[key] = value
        try:
            return UtteranceDescriptor(
                seed=int(fields["seed"]),
                length=int(fields["length"]),
                snr_db=float(fields["snr_db"]),
                noise_snr_db=float(fields["noise_snr_db"]) if "noise_snr_db" in fields else None,
            )
        except (KeyError, ValueError) as ex:
            raise InvalidArgumentError("Malformed manifest line '{}': {}".format(line, ex))


class DatasetManifest(object):
    def __init__(
        self,
        split: str,
        descriptors: Sequence[UtteranceDescriptor],
        sample_rate: int = DEFAULT_SAMPLE_RATE,
        length: int = DEFAULT_LENGTH,
    ) -> None:
        if len(set(descriptors)) != len(descriptors):
            raise InvalidArgumentError("Manifest '{}' contains duplicate descriptors".format(split))
        self.split = split
        self.descriptors = list(descriptors)
        self.sample_rate = sample_rate
        self.length = length

    def __len__(self) -> int:
        return len(self.descriptors)

    def seeds(self) -> List[int]:
        return [d.seed for d in self.descriptors if d.seed is not None]

    def paths(self) -> List[str]:
        return [path for d in self.descriptors for path in d.wav]

    def save(self, path: str) -> None:
        with open(path, "w") as f:
            f.write("# split={}, sample_rate={}, length={}\n".format(self.split, self.sample_rate, self.length))
            for descriptor in self.descriptors:
                f.write(descriptor.to_line() + "\n")

    @staticmethod
    def load(path: str) -> "DatasetManifest":
        header = {}
        descriptors = []
        with open(path) as f:
            for line in f:
                line = line.strip()
                if not line:
                    continue
                if line.startswith("#"):
                    for field in line[1:].split(","):
                        key, _, value = field.strip().partition("=")
                        header[key] = value
                    continue
                descriptors.append(UtteranceDescriptor.from_line(line))
        return DatasetManifest(
            header.get("split", os.path.splitext(os.path.basename(path))[0]),
            descriptors,
            int(header.get("sample_rate", DEFAULT_SAMPLE_RATE)),
            int(header.get("length", DEFAULT_LENGTH)),
        )


def check_disjoint(manifests: Sequence[DatasetManifest]) -> None:
    seen = {}  # type: Dict[Any, str]
    for manifest in manifests:
        for key in manifest.seeds() + manifest.paths():
            if key in seen and seen[key] != manifest.split:
                raise InvalidArgumentError(
                    "'{}' appears in both the {} and {} splits".format(key, seen[key], manifest.split)
                )
            seen[key] = manifest.split


def make_dataset(
    n_train: int = 512,
    n_val: int = 64,
    n_test: int = 64,
    base_seed: int = 0,
    length: int = DEFAULT_LENGTH,
    sample_rate: int = DEFAULT_SAMPLE_RATE,
    source_snr_range: Sequence[float] = (-5.0, 5.0),
    noise_snr_range: Optional[Sequence[float]] = None,
    seed_starts: Optional[Dict[str, int]] = None,
) -> Tuple[DatasetManifest, DatasetManifest, DatasetManifest]:
    """
    Train, validation and test manifests over disjoint seed ranges. By default the ranges are consecutive from
    `base_seed`; `seed_starts` places them explicitly and is rejected when the ranges would overlap.
    """
    sizes = {"train": n_train, "val": n_val, "test": n_test}
    for split, size in sizes.items():
        if size < 1:
            raise InvalidArgumentError("Split '{}' needs at least one utterance, got {}".format(split, size))
    if seed_starts is None:
        seed_starts = {"train": base_seed, "val": base_seed + n_train, "test": base_seed + n_train + n_val}
    ranges = sorted((seed_starts[split], seed_starts[split] + sizes[split], split) for split in SPLITS)
    for (_, end, first), (start, _, second) in zip(ranges, ranges[1:]):
        if start < end:
            raise InvalidArgumentError("Seed ranges of the {} and {} splits overlap".format(first, second))

    manifests = []
    for split in SPLITS:
        descriptors = []
        for seed in range(seed_starts[split], seed_starts[split] + sizes[split]):
            snr_db, noise_snr_db = draw_levels(seed, source_snr_range, noise_snr_range)
            descriptors.append(UtteranceDescriptor(seed, length, snr_db, noise_snr_db))
        manifests.append(DatasetManifest(split, descriptors, sample_rate, length))
    log.info("Created manifests with {} / {} / {} utterances".format(n_train, n_val, n_test))
    return manifests[0], manifests[1], manifests[2]


class AudioDataset(object):
    """A list-like view over a manifest; utterances are synthesized or read on demand, in manifest order."""

    def __init__(self, manifest: DatasetManifest, cache_size: int = 64) -> None:
        self.manifest = manifest
        self.cache_size = cache_size
        self._cache = OrderedDict()  # type: OrderedDict
        self._lock = threading.Lock()

    def __len__(self) -> int:
        return len(self.manifest)

    def __getitem__(self, index: int) -> AudioBatch:
        # evaluate() reads from worker threads
        with self._lock:
            if index in self._cache:
                self._cache.move_to_end(index)
                return self._cache[index]
        batch = self._materialize(self.manifest.descriptors[index])
        if self.cache_size > 0:
            with self._lock:
                self._cache[index] = batch
                self._cache.move_to_end(index)
                while len(self._cache) > self.cache_size:
                    self._cache.popitem(last=False)
        return batch

    def __iter__(self) -> Iterator[AudioBatch]:
        for index in range(len(self)):
            yield self[index]

    def batches(self, batch_size: int = 1) -> Iterator[AudioBatch]:
        if batch_size < 1:
            raise InvalidArgumentError("batch_size must be >= 1, got {}".format(batch_size))
        for start in range(0, len(self), batch_size):
            yield AudioBatch.concatenate([self[i] for i in range(start, min(start + batch_size, len(self)))])

    def _materialize(self, descriptor: UtteranceDescriptor) -> AudioBatch:
        if descriptor.wav:
            return load_wav_utterance(descriptor.wav)
        return synth_utterance(
            descriptor.seed,
            descriptor.length,
            self.manifest.sample_rate,
            snr_db=descriptor.snr_db,
            noise_snr_db=descriptor.noise_snr_db,
        )


def load_wav(path: str) -> Tuple[np.ndarray, int]:
    """Reads a PCM-16 mono RIFF/WAVE file into 32-bit samples in [-1, 1)."""
    if not os.path.exists(path):
        raise FileNotFoundError(path)
    try:
        info = sf.info(path)
    except RuntimeError as ex:
        raise MalformedHeaderError("{}: {}".format(path, ex))
    if info.format != "WAV":
        raise UnsupportedEncodingError("{}: container {} is not RIFF/WAVE".format(path, info.format))
    if info.channels != 1:
        raise StereoInputError("{}: expected mono audio, found {} channels".format(path, info.channels))
    if info.subtype != "PCM_16":
        raise UnsupportedEncodingError("{}: expected 16-bit PCM, found {}".format(path, info.subtype))
    try:
        samples, sample_rate = sf.read(path, dtype="int16", always_2d=False)
    except RuntimeError as ex:
        raise MalformedHeaderError("{}: {}".format(path, ex))
    return (samples.astype(np.float32) / 32768.0).astype(np.float32), sample_rate


def write_wav(path: str, waveform: np.ndarray, sample_rate: int) -> None:
    waveform = np.asarray(waveform, dtype=np.float64).reshape(-1)
    if np.any(np.abs(waveform) > 1.0):
        raise InvalidArgumentError("Waveform must lie in [-1, 1] to be written as PCM-16")
    quantized = np.clip(np.round(waveform * 32768.0), -32768, 32767).astype(np.int16)
    sf.write(path, quantized, sample_rate, subtype="PCM_16", format="WAV")


def load_wav_utterance(paths: Sequence[str]) -> AudioBatch:
    mixture, sample_rate = load_wav(paths[0])
    sources = []
    for path in paths[1:]:
        source, rate = load_wav(path)
        if rate != sample_rate or source.shape != mixture.shape:
            raise InvalidArgumentError("{} does not match the mixture's rate or length".format(path))
        sources.append(source)
    return AudioBatch(mixture[None, None, :], np.stack(sources)[None], sample_rate, None, ({"wav": list(paths)},))
