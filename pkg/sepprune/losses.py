"""
Separation metrics (SI-SDR, SDR and their improvements over the mixture) and the permutation-invariant negative
SI-SDR training loss.

All ratios are stabilized by DELTA in numerator and denominator, which caps near-perfect estimates around 80-90 dB
instead of producing infinities.
"""
import itertools
import logging
from typing import List, Sequence, Tuple

import numpy as np

import sepprune.core.functional as F
from sepprune.core.autodiff import ArrayLike, TensorNode, as_node
from sepprune.core.errors import InvalidArgumentError

log = logging.getLogger("root")

DELTA = 1e-8
MAX_PIT_SPEAKERS = 4


def _as_signal(values: ArrayLike, name: str) -> np.ndarray:
    array = np.asarray(values.values if isinstance(values, TensorNode) else values, dtype=np.float64)
    if array.ndim != 1 or array.size < 1:
        raise InvalidArgumentError("{} must be a non-empty 1-d signal, got shape {}".format(name, array.shape))
    return array


def si_sdr(reference: ArrayLike, estimate: ArrayLike) -> float:
    """Scale-invariant SDR in dB of `estimate` against `reference`, both zero-meaned first."""
    reference = _as_signal(reference, "reference")
    estimate = _as_signal(estimate, "estimate")
    if reference.shape != estimate.shape:
        raise InvalidArgumentError("Shapes differ: {} vs {}".format(reference.shape, estimate.shape))
    reference = reference - reference.mean()
    estimate = estimate - estimate.mean()
    energy = np.dot(reference, reference)
    if energy == 0.0:
        raise InvalidArgumentError("Reference signal is identically zero")
    alpha = np.dot(estimate, reference) / (energy + DELTA)
    target = alpha * reference
    noise = target - estimate
    return float(10.0 * np.log10((np.dot(target, target) + DELTA) / (np.dot(noise, noise) + DELTA)))


def sdr(reference: ArrayLike, estimate: ArrayLike) -> float:
    """Plain (not scale-invariant) SDR in dB."""
    reference = _as_signal(reference, "reference")
    estimate = _as_signal(estimate, "estimate")
    if reference.shape != estimate.shape:
        raise InvalidArgumentError("Shapes differ: {} vs {}".format(reference.shape, estimate.shape))
    if not np.any(reference):
        raise InvalidArgumentError("Reference signal is identically zero")
    error = reference - estimate
    return float(10.0 * np.log10((np.dot(reference, reference) + DELTA) / (np.dot(error, error) + DELTA)))


def _speaker_matrix(values: ArrayLike, name: str) -> np.ndarray:
    array = np.asarray(values.values if isinstance(values, TensorNode) else values, dtype=np.float64)
    if array.ndim == 3 and array.shape[0] == 1:
        array = array[0]
    if array.ndim != 2:
        raise InvalidArgumentError("{} must be [C, T], got shape {}".format(name, array.shape))
    return array


def best_permutation(references: ArrayLike, estimates: ArrayLike) -> Tuple[int, ...]:
    """The assignment of estimates to references with the highest mean SI-SDR; estimates[p[c]] goes with reference c."""
    references = _speaker_matrix(references, "references")
    estimates = _speaker_matrix(estimates, "estimates")
    if references.shape != estimates.shape:
        raise InvalidArgumentError("Shapes differ: {} vs {}".format(references.shape, estimates.shape))
    speakers = references.shape[0]
    scores = np.array([[si_sdr(references[c], estimates[e]) for e in range(speakers)] for c in range(speakers)])
    best, best_score = None, -np.inf
    for perm in itertools.permutations(range(speakers)):
        score = float(np.mean([scores[c, perm[c]] for c in range(speakers)]))
        if score > best_score:
            best, best_score = perm, score
    return best


def improvements(mixture: ArrayLike, references: ArrayLike, estimates: ArrayLike) -> Tuple[float, float]:
    """
    (SDRi, SI-SDRi) in dB averaged over speakers: the metric of each aligned estimate minus the metric of the
    unprocessed mixture, against the same reference.
    """
    references = _speaker_matrix(references, "references")
    estimates = _speaker_matrix(estimates, "estimates")
    mixture = np.asarray(mixture.values if isinstance(mixture, TensorNode) else mixture, dtype=np.float64).reshape(-1)
    if mixture.shape[0] != references.shape[1]:
        raise InvalidArgumentError(
            "Mixture length {} does not match sources {}".format(mixture.shape, references.shape)
        )
    perm = best_permutation(references, estimates)
    sdr_gains, si_sdr_gains = [], []  # type: List[float], List[float]
    for c, e in enumerate(perm):
        sdr_gains.append(sdr(references[c], estimates[e]) - sdr(references[c], mixture))
        si_sdr_gains.append(si_sdr(references[c], estimates[e]) - si_sdr(references[c], mixture))
    return float(np.mean(sdr_gains)), float(np.mean(si_sdr_gains))


def sdr_i(mixture: ArrayLike, references: ArrayLike, estimates: ArrayLike) -> float:
    return improvements(mixture, references, estimates)[0]


def si_sdr_i(mixture: ArrayLike, references: ArrayLike, estimates: ArrayLike) -> float:
    return improvements(mixture, references, estimates)[1]


def si_sdr_node(references: ArrayLike, estimates: ArrayLike) -> TensorNode:
    """Differentiable SI-SDR in dB over the last axis of [B, C, T] inputs; returns [B, C]."""
    references, estimates = as_node(references), as_node(estimates)
    if references.shape != estimates.shape or references.ndim != 3:
        raise InvalidArgumentError(
            "Expected matching [B, C, T] inputs, got {} and {}".format(references.shape, estimates.shape)
        )
    reference = F.sub(references, F.mean(references, axis=2, keepdims=True))
    estimate = F.sub(estimates, F.mean(estimates, axis=2, keepdims=True))
    energy = F.sum(F.square(reference), axis=2, keepdims=True)
    if np.any(energy.values == 0.0):
        raise InvalidArgumentError("Reference signal is identically zero")
    alpha = F.div(F.sum(F.mul(estimate, reference), axis=2, keepdims=True), F.scalar_add(energy, DELTA))
    target = F.mul(alpha, reference)
    noise = F.sub(target, estimate)
    ratio = F.div(
        F.scalar_add(F.sum(F.square(target), axis=2), DELTA), F.scalar_add(F.sum(F.square(noise), axis=2), DELTA)
    )
    return F.scalar_mul(F.log10(ratio), 10.0)


def _permuted(estimates: TensorNode, perm: Sequence[int]) -> TensorNode:
    if list(perm) == list(range(len(perm))):
        return estimates
    return F.stack([F.select_channel(estimates, e) for e in perm], axis=1)


def pit_neg_sisdr_loss(references: ArrayLike, estimates: ArrayLike) -> TensorNode:
    """
    Permutation-invariant training loss: for every utterance, the mean SI-SDR under the best speaker assignment,
    negated and averaged over the batch.
    """
    references, estimates = as_node(references), as_node(estimates)
    if references.ndim != 3 or references.shape != estimates.shape:
        raise InvalidArgumentError(
            "Expected matching [B, C, T] inputs, got {} and {}".format(references.shape, estimates.shape)
        )
    speakers = references.shape[1]
    if speakers > MAX_PIT_SPEAKERS:
        raise InvalidArgumentError("At most {} speakers supported, got {}".format(MAX_PIT_SPEAKERS, speakers))
    per_permutation = [
        F.mean(si_sdr_node(references, _permuted(estimates, perm)), axis=1)
        for perm in itertools.permutations(range(speakers))
    ]
    best = F.amax(F.stack(per_permutation, axis=1), axis=1)
    return F.scalar_mul(F.mean(best), -1.0)
