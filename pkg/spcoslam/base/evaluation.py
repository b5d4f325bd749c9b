"""
Evaluation

Clustering agreement (NMI), estimation accuracy of cluster counts (EAR),
place recognition from a spoken name and its success rate (PRR),
segmentation word-token counts, and the SLAM metrics (pose RMSE and map
classification accuracy).
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import Mapping, Optional, Sequence

import numpy as np
import pandas as pd
from scipy.special import logsumexp
from scipy.stats import multivariate_normal
from sklearn.metrics import normalized_mutual_info_score

from spcoslam.base.concepts import ConceptParams, unigram_rescaled_sentence_likelihood
from spcoslam.base.core import (
    PhonemeString,
    Pose2D,
    RandomSource,
    WordSequence,
    substitute_phonemes,
)
from spcoslam.base.lexicon import (
    LanguageModel,
    RecognitionNoiseSpec,
    best_segmentation,
    recognize,
)
from spcoslam.base.slam import OccupancyGrid
from spcoslam.base.world import GroundTruthWorld

logger = logging.getLogger(__name__)

PRR_MARGIN = 0.5
SAMPLES_PER_POSITION = 10


@dataclass
class ClusteringPair:
    predicted: Sequence[int]
    reference: Sequence[int]

    def __post_init__(self):
        if len(self.predicted) != len(self.reference) or len(self.predicted) < 1:
            raise ValueError("Clusterings must be non-empty and of equal length")


def nmi(pair: ClusteringPair) -> float:
    """Mutual information normalized by the geometric mean of the two entropies."""
    return float(
        normalized_mutual_info_score(
            pair.reference, pair.predicted, average_method="geometric"
        )
    )


def ear(n_true: int, n_est: int) -> float:
    if n_true < 1:
        raise ValueError("The true number of clusters must be at least 1")
    return max(1.0 - abs(n_true - n_est) / n_true, 0.0)


@dataclass
class PlaceQueryResult:
    query: PhonemeString
    candidates: np.ndarray
    scores: np.ndarray
    x_best: np.ndarray
    target_regions: tuple[int, ...] = ()
    correct: Optional[bool] = None


def query_utterance(world: GroundTruthWorld, name: PhonemeString, rng: RandomSource) -> PhonemeString:
    """The query phrase wrapped around a place name, through the world's phoneme channel."""
    prefix = world.query_phrase[:1]
    suffix = world.query_phrase[1:]
    clean = "".join((*prefix, name, *suffix))
    return substitute_phonemes(clean, world.phoneme_noise, world.alphabet, rng)


def place_recognition(
    query: PhonemeString,
    params: ConceptParams,
    lm: LanguageModel,
    rng: RandomSource,
    noise: Optional[RecognitionNoiseSpec] = None,
    samples_per_position: int = SAMPLES_PER_POSITION,
) -> PlaceQueryResult:
    """Most probable position for an utterance, summed over its recognition candidates."""
    if params.K < 1:
        raise ValueError("The model has no position distributions")
    lattice = recognize(query, lm, noise or RecognitionNoiseSpec(), rng.fork(0))
    if len(lattice) == 0:
        raise ValueError("Recognition produced no candidates")

    sampler = rng.fork(1)
    candidates = np.concatenate(
        [
            sampler.multivariate_normal(params.mu[k], params.Sigma[k], samples_per_position)
            for k in range(params.K)
        ]
    )
    # log N(x | mu_k, Sigma_k) for every candidate position and every k
    log_gauss = np.stack(
        [
            multivariate_normal.logpdf(candidates, params.mu[k], params.Sigma[k])
            for k in range(params.K)
        ],
        axis=1,
    ).reshape(len(candidates), params.K)
    with np.errstate(divide="ignore"):
        log_phi = np.log(params.phi[:, : params.K])
        log_pi = np.log(params.pi[: params.L])

    # per concept: log sum_k phi_lk N(x | mu_k, Sigma_k)
    position_terms = logsumexp(log_phi[None, :, :] + log_gauss[:, None, :], axis=2)

    per_candidate = []
    for string in lattice.strings:
        words, _ = best_segmentation(string, lm)
        word_terms = np.array(
            [unigram_rescaled_sentence_likelihood(params, lm, words, l) for l in range(params.L)]
        )
        per_candidate.append(
            logsumexp(log_pi[None, :] + word_terms[None, :] + position_terms, axis=1)
        )
    scores = logsumexp(np.stack(per_candidate), axis=0)
    best = int(np.argmax(scores))
    return PlaceQueryResult(query, candidates, scores, candidates[best])


def teaching_boxes(
    place_ids: Sequence[int], poses: Sequence[Pose2D]
) -> dict[int, tuple[float, float, float, float]]:
    """Bounding box of the teaching poses of every taught region."""
    boxes: dict[int, list[float]] = {}
    for region, pose in zip(place_ids, poses):
        if region not in boxes:
            boxes[region] = [pose.x, pose.y, pose.x, pose.y]
        box = boxes[region]
        box[0], box[1] = min(box[0], pose.x), min(box[1], pose.y)
        box[2], box[3] = max(box[2], pose.x), max(box[3], pose.y)
    return {region: tuple(box) for region, box in boxes.items()}  # type: ignore[misc]


def prr(
    results: Sequence[PlaceQueryResult],
    boxes: Mapping[int, tuple[float, float, float, float]],
    margin: float = PRR_MARGIN,
) -> float:
    """Fraction of queries whose best position falls in a target region's dilated teaching box."""
    if not results:
        raise ValueError("At least one query result is required")
    n_correct = 0
    for result in results:
        x, y = float(result.x_best[0]), float(result.x_best[1])
        result.correct = any(
            region in boxes
            and boxes[region][0] - margin <= x <= boxes[region][2] + margin
            and boxes[region][1] - margin <= y <= boxes[region][3] + margin
            for region in result.target_regions
        )
        n_correct += result.correct
    return n_correct / len(results)


def segmentation_count_report(
    runs: Mapping[str, Sequence[tuple[int, int]]],
    references: Optional[Mapping[str, Sequence[WordSequence]]] = None,
    steps: Optional[Sequence[int]] = None,
) -> pd.DataFrame:
    """Word-token counts per step for each run plus oracle segmentations of the same corpus.

    runs maps a configuration label to (step, token count) pairs; references
    maps a label such as "phrase" or "morpheme" to the per-event oracle
    segmentations, counted cumulatively at the given steps.
    """
    rows = []
    for label in sorted(runs):
        for step, count in runs[label]:
            rows.append({"step": int(step), "configuration": label, "word_tokens": int(count)})
    references = references or {}
    for label in sorted(references):
        counts = np.cumsum([len(words) for words in references[label]])
        event_steps = steps if steps is not None else range(1, len(counts) + 1)
        for step, count in zip(event_steps, counts):
            rows.append({"step": int(step), "configuration": label, "word_tokens": int(count)})
    return pd.DataFrame(rows, columns=["step", "configuration", "word_tokens"])


def pose_rmse(estimated: Sequence[Pose2D], truth: Sequence[Pose2D]) -> float:
    if len(estimated) != len(truth) or not truth:
        raise ValueError("Trajectories must be non-empty and of equal length")
    est = np.array([p.position() for p in estimated])
    ref = np.array([p.position() for p in truth])
    return float(math.sqrt(np.mean(np.sum((est - ref) ** 2, axis=1))))


def map_accuracy(grid: OccupancyGrid, world: GroundTruthWorld) -> float:
    """Share of decisively classified observed cells that agree with the true grid."""
    occupied = grid.occupied_mask()
    decided = occupied | grid.free_mask()
    if not decided.any():
        return 0.0
    iy, ix = np.nonzero(decided)
    xs = grid.origin[0] + (ix + 0.5) * grid.resolution
    ys = grid.origin[1] + (iy + 0.5) * grid.resolution
    truth = world.occupied(xs, ys)
    return float(np.mean(truth == occupied[iy, ix]))
