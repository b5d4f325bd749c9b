from collections import Counter

import numpy as np
import pytest

from spcoslam.base.concepts import ConceptParams
from spcoslam.base.core import Pose2D, WordSequence, seeded_rng
from spcoslam.base.evaluation import (
    ClusteringPair,
    PlaceQueryResult,
    ear,
    map_accuracy,
    nmi,
    place_recognition,
    pose_rmse,
    prr,
    query_utterance,
    segmentation_count_report,
    teaching_boxes,
)
from spcoslam.base.lexicon import LanguageModel, RecognitionNoiseSpec
from spcoslam.base.slam import OccupancyGrid
from spcoslam.base.world import GroundTruthWorld


@pytest.fixture
def two_place_params():
    """Concept 0 says "koko" at (0, 0); concept 1 says "wa" at (10, 10)."""
    return ConceptParams(
        pi=np.array([0.45, 0.45, 0.1]),
        phi=np.array([[0.98, 0.01, 0.01], [0.01, 0.98, 0.01]]),
        W=np.array([[0.99, 0.01], [0.01, 0.99]]),
        theta=np.full((2, 4), 0.25),
        mu=np.array([[0.0, 0.0], [10.0, 10.0]]),
        Sigma=np.array([np.eye(2) * 0.01, np.eye(2) * 0.01]),
        vocab=["koko", "wa"],
        concept_of_k=[0, 1],
    )


@pytest.fixture
def lm():
    return LanguageModel(Counter({"koko": 10, "wa": 10}), lam=1.0)


def test_nmi_identical_labels():
    assert nmi(ClusteringPair([0, 0, 1, 2], [0, 0, 1, 2])) == pytest.approx(1.0)


def test_nmi_relabeled_permutation():
    assert nmi(ClusteringPair([5, 5, 3, 3, 7], [0, 0, 1, 1, 2])) == pytest.approx(1.0)


def test_nmi_independent_labels():
    assert nmi(ClusteringPair([0, 0, 1, 1], [0, 1, 0, 1])) == pytest.approx(0.0, abs=1e-12)


def test_clustering_pair_validation():
    with pytest.raises(ValueError):
        ClusteringPair([0, 1], [0])
    with pytest.raises(ValueError):
        ClusteringPair([], [])


@pytest.mark.parametrize("n_est, expected", [(10, 1.0), (19, 0.1), (25, 0.0), (5, 0.5)])
def test_ear(n_est, expected):
    assert ear(10, n_est) == pytest.approx(expected)


def test_ear_requires_true_clusters():
    with pytest.raises(ValueError):
        ear(0, 3)


def test_place_recognition_finds_named_place(two_place_params, lm):
    noise = RecognitionNoiseSpec(sub=0.0)
    result = place_recognition("koko", two_place_params, lm, seeded_rng(0), noise)
    assert np.linalg.norm(result.x_best) < 1.0
    assert len(result.candidates) == 20
    assert any(np.array_equal(result.x_best, c) for c in result.candidates)

    other = place_recognition("wa", two_place_params, lm, seeded_rng(0), noise)
    assert np.linalg.norm(other.x_best - np.array([10.0, 10.0])) < 1.0


def test_place_recognition_requires_positions(two_place_params, lm):
    empty = ConceptParams(
        pi=np.array([1.0]),
        phi=np.zeros((0, 1)),
        W=np.zeros((0, 0)),
        theta=np.zeros((0, 4)),
        mu=np.zeros((0, 2)),
        Sigma=np.zeros((0, 2, 2)),
        vocab=[],
        concept_of_k=[],
    )
    with pytest.raises(ValueError):
        place_recognition("koko", empty, lm, seeded_rng(0))


def test_teaching_boxes():
    poses = [Pose2D(1.0, 2.0), Pose2D(1.5, 1.0), Pose2D(8.0, 8.0)]
    boxes = teaching_boxes([3, 3, 5], poses)
    assert boxes == {3: (1.0, 1.0, 1.5, 2.0), 5: (8.0, 8.0, 8.0, 8.0)}


def query_result(x, y, regions):
    point = np.array([x, y])
    return PlaceQueryResult("q", point[None, :], np.zeros(1), point, target_regions=regions)


def test_prr_uses_dilated_teaching_boxes():
    boxes = {0: (0.0, 0.0, 1.0, 1.0), 1: (5.0, 5.0, 6.0, 6.0)}
    results = [
        query_result(1.4, 0.5, (0,)),
        query_result(1.6, 0.5, (0,)),
        query_result(5.5, 5.5, (2, 1)),
        query_result(5.5, 5.5, (0,)),
    ]
    assert prr(results, boxes) == pytest.approx(0.5)
    assert [r.correct for r in results] == [True, False, True, False]


def test_prr_requires_results():
    with pytest.raises(ValueError):
        prr([], {})


def test_query_utterance_without_noise():
    world = GroundTruthWorld(
        true_grid=np.zeros((4, 4), dtype=bool),
        resolution=1.0,
        origin=(0.0, 0.0),
        places=[],
        phoneme_noise=0.0,
        feature_dim=4,
        query_phrase=("kokowa", "desuka"),
    )
    assert query_utterance(world, "heya", seeded_rng(0)) == "kokowaheyadesuka"


def test_segmentation_report_phrase_oracle():
    phrases = [WordSequence(("koko", "wa", "heya"))] * 50
    report = segmentation_count_report({}, {"phrase": phrases})
    assert report["word_tokens"].iloc[-1] == 150
    assert report["step"].tolist() == list(range(1, 51))


def test_segmentation_report_runs_and_steps():
    report = segmentation_count_report(
        {"A": [(3, 2), (7, 5)]},
        {"morpheme": [WordSequence(("a", "b")), WordSequence(("c",))]},
        steps=[3, 7],
    )
    assert report.values.tolist() == [[3, "A", 2], [7, "A", 5], [3, "morpheme", 2], [7, "morpheme", 3]]


def test_pose_rmse():
    truth = [Pose2D(0.0, 0.0), Pose2D(1.0, 0.0)]
    estimated = [Pose2D(0.0, 0.0), Pose2D(1.0, 2.0)]
    assert pose_rmse(estimated, truth) == pytest.approx(np.sqrt(2.0))
    with pytest.raises(ValueError):
        pose_rmse(estimated[:1], truth)


def test_map_accuracy_against_true_grid():
    true_grid = np.zeros((10, 10), dtype=bool)
    true_grid[:, 5] = True
    world = GroundTruthWorld(
        true_grid=true_grid,
        resolution=0.1,
        origin=(0.0, 0.0),
        places=[],
        phoneme_noise=0.0,
        feature_dim=4,
    )
    grid = OccupancyGrid.empty(1.0, 1.0, 0.1)
    assert map_accuracy(grid, world) == 0.0

    grid.observed[:] = True
    grid.cells[:] = grid.l_min
    grid.cells[:, 5] = grid.l_max
    grid.mark_changed()
    assert map_accuracy(grid, world) == pytest.approx(1.0)

    grid.cells[:, 6] = grid.l_max
    grid.mark_changed()
    assert map_accuracy(grid, world) == pytest.approx(0.9)
