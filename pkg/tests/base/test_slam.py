import math

import numpy as np
import pytest
from scipy.stats import norm

from spcoslam.base.core import Control, LaserScan, Pose2D, seeded_rng
from spcoslam.base.errors import ConfigError
from spcoslam.base.slam import (
    LikelihoodFieldSpec,
    MotionNoise,
    OccupancyGrid,
    SearchSpec,
    measurement_model,
    observation_weight,
    sample_motion_model,
    sample_motion_poses,
    scan_matching,
    update_occupancy_grid,
)


@pytest.fixture
def wall_map():
    """4m x 4m fully observed map with a wall in the column starting at x = 3.0."""
    grid = OccupancyGrid.empty(4.0, 4.0, 0.05)
    grid.observed[:] = True
    grid.cells[:] = grid.l_min
    grid.cells[:, 60] = grid.l_max
    grid.mark_changed()
    return grid


@pytest.fixture
def wall_scan():
    angles = np.linspace(-0.5, 0.5, 21)
    ranges = (3.025 - 1.0) / np.cos(angles)
    return LaserScan(angles, ranges, 8.0)


def test_empty_grid_dimensions():
    grid = OccupancyGrid.empty(2.0, 1.0, 0.05, (-1.0, 0.5))
    assert (grid.width, grid.height) == (40, 20)
    assert grid.origin == (-1.0, 0.5)
    assert not grid.observed.any()
    assert grid.probabilities() == pytest.approx(np.full((20, 40), 0.5))


def test_update_marks_free_cells_and_endpoint():
    grid = OccupancyGrid.empty(2.0, 2.0, 0.1)
    scan = LaserScan([0.0], [1.0], 5.0)
    update_occupancy_grid(scan, Pose2D(0.05, 1.05, 0.0), grid)
    assert grid.cells[10, 10] == pytest.approx(grid.l_occ)
    assert grid.cells[10, 0:10] == pytest.approx(np.full(10, grid.l_free))
    assert grid.observed[10, 0:11].all()
    assert not grid.observed[0, 0]


def test_max_range_beam_marks_no_obstacle():
    grid = OccupancyGrid.empty(2.0, 2.0, 0.1)
    scan = LaserScan([0.0], [1.0], 1.0)
    update_occupancy_grid(scan, Pose2D(0.05, 1.05, 0.0), grid)
    assert (grid.cells <= 0).all()
    assert grid.cells[10, 5] == pytest.approx(grid.l_free)


def test_log_odds_are_clamped():
    grid = OccupancyGrid.empty(2.0, 2.0, 0.1)
    scan = LaserScan([0.0], [1.0], 5.0)
    for _ in range(20):
        update_occupancy_grid(scan, Pose2D(0.05, 1.05, 0.0), grid)
    assert grid.cells.max() == pytest.approx(grid.l_max)
    assert grid.cells.min() == pytest.approx(grid.l_min)


def test_image_round_trip_keeps_classification():
    grid = OccupancyGrid.empty(2.0, 2.0, 0.1)
    scan = LaserScan([0.0, 1.0], [1.0, 0.7], 5.0)
    for _ in range(2):
        update_occupancy_grid(scan, Pose2D(0.05, 1.05, 0.0), grid)
    rebuilt = OccupancyGrid.from_image(grid.to_image(), grid.resolution, grid.origin)
    np.testing.assert_array_equal(rebuilt.occupied_mask(), grid.occupied_mask())
    np.testing.assert_array_equal(rebuilt.free_mask(), grid.free_mask())


def test_grid_copy_is_independent():
    grid = OccupancyGrid.empty(1.0, 1.0, 0.1)
    clone = grid.copy()
    clone.cells[0, 0] = 3.0
    assert grid.cells[0, 0] == 0.0


def test_measurement_model_prefers_true_pose(wall_map, wall_scan):
    spec = LikelihoodFieldSpec()
    at_truth = measurement_model(wall_scan, Pose2D(1.0, 2.0, 0.0), wall_map, spec)
    shifted = measurement_model(wall_scan, Pose2D(1.3, 2.0, 0.0), wall_map, spec)
    assert at_truth > shifted


def test_max_range_beams_contribute_nothing(wall_map):
    spec = LikelihoodFieldSpec()
    scan = LaserScan(np.zeros(8), np.full(8, 8.0), 8.0)
    assert measurement_model(scan, Pose2D(1.0, 2.0, 0.0), wall_map, spec) == 0.0


def test_scan_matching_moves_toward_truth(wall_map, wall_scan):
    spec = LikelihoodFieldSpec()
    start = Pose2D(1.1, 2.0, 0.0)
    matched = scan_matching(wall_scan, start, wall_map, spec)
    assert abs(matched.x - 1.0) < 0.06
    assert measurement_model(wall_scan, matched, wall_map, spec) >= measurement_model(
        wall_scan, start, wall_map, spec
    )


def test_scan_matching_returns_start_on_flat_objective(wall_scan):
    unknown = OccupancyGrid.empty(4.0, 4.0, 0.05)
    start = Pose2D(1.0, 2.0, 0.1)
    assert scan_matching(wall_scan, start, unknown, LikelihoodFieldSpec()) is start


def test_noise_free_motion_is_deterministic():
    pose = sample_motion_model(
        Control(math.pi / 2, 1.0, 0.0), Pose2D(0.0, 0.0, 0.0), MotionNoise(0, 0, 0, 0), seeded_rng(0)
    )
    assert pose.x == pytest.approx(0.0, abs=1e-12)
    assert pose.y == pytest.approx(1.0)
    assert pose.theta == pytest.approx(math.pi / 2)


def test_motion_samples_spread_with_noise():
    poses = sample_motion_poses(
        Control(0.0, 1.0, 0.0), Pose2D(0.0, 0.0, 0.0), MotionNoise(), seeded_rng(0), 500
    )
    assert poses.shape == (500, 3)
    assert poses[:, 0].std() > 0
    assert poses[:, 0].mean() == pytest.approx(1.0, abs=0.05)


def test_observation_weight_without_noise_equals_measurement(wall_map, wall_scan):
    spec = LikelihoodFieldSpec()
    x_prev = Pose2D(1.0, 2.0, 0.0)
    weight = observation_weight(
        wall_scan, Control(0.0, 0.0, 0.0), x_prev, wall_map, 5, seeded_rng(0), MotionNoise(0, 0, 0, 0), spec
    )
    assert weight == pytest.approx(measurement_model(wall_scan, x_prev, wall_map, spec))


def test_observation_weight_requires_samples(wall_map, wall_scan):
    with pytest.raises(ValueError):
        observation_weight(wall_scan, Control(0, 0, 0), Pose2D(1, 2, 0), wall_map, 0, seeded_rng(0))


def test_likelihood_spec_validation():
    with pytest.raises(ConfigError):
        LikelihoodFieldSpec(sigma_hit=0.0)
    with pytest.raises(ConfigError):
        LikelihoodFieldSpec(z_hit=0.8, z_rand=0.5)


def test_search_spec_validation():
    with pytest.raises(ConfigError):
        SearchSpec(stride=0)
    with pytest.raises(ConfigError):
        SearchSpec(refinements=0)


def test_random_term_uses_the_effective_max_range():
    spec = LikelihoodFieldSpec(stride=1)
    unknown = OccupancyGrid.empty(4.0, 4.0, 0.05)
    scan = LaserScan([0.0], [1.0], 4.0)
    expected = math.log(spec.z_hit * norm.pdf(spec.distance_cap, 0.0, spec.sigma_hit) + spec.z_rand / 4.0)
    assert measurement_model(scan, Pose2D(1.0, 2.0, 0.0), unknown, spec) == pytest.approx(expected)


def test_update_stays_within_max_range():
    grid = OccupancyGrid.empty(10.0, 10.0, 0.1)
    angles = np.linspace(-math.pi, math.pi, 72, endpoint=False)
    ranges = np.where(np.arange(72) % 2 == 0, 1.0, 2.0)
    pose = Pose2D(5.05, 5.05, 0.3)
    update_occupancy_grid(LaserScan(angles, ranges, 2.0), pose, grid)

    iy, ix = np.nonzero(grid.observed)
    assert np.array_equal(np.nonzero(grid.cells), (iy, ix))
    centres_x = (ix + 0.5) * grid.resolution
    centres_y = (iy + 0.5) * grid.resolution
    dist = np.hypot(centres_x - pose.x, centres_y - pose.y)
    assert dist.max() <= 2.0 + 2 * grid.resolution
    assert dist.max() > 1.8
