import math
import warnings

import numpy as np
import pytest

from spcoslam.base.core import Pose2D, seeded_rng
from spcoslam.base.errors import ConfigError, WorldGenerationError
from spcoslam.base.slam import MotionNoise
from spcoslam.base.world import (
    GroundTruthWorld,
    ScanSpec,
    WorldConfig,
    emit_teaching_event,
    generate_world,
    plan_route,
    raycast,
    scripted_trajectory,
    simulate_odometry,
    simulate_scan,
)


@pytest.fixture(scope="module")
def world():
    return generate_world(WorldConfig(phoneme_noise=0.0), seeded_rng(11))


@pytest.fixture
def wall_world():
    """4m x 4m world, free except for a wall in the column starting at x = 3.0."""
    grid = np.zeros((80, 80), dtype=bool)
    grid[:, 60] = True
    return GroundTruthWorld(
        true_grid=grid, resolution=0.05, origin=(0.0, 0.0), places=[], phoneme_noise=0.0, feature_dim=4
    )


def test_generated_world_has_all_names(world):
    assert len(world.places) == 10
    assert len(world.names) == 9
    assert len(set(world.names)) == 9
    assert {p.name for p in world.places} == set(world.names)
    assert len(world.query_phrase) == 2


def test_regions_lie_in_free_space(world):
    for place in world.places:
        x, y = place.center
        assert world.is_free(x, y)
        assert world.region_at(x, y) is place
        assert place.feature_profile.sum() == pytest.approx(1.0)


def test_world_generation_is_reproducible():
    a = generate_world(WorldConfig(), seeded_rng(3))
    b = generate_world(WorldConfig(), seeded_rng(3))
    assert a.names == b.names
    assert [p.box for p in a.places] == [p.box for p in b.places]


def test_world_generation_fails_without_room():
    config = WorldConfig(width=2.0, height=2.0, n_places=5, n_names=5, max_retries=5)
    with pytest.raises(WorldGenerationError):
        generate_world(config, seeded_rng(0))


@pytest.mark.parametrize(
    "overrides",
    [{"template": "maze"}, {"n_names": 11}, {"phoneme_noise": 1.0}, {"alphabet": "aa"}],
)
def test_world_config_validation(overrides):
    with pytest.raises(ConfigError):
        WorldConfig(**overrides)


def test_raycast_hits_wall_boundary(wall_world):
    ranges = raycast(wall_world, Pose2D(1.01, 2.0, 0.0), np.array([0.0, math.pi]), 5.0)
    assert ranges[0] == pytest.approx(1.99, abs=1e-9)
    assert ranges[1] == 5.0


def test_raycast_along_cell_boundary_is_silent():
    grid = np.zeros((16, 16), dtype=bool)
    grid[:, 12] = True
    coarse = GroundTruthWorld(
        true_grid=grid, resolution=0.25, origin=(0.0, 0.0), places=[], phoneme_noise=0.0, feature_dim=4
    )
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        ranges = raycast(coarse, Pose2D(1.0, 2.0, 0.0), np.array([0.0]), 5.0)
    assert ranges[0] == pytest.approx(2.0)


def test_scan_angles_cover_field_of_view():
    spec = ScanSpec(n_beams=4, fov=math.pi)
    assert spec.angles() == pytest.approx([-math.pi / 2, -math.pi / 4, 0.0, math.pi / 4])


def test_simulate_scan_rejects_pose_in_obstacle(wall_world):
    with pytest.raises(ValueError):
        simulate_scan(wall_world, Pose2D(3.02, 2.0, 0.0), ScanSpec(), seeded_rng(0))


def test_simulate_scan_clips_to_max_range(wall_world):
    scan = simulate_scan(wall_world, Pose2D(1.0, 2.0, 0.0), ScanSpec(n_beams=36), seeded_rng(0))
    assert len(scan) == 36
    assert scan.ranges.max() <= 8.0
    assert scan.ranges.min() >= 0.0


def test_noise_free_odometry_recovers_relative_motion():
    u = simulate_odometry(Pose2D(0, 0, 0), Pose2D(1, 0, 0), MotionNoise(0, 0, 0, 0), seeded_rng(0))
    assert (u.rot1, u.trans, u.rot2) == pytest.approx((0.0, 1.0, 0.0))


def test_teaching_event_without_noise(world):
    place = world.places[0]
    x, y = place.center
    event = emit_teaching_event(world, Pose2D(x, y, 0.0), 4, seeded_rng(1))
    assert event.t == 4
    assert event.true_place_id == place.id
    assert event.utterance == event.true_segmentation.joined()
    assert place.name in event.true_segmentation.words
    assert event.morpheme_segmentation.joined() == event.utterance
    assert event.feature.total == world.feature_total
    assert event.feature.dim == world.feature_dim


def test_teaching_event_outside_places(world):
    with pytest.raises(ValueError):
        emit_teaching_event(world, Pose2D(0.1, 0.1, 0.0), 1, seeded_rng(0))


def test_scripted_trajectory_spacing(wall_world):
    poses = scripted_trajectory(wall_world, [(1.0, 1.0), (2.0, 1.0)], 0.3)
    assert len(poses) == 5
    assert (poses[-1].x, poses[-1].y) == pytest.approx((2.0, 1.0))
    assert all(p.theta == pytest.approx(0.0) for p in poses)


def test_scripted_trajectory_rejects_blocked_segment(wall_world):
    with pytest.raises(ValueError):
        scripted_trajectory(wall_world, [(1.0, 1.0), (3.5, 1.0)], 0.3)


def test_plan_route_passes_through_doors(world):
    route = plan_route(world, (5.0, 5.0), (15.0, 15.0))
    assert route[0] == (5.0, 5.0)
    assert route[-1] == (15.0, 15.0)
    poses = scripted_trajectory(world, route, 0.3)
    assert all(world.is_free(p.x, p.y) for p in poses)
