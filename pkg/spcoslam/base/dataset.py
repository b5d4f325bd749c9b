"""
Dataset generation and files

A dataset directory holds three files:
- world.json: grid geometry, place regions, lexicon and the dataset header
- world.pgm: the true occupancy grid (north up, occupied black)
- steps.jsonl: one record per time step {t, control, scan, true_pose, teaching_event?}
"""

from __future__ import annotations

import json
import logging
import os
from dataclasses import asdict, dataclass, field
from typing import Iterable, Optional

import cv2
import numpy as np

from spcoslam.base.core import (
    Control,
    ImageFeature,
    LaserScan,
    Pose2D,
    RandomSource,
    WordSequence,
)
from spcoslam.base.errors import ConfigError, DatasetError
from spcoslam.base.slam import MotionNoise
from spcoslam.base.world import (
    CarrierPhrase,
    GroundTruthWorld,
    PlaceRegion,
    ScanSpec,
    TeachingEvent,
    WorldConfig,
    emit_teaching_event,
    generate_world,
    plan_route,
    scripted_trajectory,
    simulate_odometry,
    simulate_scan,
)

logger = logging.getLogger(__name__)

SCHEMA_VERSION = 1
WORLD_JSON = "world.json"
WORLD_PGM = "world.pgm"
STEPS_JSONL = "steps.jsonl"

# stream purposes for the dataset RNG
_WORLD, _TOUR, _SENSORS = 0, 1, 2


@dataclass
class DatasetConfig:
    n_teaching_events: int = 50
    step_len: float = 0.3
    start: tuple[float, float] = (5.0, 5.0)
    scan: ScanSpec = field(default_factory=ScanSpec)
    motion_noise: MotionNoise = field(default_factory=MotionNoise)

    def __post_init__(self):
        self.start = tuple(float(v) for v in self.start)  # type: ignore[assignment]
        if self.n_teaching_events < 0:
            raise ConfigError("n_teaching_events must be non-negative")
        if self.step_len <= 0:
            raise ConfigError("step_len must be positive")


@dataclass(eq=False)
class StepRecord:
    t: int
    control: Control
    scan: LaserScan
    true_pose: Pose2D
    teaching: Optional[TeachingEvent] = None


@dataclass(eq=False)
class Dataset:
    world: GroundTruthWorld
    steps: list[StepRecord]
    header: dict = field(default_factory=dict)

    @property
    def teaching_events(self) -> list[TeachingEvent]:
        return [s.teaching for s in self.steps if s.teaching is not None]


def _tour(world: GroundTruthWorld, config: DatasetConfig, rng: RandomSource):
    """True poses for a tour of the place regions plus the arrival step of each event."""
    start = np.array(config.start)
    if not world.is_free(*start):
        raise ConfigError(f"Dataset start {tuple(start)} is not in free space")
    poses = [Pose2D(start[0], start[1], 0.0)]
    arrivals: list[int] = []

    # without teaching the robot still visits every place once
    n_visits = config.n_teaching_events or len(world.places)
    order: list[int] = []
    for _ in range(n_visits):
        if not order:
            order = [int(i) for i in rng.permutation(len(world.places))]
        region = world.places[order.pop(0)]
        xmin, ymin, xmax, ymax = region.box
        goal = (rng.uniform(xmin, xmax), rng.uniform(ymin, ymax))
        here = poses[-1]
        waypoints = plan_route(world, (here.x, here.y), goal)
        leg = scripted_trajectory(world, waypoints, config.step_len)
        poses.extend(leg[1:])
        arrivals.append(len(poses) - 1)
    return poses, arrivals


def generate_dataset(
    world_config: WorldConfig, config: DatasetConfig, rng: RandomSource
) -> Dataset:
    world = generate_world(world_config, rng.fork(_WORLD))
    poses, arrivals = _tour(world, config, rng.fork(_TOUR))
    teach_at = set(arrivals) if config.n_teaching_events else set()
    sensors = rng.fork(_SENSORS)

    steps = []
    for t, pose in enumerate(poses):
        if t == 0:
            control = Control(0.0, 0.0, 0.0)
        else:
            control = simulate_odometry(poses[t - 1], pose, config.motion_noise, sensors)
        scan = simulate_scan(world, pose, config.scan, sensors)
        teaching = emit_teaching_event(world, pose, t, sensors) if t in teach_at else None
        steps.append(StepRecord(t, control, scan, pose, teaching))

    header = {
        "start_pose": list(poses[0].as_array()),
        "scan": asdict(config.scan),
        "motion_noise": asdict(config.motion_noise),
        "step_len": config.step_len,
        "n_steps": len(steps),
        "n_teaching_events": len(teach_at),
    }
    logger.info(
        f"Generated dataset with {len(steps)} steps and {len(teach_at)} teaching events"
    )
    return Dataset(world, steps, header)


def _world_to_json(world: GroundTruthWorld, header: dict) -> dict:
    return {
        "schema_version": SCHEMA_VERSION,
        "template": world.template,
        "resolution": world.resolution,
        "origin": list(world.origin),
        "width_cells": world.width_cells,
        "height_cells": world.height_cells,
        "phoneme_noise": world.phoneme_noise,
        "feature_dim": world.feature_dim,
        "feature_total": world.feature_total,
        "alphabet": world.alphabet,
        "names": list(world.names),
        "query_phrase": list(world.query_phrase),
        "places": [
            {
                "id": p.id,
                "box": list(p.box),
                "name": p.name,
                "carrier_phrases": [
                    {"prefix": list(c.prefix_morphemes), "suffix": list(c.suffix_morphemes)}
                    for c in p.carrier_phrases
                ],
                "feature_profile": [float(v) for v in p.feature_profile],
            }
            for p in world.places
        ],
        "dataset": header,
    }


def _teaching_to_json(event: TeachingEvent) -> dict:
    record = {
        "true_place_id": event.true_place_id,
        "utterance": event.utterance,
        "true_segmentation": list(event.true_segmentation.words),
        "feature": [int(v) for v in event.feature.counts],
    }
    if event.morpheme_segmentation is not None:
        record["morpheme_segmentation"] = list(event.morpheme_segmentation.words)
    return record


def step_to_json(step: StepRecord) -> dict:
    angles = step.scan.angles
    increment = float(angles[1] - angles[0]) if angles.size > 1 else 0.0
    record = {
        "t": step.t,
        "control": {"rot1": step.control.rot1, "trans": step.control.trans, "rot2": step.control.rot2},
        "scan": {
            "angle_min": float(angles[0]) if angles.size else 0.0,
            "angle_increment": increment,
            "n": int(angles.size),
            "max_range": step.scan.max_range,
            "ranges": [float(r) for r in step.scan.ranges],
        },
        "true_pose": [step.true_pose.x, step.true_pose.y, step.true_pose.theta],
    }
    if step.teaching is not None:
        record["teaching_event"] = _teaching_to_json(step.teaching)
    return record


def step_from_json(record: dict) -> StepRecord:
    try:
        t = int(record["t"])
        scan = record["scan"]
        angles = scan["angle_min"] + scan["angle_increment"] * np.arange(scan["n"])
        teaching = None
        if "teaching_event" in record:
            ev = record["teaching_event"]
            morphemes = ev.get("morpheme_segmentation")
            teaching = TeachingEvent(
                t=t,
                true_place_id=int(ev["true_place_id"]),
                utterance=ev["utterance"],
                true_segmentation=WordSequence(tuple(ev["true_segmentation"])),
                feature=ImageFeature(ev["feature"]),
                morpheme_segmentation=WordSequence(tuple(morphemes)) if morphemes else None,
            )
        return StepRecord(
            t=t,
            control=Control(**record["control"]),
            scan=LaserScan(angles, scan["ranges"], scan["max_range"]),
            true_pose=Pose2D.from_array(record["true_pose"]),
            teaching=teaching,
        )
    except (KeyError, TypeError, ValueError) as e:
        raise DatasetError(f"Malformed step record: {e}") from e


def write_dataset(dataset: Dataset, directory: str) -> None:
    os.makedirs(directory, exist_ok=True)
    with open(os.path.join(directory, WORLD_JSON), "w") as f:
        json.dump(_world_to_json(dataset.world, dataset.header), f, indent=2)
    image = np.where(dataset.world.true_grid, 0, 254).astype(np.uint8)
    if not cv2.imwrite(os.path.join(directory, WORLD_PGM), np.flipud(image)):
        raise DatasetError(f"Could not write {WORLD_PGM} to {directory}")
    write_steps(dataset.steps, os.path.join(directory, STEPS_JSONL))


def write_steps(steps: Iterable[StepRecord], path: str) -> None:
    with open(path, "w") as f:
        for step in steps:
            f.write(json.dumps(step_to_json(step)) + "\n")


def read_world(directory: str) -> tuple[GroundTruthWorld, dict]:
    json_path = os.path.join(directory, WORLD_JSON)
    pgm_path = os.path.join(directory, WORLD_PGM)
    if not os.path.exists(json_path) or not os.path.exists(pgm_path):
        raise DatasetError(f"Dataset directory {directory} is missing world files")
    with open(json_path) as f:
        try:
            data = json.load(f)
        except json.JSONDecodeError as e:
            raise DatasetError(f"Cannot parse {json_path}: {e}") from e
    if data.get("schema_version") != SCHEMA_VERSION:
        raise DatasetError(
            f"Unsupported dataset schema {data.get('schema_version')!r}, expected {SCHEMA_VERSION}"
        )

    image = cv2.imread(pgm_path, cv2.IMREAD_UNCHANGED)
    if image is None:
        raise DatasetError(f"Cannot read {pgm_path}")
    grid = np.flipud(image) < 128
    try:
        if grid.shape != (data["height_cells"], data["width_cells"]):
            raise DatasetError("world.pgm does not match the grid size in world.json")
        places = [
            PlaceRegion(
                id=p["id"],
                box=tuple(p["box"]),
                name=p["name"],
                carrier_phrases=tuple(
                    CarrierPhrase(tuple(c["prefix"]), tuple(c["suffix"]))
                    for c in p["carrier_phrases"]
                ),
                feature_profile=np.array(p["feature_profile"]),
            )
            for p in data["places"]
        ]
        world = GroundTruthWorld(
            true_grid=grid,
            resolution=data["resolution"],
            origin=tuple(data["origin"]),
            places=places,
            phoneme_noise=data["phoneme_noise"],
            feature_dim=data["feature_dim"],
            feature_total=data["feature_total"],
            alphabet=data["alphabet"],
            query_phrase=tuple(data["query_phrase"]),
            template=data["template"],
            names=list(data["names"]),
        )
    except (KeyError, TypeError, ValueError) as e:
        raise DatasetError(f"Malformed world file {json_path}: {e}") from e
    return world, data.get("dataset", {})


def read_steps(path: str) -> list[StepRecord]:
    if not os.path.exists(path):
        raise DatasetError(f"Step stream {path} does not exist")
    steps = []
    with open(path) as f:
        for lineno, line in enumerate(f, start=1):
            if not line.strip():
                continue
            try:
                record = json.loads(line)
            except json.JSONDecodeError as e:
                raise DatasetError(f"{path}:{lineno}: {e}") from e
            steps.append(step_from_json(record))
    if [s.t for s in steps] != list(range(len(steps))):
        raise DatasetError(f"{path}: step indices must run 0..T without gaps")
    return steps


def read_dataset(directory: str) -> Dataset:
    world, header = read_world(directory)
    steps = read_steps(os.path.join(directory, STEPS_JSONL))
    return Dataset(world, steps, header)
