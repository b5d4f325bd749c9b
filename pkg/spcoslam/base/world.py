"""
Synthetic 2D world

Builds a ground-truth occupancy grid with named place regions and simulates
what the robot perceives in it: raycast laser scans, noisy odometry and
teaching events (a carrier phrase around the place name, passed through a
phoneme substitution channel, together with multinomial scene features).
"""

from __future__ import annotations

import logging
import math
from collections import deque
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from scipy import ndimage

from spcoslam.base.core import (
    DEFAULT_ALPHABET,
    Control,
    ImageFeature,
    LaserScan,
    PhonemeString,
    Pose2D,
    RandomSource,
    WordSequence,
    normalize_angle,
    substitute_phonemes,
)
from spcoslam.base.errors import ConfigError, WorldGenerationError
from spcoslam.base.slam import MotionNoise

logger = logging.getLogger(__name__)

TEMPLATES = ("four_room", "empty")


@dataclass
class WorldConfig:
    template: str = "four_room"
    width: float = 20.0
    height: float = 20.0
    resolution: float = 0.05
    wall_thickness: float = 0.2
    door_width: float = 1.6
    n_places: int = 10
    n_names: int = 9
    region_size: float = 1.2
    region_clearance: float = 0.5
    name_length: tuple[int, int] = (4, 6)
    n_carrier_phrases: int = 10
    n_morphemes: int = 12
    phoneme_noise: float = 0.05
    feature_dim: int = 10
    feature_total: int = 50
    feature_concentration: float = 0.3
    alphabet: str = DEFAULT_ALPHABET
    max_retries: int = 200

    def __post_init__(self):
        self.name_length = tuple(self.name_length)  # type: ignore[assignment]
        if self.template not in TEMPLATES:
            raise ConfigError(f"Unknown world template {self.template!r}")
        if self.width <= 0 or self.height <= 0 or self.resolution <= 0:
            raise ConfigError("World dimensions and resolution must be positive")
        if self.n_places < 1:
            raise ConfigError("At least one place region is required")
        if not 1 <= self.n_names <= self.n_places:
            raise ConfigError("n_names must lie between 1 and n_places")
        if not 0.0 <= self.phoneme_noise < 1.0:
            raise ConfigError("phoneme_noise must lie in [0, 1)")
        if self.feature_dim < 1 or self.feature_total < 1:
            raise ConfigError("feature_dim and feature_total must be positive")
        if len(self.alphabet) < 2 or len(set(self.alphabet)) != len(self.alphabet):
            raise ConfigError("The phoneme alphabet needs at least two distinct symbols")


@dataclass
class ScanSpec:
    n_beams: int = 180
    fov: float = 2.0 * math.pi
    max_range: float = 8.0
    sigma: float = 0.01

    def angles(self) -> np.ndarray:
        increment = self.fov / self.n_beams
        return -self.fov / 2.0 + increment * np.arange(self.n_beams)


@dataclass(frozen=True)
class CarrierPhrase:
    prefix_morphemes: tuple[str, ...]
    suffix_morphemes: tuple[str, ...]

    @property
    def prefix(self) -> PhonemeString:
        return "".join(self.prefix_morphemes)

    @property
    def suffix(self) -> PhonemeString:
        return "".join(self.suffix_morphemes)


@dataclass(eq=False)
class PlaceRegion:
    id: int
    box: tuple[float, float, float, float]
    name: PhonemeString
    carrier_phrases: tuple[CarrierPhrase, ...]
    feature_profile: np.ndarray

    def __post_init__(self):
        self.box = tuple(float(v) for v in self.box)  # type: ignore[assignment]
        self.feature_profile = np.asarray(self.feature_profile, dtype=float)
        if not self.name:
            raise ValueError("Place names must be non-empty")
        if not np.isclose(self.feature_profile.sum(), 1.0):
            raise ValueError(f"Feature profile of region {self.id} does not sum to 1")

    def contains(self, x: float, y: float) -> bool:
        xmin, ymin, xmax, ymax = self.box
        return xmin <= x <= xmax and ymin <= y <= ymax

    @property
    def center(self) -> tuple[float, float]:
        xmin, ymin, xmax, ymax = self.box
        return (xmin + xmax) / 2.0, (ymin + ymax) / 2.0


@dataclass(eq=False)
class GroundTruthWorld:
    true_grid: np.ndarray
    resolution: float
    origin: tuple[float, float]
    places: list[PlaceRegion]
    phoneme_noise: float
    feature_dim: int
    feature_total: int = 50
    alphabet: str = DEFAULT_ALPHABET
    query_phrase: tuple[str, ...] = ()
    template: str = "four_room"
    names: list[PhonemeString] = field(default_factory=list)

    def __post_init__(self):
        self.true_grid = np.asarray(self.true_grid, dtype=bool)
        self.origin = (float(self.origin[0]), float(self.origin[1]))
        if [p.id for p in self.places] != list(range(len(self.places))):
            raise ValueError("Place region ids must be dense 0..P-1")
        if not self.names:
            self.names = list(dict.fromkeys(p.name for p in self.places))

    @property
    def height_cells(self) -> int:
        return int(self.true_grid.shape[0])

    @property
    def width_cells(self) -> int:
        return int(self.true_grid.shape[1])

    @property
    def size(self) -> tuple[float, float]:
        return self.width_cells * self.resolution, self.height_cells * self.resolution

    def world_to_cell(self, x, y):
        ix = np.floor((np.asarray(x) - self.origin[0]) / self.resolution).astype(np.int64)
        iy = np.floor((np.asarray(y) - self.origin[1]) / self.resolution).astype(np.int64)
        return ix, iy

    def occupied(self, x, y) -> np.ndarray:
        """Occupancy at world points; everything outside the grid is free."""
        ix, iy = self.world_to_cell(x, y)
        inside = (ix >= 0) & (ix < self.width_cells) & (iy >= 0) & (iy < self.height_cells)
        result = np.zeros(np.shape(ix), dtype=bool)
        result[inside] = self.true_grid[iy[inside], ix[inside]]
        return result

    def is_free(self, x: float, y: float) -> bool:
        return not bool(self.occupied(np.array([x]), np.array([y]))[0])

    def region_at(self, x: float, y: float) -> Optional[PlaceRegion]:
        for region in self.places:
            if region.contains(x, y):
                return region
        return None

    def name_index(self, name: PhonemeString) -> int:
        return self.names.index(name)


def _template_grid(config: WorldConfig) -> np.ndarray:
    width = int(round(config.width / config.resolution))
    height = int(round(config.height / config.resolution))
    grid = np.zeros((height, width), dtype=bool)
    if config.template == "empty":
        return grid

    xs = (np.arange(width) + 0.5) * config.resolution
    ys = (np.arange(height) + 0.5) * config.resolution
    X, Y = np.meshgrid(xs, ys)
    t = config.wall_thickness
    grid |= (X < t) | (X > config.width - t) | (Y < t) | (Y > config.height - t)

    cx, cy = config.width / 2.0, config.height / 2.0
    half_door = config.door_width / 2.0
    vertical = np.abs(X - cx) < t / 2.0
    horizontal = np.abs(Y - cy) < t / 2.0
    vertical_doors = (np.abs(Y - cy / 2.0) < half_door) | (np.abs(Y - 1.5 * cy) < half_door)
    horizontal_doors = (np.abs(X - cx / 2.0) < half_door) | (np.abs(X - 1.5 * cx) < half_door)
    grid |= vertical & ~vertical_doors
    grid |= horizontal & ~horizontal_doors
    return grid


def _random_word(rng: RandomSource, alphabet: str, length: int) -> str:
    return "".join(alphabet[i] for i in rng.integers(0, len(alphabet), length))


def _distinct_words(
    rng: RandomSource, alphabet: str, count: int, lengths: tuple[int, int], taken: set
) -> list[str]:
    words: list[str] = []
    while len(words) < count:
        word = _random_word(rng, alphabet, int(rng.integers(lengths[0], lengths[1] + 1)))
        if word not in taken:
            taken.add(word)
            words.append(word)
    return words


def _box_is_clear(
    grid: np.ndarray, resolution: float, box: tuple[float, float, float, float], margin: float
) -> bool:
    xmin, ymin, xmax, ymax = box
    height, width = grid.shape
    ix0 = int(math.floor((xmin - margin) / resolution))
    iy0 = int(math.floor((ymin - margin) / resolution))
    ix1 = int(math.ceil((xmax + margin) / resolution))
    iy1 = int(math.ceil((ymax + margin) / resolution))
    if ix0 < 0 or iy0 < 0 or ix1 > width or iy1 > height:
        return False
    return not grid[iy0:iy1, ix0:ix1].any()


def _boxes_overlap(a, b, gap: float) -> bool:
    return not (
        a[2] + gap <= b[0] or b[2] + gap <= a[0] or a[3] + gap <= b[1] or b[3] + gap <= a[1]
    )


def generate_world(config: WorldConfig, rng: RandomSource) -> GroundTruthWorld:
    """Lay out the template, place regions in free space and invent a lexicon."""
    grid = _template_grid(config)
    size = config.region_size

    boxes: list[tuple[float, float, float, float]] = []
    for region_id in range(config.n_places):
        for _ in range(config.max_retries):
            x0 = rng.uniform(0.0, config.width - size)
            y0 = rng.uniform(0.0, config.height - size)
            box = (x0, y0, x0 + size, y0 + size)
            if not _box_is_clear(grid, config.resolution, box, config.region_clearance):
                continue
            if any(_boxes_overlap(box, other, config.region_clearance) for other in boxes):
                continue
            boxes.append(box)
            break
        else:
            raise WorldGenerationError(
                f"Could not place region {region_id} in free space after "
                f"{config.max_retries} attempts"
            )

    taken: set = set()
    names = _distinct_words(rng, config.alphabet, config.n_names, config.name_length, taken)
    morphemes = _distinct_words(rng, config.alphabet, config.n_morphemes, (2, 3), taken)

    phrases = []
    for _ in range(config.n_carrier_phrases):
        n_prefix = int(rng.integers(0, 4))
        n_suffix = int(rng.integers(0 if n_prefix else 1, 4))
        prefix = tuple(morphemes[i] for i in rng.integers(0, len(morphemes), n_prefix))
        suffix = tuple(morphemes[i] for i in rng.integers(0, len(morphemes), n_suffix))
        phrases.append(CarrierPhrase(prefix, suffix))
    query_phrase = tuple(morphemes[i] for i in rng.integers(0, len(morphemes), 2))

    # every name gets one region; leftover regions reuse a name
    assignment = list(range(config.n_names)) + [
        int(i) for i in rng.integers(0, config.n_names, config.n_places - config.n_names)
    ]
    assignment = [assignment[i] for i in rng.permutation(config.n_places)]
    profiles = rng.dirichlet(np.full(config.feature_dim, config.feature_concentration), config.n_names)

    places = [
        PlaceRegion(
            id=i,
            box=boxes[i],
            name=names[assignment[i]],
            carrier_phrases=tuple(phrases),
            feature_profile=profiles[assignment[i]],
        )
        for i in range(config.n_places)
    ]
    logger.debug(f"Generated {config.template} world with {len(places)} places")
    return GroundTruthWorld(
        true_grid=grid,
        resolution=config.resolution,
        origin=(0.0, 0.0),
        places=places,
        phoneme_noise=config.phoneme_noise,
        feature_dim=config.feature_dim,
        feature_total=config.feature_total,
        alphabet=config.alphabet,
        query_phrase=query_phrase,
        template=config.template,
        names=names,
    )


def raycast(world: GroundTruthWorld, pose: Pose2D, angles: np.ndarray, max_range: float) -> np.ndarray:
    """Exact distance along each beam to the first occupied cell boundary."""
    res = world.resolution
    ox, oy = world.origin
    heading = pose.theta + np.asarray(angles, dtype=float)
    dx, dy = np.cos(heading), np.sin(heading)
    n = heading.size

    ix = np.full(n, int(math.floor((pose.x - ox) / res)), dtype=np.int64)
    iy = np.full(n, int(math.floor((pose.y - oy) / res)), dtype=np.int64)
    step_x = np.where(dx > 0, 1, -1)
    step_y = np.where(dy > 0, 1, -1)
    with np.errstate(divide="ignore", invalid="ignore"):
        next_x = np.where(dx > 0, (ix + 1) * res + ox, ix * res + ox)
        next_y = np.where(dy > 0, (iy + 1) * res + oy, iy * res + oy)
        t_max_x = np.where(dx != 0, (next_x - pose.x) / dx, np.inf)
        t_max_y = np.where(dy != 0, (next_y - pose.y) / dy, np.inf)
        t_delta_x = np.where(dx != 0, res / np.abs(dx), np.inf)
        t_delta_y = np.where(dy != 0, res / np.abs(dy), np.inf)

    ranges = np.full(n, max_range)
    active = np.ones(n, dtype=bool)
    height, width = world.true_grid.shape
    for _ in range(2 * int(math.ceil(max_range / res)) + 4):
        if not active.any():
            break
        along_x = active & (t_max_x <= t_max_y)
        along_y = active & ~along_x
        t_hit = np.where(along_x, t_max_x, t_max_y)
        ix = np.where(along_x, ix + step_x, ix)
        iy = np.where(along_y, iy + step_y, iy)
        t_max_x = np.where(along_x, t_max_x + t_delta_x, t_max_x)
        t_max_y = np.where(along_y, t_max_y + t_delta_y, t_max_y)

        beyond = active & (t_hit >= max_range)
        active &= ~beyond
        inside = active & (ix >= 0) & (ix < width) & (iy >= 0) & (iy < height)
        hit = np.zeros(n, dtype=bool)
        hit[inside] = world.true_grid[iy[inside], ix[inside]]
        ranges[hit] = t_hit[hit]
        active &= ~hit
    return ranges


def simulate_scan(
    world: GroundTruthWorld, true_pose: Pose2D, scan_spec: ScanSpec, rng: RandomSource
) -> LaserScan:
    if not world.is_free(true_pose.x, true_pose.y):
        raise ValueError(f"Pose ({true_pose.x:.2f}, {true_pose.y:.2f}) lies inside an obstacle")
    angles = scan_spec.angles()
    ranges = raycast(world, true_pose, angles, scan_spec.max_range)
    if scan_spec.sigma > 0:
        returned = ranges < scan_spec.max_range
        ranges[returned] += rng.normal(0.0, scan_spec.sigma, int(returned.sum()))
    return LaserScan(angles, np.clip(ranges, 0.0, scan_spec.max_range), scan_spec.max_range)


def simulate_odometry(
    true_prev: Pose2D, true_curr: Pose2D, noise: MotionNoise, rng: RandomSource
) -> Control:
    dx = true_curr.x - true_prev.x
    dy = true_curr.y - true_prev.y
    trans = math.hypot(dx, dy)
    rot1 = 0.0 if trans < 1e-9 else normalize_angle(math.atan2(dy, dx) - true_prev.theta)
    rot2 = normalize_angle(true_curr.theta - true_prev.theta - rot1)

    sd_rot1 = noise.alpha1 * abs(rot1) + noise.alpha2 * trans
    sd_trans = noise.alpha3 * trans + noise.alpha4 * (abs(rot1) + abs(rot2))
    sd_rot2 = noise.alpha1 * abs(rot2) + noise.alpha2 * trans
    return Control(
        rot1=normalize_angle(rot1 + rng.normal(0.0, sd_rot1)),
        trans=max(0.0, trans + rng.normal(0.0, sd_trans)),
        rot2=normalize_angle(rot2 + rng.normal(0.0, sd_rot2)),
    )


@dataclass(eq=False)
class TeachingEvent:
    t: int
    true_place_id: int
    utterance: PhonemeString
    true_segmentation: WordSequence
    feature: ImageFeature
    morpheme_segmentation: Optional[WordSequence] = None


def emit_teaching_event(
    world: GroundTruthWorld, true_pose: Pose2D, t: int, rng: RandomSource
) -> TeachingEvent:
    region = world.region_at(true_pose.x, true_pose.y)
    if region is None:
        raise ValueError(f"Pose ({true_pose.x:.2f}, {true_pose.y:.2f}) is not inside any place")
    phrase = region.carrier_phrases[int(rng.integers(0, len(region.carrier_phrases)))]
    parts = [p for p in (phrase.prefix, region.name, phrase.suffix) if p]
    morphemes = [*phrase.prefix_morphemes, region.name, *phrase.suffix_morphemes]
    clean = "".join(parts)
    counts = rng.multinomial(world.feature_total, region.feature_profile)
    return TeachingEvent(
        t=t,
        true_place_id=region.id,
        utterance=substitute_phonemes(clean, world.phoneme_noise, world.alphabet, rng),
        true_segmentation=WordSequence(tuple(parts)),
        feature=ImageFeature(counts),
        morpheme_segmentation=WordSequence(tuple(morphemes)),
    )


def _check_segment(world: GroundTruthWorld, a: np.ndarray, b: np.ndarray):
    length = float(np.linalg.norm(b - a))
    n = max(2, int(math.ceil(length / (world.resolution / 2.0))) + 1)
    s = np.linspace(0.0, 1.0, n)
    points = a[None, :] + s[:, None] * (b - a)[None, :]
    if world.occupied(points[:, 0], points[:, 1]).any():
        raise ValueError(f"Segment {tuple(a)} -> {tuple(b)} crosses an obstacle")


def scripted_trajectory(
    world: GroundTruthWorld, waypoints: Sequence[Sequence[float]], step_len: float
) -> list[Pose2D]:
    """Piecewise-linear path through the waypoints at step_len spacing."""
    if not waypoints:
        return []
    if step_len <= 0:
        raise ValueError("step_len must be positive")
    points = [np.array(w[:2], dtype=float) for w in waypoints]
    for p in points:
        if not world.is_free(p[0], p[1]):
            raise ValueError(f"Waypoint {tuple(p)} is not in free space")

    headings = [
        math.atan2(*(b - a)[::-1]) for a, b in zip(points, points[1:]) if np.any(b != a)
    ]
    poses = [Pose2D(points[0][0], points[0][1], headings[0] if headings else 0.0)]
    for a, b in zip(points, points[1:]):
        length = float(np.linalg.norm(b - a))
        if length == 0.0:
            continue
        _check_segment(world, a, b)
        heading = math.atan2(b[1] - a[1], b[0] - a[0])
        n = int(math.ceil(length / step_len - 1e-9))
        for j in range(1, n + 1):
            p = a + (b - a) * (j / n)
            poses.append(Pose2D(p[0], p[1], heading))
    return poses


def plan_route(
    world: GroundTruthWorld,
    start: Sequence[float],
    goal: Sequence[float],
    cell_size: float = 0.25,
    clearance: float = 0.3,
) -> list[tuple[float, float]]:
    """Breadth-first route on a coarsened, inflated copy of the true grid."""
    factor = max(1, int(round(cell_size / world.resolution)))
    cell = factor * world.resolution
    h, w = world.true_grid.shape
    H, W = h // factor, w // factor
    coarse = world.true_grid[: H * factor, : W * factor].reshape(H, factor, W, factor).any(axis=(1, 3))
    radius = int(math.ceil(clearance / cell))
    blocked = ndimage.binary_dilation(coarse, iterations=radius) if radius else coarse

    def to_cell(p):
        return (
            min(max(int((p[1] - world.origin[1]) // cell), 0), H - 1),
            min(max(int((p[0] - world.origin[0]) // cell), 0), W - 1),
        )

    source, target = to_cell(start), to_cell(goal)
    blocked = blocked.copy()
    blocked[source] = blocked[target] = False
    parent = {source: source}
    queue = deque([source])
    moves = [(1, 0), (-1, 0), (0, 1), (0, -1), (1, 1), (1, -1), (-1, 1), (-1, -1)]
    while queue:
        current = queue.popleft()
        if current == target:
            break
        for dr, dc in moves:
            nxt = (current[0] + dr, current[1] + dc)
            if not (0 <= nxt[0] < H and 0 <= nxt[1] < W) or nxt in parent or blocked[nxt]:
                continue
            if dr and dc and (blocked[current[0] + dr, current[1]] or blocked[current[0], current[1] + dc]):
                continue
            parent[nxt] = current
            queue.append(nxt)
    if target not in parent:
        raise WorldGenerationError(f"No route from {tuple(start)} to {tuple(goal)}")

    path = [target]
    while path[-1] != source:
        path.append(parent[path[-1]])
    path.reverse()

    # keep only the corners
    corners = [path[0]]
    for prev, here, nxt in zip(path, path[1:], path[2:]):
        if (here[0] - prev[0], here[1] - prev[1]) != (nxt[0] - here[0], nxt[1] - here[1]):
            corners.append(here)
    corners.append(path[-1])

    def centre(c):
        return (
            world.origin[0] + (c[1] + 0.5) * cell,
            world.origin[1] + (c[0] + 0.5) * cell,
        )

    waypoints = [tuple(map(float, start[:2]))]
    waypoints += [centre(c) for c in corners[1:-1]]
    waypoints.append(tuple(map(float, goal[:2])))
    return waypoints
