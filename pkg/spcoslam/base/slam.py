"""
Grid-based FastSLAM 2.0 building blocks

Odometry motion sampling, a likelihood-field measurement model, hill-climbing
scan matching, the Monte Carlo observation weight and log-odds occupancy grid
updates. All likelihoods are returned in log space.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Optional

import cv2
import numpy as np
from scipy.special import logsumexp
from scipy.stats import norm

from spcoslam.base.core import Control, LaserScan, Pose2D, RandomSource, wrap_angles
from spcoslam.base.errors import ConfigError

logger = logging.getLogger(__name__)

OCCUPIED_THRESHOLD = 0.65
FREE_THRESHOLD = 0.35


@dataclass
class MotionNoise:
    """Four-parameter odometry noise (rotation from rotation, rotation from
    translation, translation from translation, translation from rotation)."""

    alpha1: float = 0.05
    alpha2: float = 0.01
    alpha3: float = 0.05
    alpha4: float = 0.01

    def __post_init__(self):
        if min(self.alpha1, self.alpha2, self.alpha3, self.alpha4) < 0:
            raise ConfigError("Motion noise coefficients must be non-negative")


@dataclass
class LikelihoodFieldSpec:
    sigma_hit: float = 0.1
    z_hit: float = 0.9
    z_rand: float = 0.1
    max_range: float = 8.0
    stride: int = 4

    def __post_init__(self):
        if self.sigma_hit <= 0:
            raise ConfigError("sigma_hit must be positive")
        if self.z_hit < 0 or self.z_rand < 0 or self.z_hit + self.z_rand > 1 + 1e-12:
            raise ConfigError("z_hit and z_rand must be non-negative and sum to at most 1")
        if self.stride < 1:
            raise ConfigError("Beam stride must be at least 1")

    @property
    def distance_cap(self) -> float:
        return 3.0 * self.sigma_hit


@dataclass
class SearchSpec:
    """Hill-climbing schedule for scan matching.

    Matching scores every ``stride``-th beam, independently of the stride the
    likelihood field uses for particle weights.
    """

    linear_step: float = 0.1
    angular_step: float = 0.05
    refinements: int = 6
    max_iterations: int = 30
    stride: int = 1

    def __post_init__(self):
        if self.linear_step <= 0 or self.angular_step <= 0:
            raise ConfigError("Search steps must be positive")
        if self.refinements < 1 or self.max_iterations < 1:
            raise ConfigError("refinements and max_iterations must be at least 1")
        if self.stride < 1:
            raise ConfigError("Beam stride must be at least 1")


@dataclass(eq=False)
class OccupancyGrid:
    resolution: float
    origin: tuple[float, float]
    width: int
    height: int
    cells: np.ndarray = field(default=None)  # type: ignore[assignment]
    observed: np.ndarray = field(default=None)  # type: ignore[assignment]
    l_min: float = -5.0
    l_max: float = 5.0
    l_occ: float = 0.85
    l_free: float = -0.4

    def __post_init__(self):
        if self.cells is None:
            self.cells = np.zeros((self.height, self.width))
        if self.observed is None:
            self.observed = np.zeros((self.height, self.width), dtype=bool)
        self.origin = (float(self.origin[0]), float(self.origin[1]))
        self._version = 0
        self._field_version = -1
        self._field: Optional[np.ndarray] = None

    @classmethod
    def empty(
        cls,
        size_x: float,
        size_y: float,
        resolution: float = 0.05,
        origin: tuple[float, float] = (0.0, 0.0),
    ) -> "OccupancyGrid":
        return cls(
            resolution=resolution,
            origin=origin,
            width=int(round(size_x / resolution)),
            height=int(round(size_y / resolution)),
        )

    def copy(self) -> "OccupancyGrid":
        clone = OccupancyGrid(
            resolution=self.resolution,
            origin=self.origin,
            width=self.width,
            height=self.height,
            cells=self.cells.copy(),
            observed=self.observed.copy(),
            l_min=self.l_min,
            l_max=self.l_max,
            l_occ=self.l_occ,
            l_free=self.l_free,
        )
        # the cached field is never mutated in place, so it can be shared
        clone._field = self._field
        clone._field_version = 0 if self._field_version == self._version else -1
        return clone

    def mark_changed(self):
        self._version += 1

    def world_to_cell(self, xs, ys) -> tuple[np.ndarray, np.ndarray]:
        ix = np.floor((np.asarray(xs) - self.origin[0]) / self.resolution).astype(np.int64)
        iy = np.floor((np.asarray(ys) - self.origin[1]) / self.resolution).astype(np.int64)
        return ix, iy

    def in_bounds(self, ix, iy) -> np.ndarray:
        return (ix >= 0) & (ix < self.width) & (iy >= 0) & (iy < self.height)

    def probabilities(self) -> np.ndarray:
        return 1.0 / (1.0 + np.exp(-self.cells))

    def occupied_mask(self) -> np.ndarray:
        return self.observed & (self.probabilities() > OCCUPIED_THRESHOLD)

    def free_mask(self) -> np.ndarray:
        return self.observed & (self.probabilities() < FREE_THRESHOLD)

    def distance_field(self) -> np.ndarray:
        """Distance in meters from every cell to the nearest occupied cell."""
        if self._field is None or self._field_version != self._version:
            occupied = self.occupied_mask()
            if occupied.any():
                src = np.where(occupied, 0, 255).astype(np.uint8)
                dist = cv2.distanceTransform(src, cv2.DIST_L2, cv2.DIST_MASK_PRECISE)
                self._field = dist.astype(np.float64) * self.resolution
            else:
                self._field = np.full(self.cells.shape, np.inf)
            self._field_version = self._version
        return self._field

    def to_image(self) -> np.ndarray:
        """8-bit map image, north up: occupied 0, free 254, unknown 205."""
        image = np.full(self.cells.shape, 205, dtype=np.uint8)
        image[self.free_mask()] = 254
        image[self.occupied_mask()] = 0
        return np.flipud(image)

    @classmethod
    def from_image(
        cls, image: np.ndarray, resolution: float, origin: tuple[float, float] = (0.0, 0.0)
    ) -> "OccupancyGrid":
        """Rebuild a saturated grid from an image written by to_image."""
        cells = np.flipud(np.asarray(image))
        height, width = cells.shape
        grid = cls(resolution=resolution, origin=origin, width=width, height=height)
        grid.cells[cells == 0] = grid.l_max
        grid.cells[cells == 254] = grid.l_min
        grid.observed[:] = cells != 205
        grid.mark_changed()
        return grid


def compose_poses(poses: np.ndarray, rot1, trans, rot2) -> np.ndarray:
    """Apply (rot1, trans, rot2) to an (n, 3) array of poses."""
    heading = poses[:, 2] + rot1
    out = np.empty_like(poses)
    out[:, 0] = poses[:, 0] + trans * np.cos(heading)
    out[:, 1] = poses[:, 1] + trans * np.sin(heading)
    out[:, 2] = wrap_angles(heading + rot2)
    return out


def sample_motion_poses(
    u: Control, x_prev: Pose2D, noise: MotionNoise, rng: RandomSource, n: int
) -> np.ndarray:
    """Draw n poses from the odometry motion model, as an (n, 3) array."""
    a_rot1, a_trans, a_rot2 = abs(u.rot1), u.trans, abs(u.rot2)
    sd_rot1 = noise.alpha1 * a_rot1 + noise.alpha2 * a_trans
    sd_trans = noise.alpha3 * a_trans + noise.alpha4 * (a_rot1 + a_rot2)
    sd_rot2 = noise.alpha1 * a_rot2 + noise.alpha2 * a_trans
    rot1 = u.rot1 + rng.normal(0.0, sd_rot1, n)
    trans = u.trans + rng.normal(0.0, sd_trans, n)
    rot2 = u.rot2 + rng.normal(0.0, sd_rot2, n)
    start = np.tile(x_prev.as_array(), (n, 1))
    return compose_poses(start, rot1, trans, rot2)


def sample_motion_model(
    u: Control, x_prev: Pose2D, noise: MotionNoise, rng: RandomSource
) -> Pose2D:
    return Pose2D.from_array(sample_motion_poses(u, x_prev, noise, rng, 1)[0])


def _batch_log_likelihood(
    z: LaserScan,
    poses: np.ndarray,
    m: OccupancyGrid,
    spec: LikelihoodFieldSpec,
    stride: Optional[int] = None,
) -> np.ndarray:
    idx = np.arange(0, len(z), stride or spec.stride)
    ranges = z.ranges[idx]
    max_range = min(spec.max_range, z.max_range)
    keep = ranges < max_range
    if not keep.any():
        return np.zeros(len(poses))
    ranges = ranges[keep]
    angles = z.angles[idx][keep]

    heading = poses[:, 2:3] + angles[None, :]
    ex = poses[:, 0:1] + ranges[None, :] * np.cos(heading)
    ey = poses[:, 1:2] + ranges[None, :] * np.sin(heading)
    ix, iy = m.world_to_cell(ex, ey)
    inside = m.in_bounds(ix, iy)

    cap = spec.distance_cap
    dist = np.full(ex.shape, cap)
    cx, cy = ix[inside], iy[inside]
    known = m.observed[cy, cx]
    values = np.full(cx.shape, cap)
    values[known] = np.minimum(m.distance_field()[cy[known], cx[known]], cap)
    dist[inside] = values

    p = spec.z_hit * norm.pdf(dist, 0.0, spec.sigma_hit) + spec.z_rand / max_range
    return np.log(p).sum(axis=1)


def measurement_model(
    z: LaserScan, x: Pose2D, m: OccupancyGrid, spec: LikelihoodFieldSpec
) -> float:
    """Likelihood-field log p(z | x, m); beams at max range contribute nothing."""
    return float(_batch_log_likelihood(z, x.as_array()[None, :], m, spec)[0])


_NEIGHBOURS = np.array(
    [[1, 0, 0], [-1, 0, 0], [0, 1, 0], [0, -1, 0], [0, 0, 1], [0, 0, -1]], dtype=float
)


def scan_matching(
    z: LaserScan,
    x0: Pose2D,
    m: OccupancyGrid,
    spec: LikelihoodFieldSpec,
    search: Optional[SearchSpec] = None,
) -> Pose2D:
    """Hill-climb (x, y, theta) on the measurement model with shrinking steps.

    Only strict improvements move the estimate, so the result never scores
    below x0 and a flat objective returns x0 unchanged.
    """
    search = search or SearchSpec()
    best = x0.as_array()
    best_score = _batch_log_likelihood(z, best[None, :], m, spec, search.stride)[0]
    moved = False
    step = np.array([search.linear_step, search.linear_step, search.angular_step])
    for _ in range(search.refinements):
        for _ in range(search.max_iterations):
            candidates = best[None, :] + _NEIGHBOURS * step[None, :]
            candidates[:, 2] = wrap_angles(candidates[:, 2])
            scores = _batch_log_likelihood(z, candidates, m, spec, search.stride)
            winner = int(np.argmax(scores))
            if not scores[winner] > best_score:
                break
            best, best_score, moved = candidates[winner], scores[winner], True
        step = step / 2.0
    return Pose2D.from_array(best) if moved else x0


def observation_weight(
    z: LaserScan,
    u: Control,
    x_prev: Pose2D,
    m: OccupancyGrid,
    J: int,
    rng: RandomSource,
    noise: Optional[MotionNoise] = None,
    spec: Optional[LikelihoodFieldSpec] = None,
) -> float:
    """log of the mean likelihood of z over J motion samples from x_prev."""
    if J < 1:
        raise ValueError("J must be at least 1")
    noise = noise or MotionNoise()
    spec = spec or LikelihoodFieldSpec()
    samples = sample_motion_poses(u, x_prev, noise, rng, J)
    scores = _batch_log_likelihood(z, samples, m, spec)
    return float(logsumexp(scores) - math.log(J))


def _ray_cells(
    x0: int, y0: int, x1: np.ndarray, y1: np.ndarray
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Rasterize rays from one start cell to many end cells.

    Returns cell coordinates of every ray sample (endpoint excluded) and the
    owning ray index, using rounded integer line stepping.
    """
    dx = x1 - x0
    dy = y1 - y0
    n = np.maximum(np.abs(dx), np.abs(dy))
    total = int(n.sum())
    if total == 0:
        empty = np.empty(0, dtype=np.int64)
        return empty, empty, empty
    ray = np.repeat(np.arange(n.size), n)
    starts = np.cumsum(n) - n
    k = np.arange(total) - np.repeat(starts, n)
    frac = k / n[ray]
    cx = x0 + np.floor(dx[ray] * frac + 0.5).astype(np.int64)
    cy = y0 + np.floor(dy[ray] * frac + 0.5).astype(np.int64)
    return cx, cy, ray


def update_occupancy_grid(z: LaserScan, x: Pose2D, m: OccupancyGrid) -> OccupancyGrid:
    """Integrate a scan into m in place and return it.

    Cells a beam passes through get l_free; the endpoint cell gets l_occ
    unless the beam is at max range.
    """
    if len(z) == 0:
        return m
    ranges = np.minimum(z.ranges, z.max_range)
    hit = ranges < z.max_range
    heading = x.theta + z.angles
    ex = x.x + ranges * np.cos(heading)
    ey = x.y + ranges * np.sin(heading)
    sx, sy = m.world_to_cell(x.x, x.y)
    end_x, end_y = m.world_to_cell(ex, ey)

    cx, cy, _ = _ray_cells(int(sx), int(sy), end_x, end_y)
    traversed = m.in_bounds(cx, cy)
    free_idx = np.unique(cy[traversed] * m.width + cx[traversed])

    hit_x, hit_y = end_x[hit], end_y[hit]
    inside = m.in_bounds(hit_x, hit_y)
    occ_idx = np.unique(hit_y[inside] * m.width + hit_x[inside])
    free_idx = np.setdiff1d(free_idx, occ_idx, assume_unique=True)

    flat = m.cells.reshape(-1)
    seen = m.observed.reshape(-1)
    flat[free_idx] += m.l_free
    flat[occ_idx] += m.l_occ
    seen[free_idx] = True
    seen[occ_idx] = True
    np.clip(m.cells, m.l_min, m.l_max, out=m.cells)
    m.mark_changed()
    return m
