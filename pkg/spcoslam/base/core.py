"""
Shared domain types, the random-number contract and angle helpers.

Poses, controls and scans are plain values. Everything stochastic in the
package draws from a RandomSource, which can be forked into independent,
reproducible substreams keyed by integers (particle slot, step, purpose).
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Any, Sequence

import numpy as np

from spcoslam.base.errors import ConfigError

# Positions used by the concept model are (x, y) only.
POSITION_DIM = 2

DEFAULT_ALPHABET = "aiueokstnhmyrwgzdbpj"

# A phoneme string is a plain str over the alphabet; one character per phoneme.
PhonemeString = str

_TWO_PI = 2.0 * math.pi
_SEED_MASK = (1 << 64) - 1


def normalize_angle(theta: float) -> float:
    """Wrap an angle into (-pi, pi]."""
    if not math.isfinite(theta):
        raise ValueError(f"Cannot normalize non-finite angle {theta!r}")
    wrapped = theta - _TWO_PI * math.floor((theta + math.pi) / _TWO_PI)
    if wrapped <= -math.pi:
        wrapped += _TWO_PI
    return float(wrapped)


def wrap_angles(theta: np.ndarray) -> np.ndarray:
    """Vectorized normalize_angle for arrays of finite angles."""
    theta = np.asarray(theta, dtype=float)
    wrapped = theta - _TWO_PI * np.floor((theta + math.pi) / _TWO_PI)
    return np.where(wrapped <= -math.pi, wrapped + _TWO_PI, wrapped)


class RandomSource:
    """Seeded random stream with keyed, independent substreams.

    Attribute access falls through to the underlying numpy Generator, so a
    RandomSource can be used wherever a Generator is expected.
    """

    def __init__(self, seed: int, key: Sequence[int] = ()):
        self.seed = int(seed) & _SEED_MASK
        self.key = tuple(int(k) for k in key)
        self.generator = np.random.Generator(
            np.random.PCG64(np.random.SeedSequence(self.seed, spawn_key=self.key))
        )

    def fork(self, *key: int) -> "RandomSource":
        """Substream for (seed, *self.key, *key); independent of this stream's state."""
        return RandomSource(self.seed, self.key + tuple(key))

    def __getattr__(self, name: str) -> Any:
        # Only reached for attributes not set in __init__.
        if name == "generator":
            raise AttributeError(name)
        return getattr(self.generator, name)

    def __repr__(self):
        return f"RandomSource(seed={self.seed}, key={self.key})"


def seeded_rng(seed: int) -> RandomSource:
    return RandomSource(seed)


@dataclass(frozen=True)
class Pose2D:
    x: float
    y: float
    theta: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "x", float(self.x))
        object.__setattr__(self, "y", float(self.y))
        object.__setattr__(self, "theta", normalize_angle(float(self.theta)))

    @classmethod
    def from_array(cls, values: Sequence[float]) -> "Pose2D":
        return cls(float(values[0]), float(values[1]), float(values[2]))

    def as_array(self) -> np.ndarray:
        return np.array([self.x, self.y, self.theta])

    def position(self) -> np.ndarray:
        return np.array([self.x, self.y])


@dataclass(frozen=True)
class Control:
    """Odometry-decomposed relative motion."""

    rot1: float
    trans: float
    rot2: float

    def __post_init__(self):
        if self.trans < 0:
            raise ValueError(f"Translation must be non-negative, got {self.trans}")


@dataclass(eq=False)
class LaserScan:
    angles: np.ndarray
    ranges: np.ndarray
    max_range: float

    def __post_init__(self):
        self.angles = np.asarray(self.angles, dtype=float)
        self.ranges = np.asarray(self.ranges, dtype=float)
        if self.angles.shape != self.ranges.shape:
            raise ValueError(
                f"Scan has {self.angles.size} angles but {self.ranges.size} ranges"
            )
        if self.ranges.size and (
            self.ranges.min() < 0.0 or self.ranges.max() > self.max_range
        ):
            raise ValueError(f"Scan ranges must lie in [0, {self.max_range}]")

    def __len__(self):
        return int(self.ranges.size)


@dataclass(eq=False)
class ImageFeature:
    counts: np.ndarray

    def __post_init__(self):
        self.counts = np.asarray(self.counts, dtype=np.int64)
        if self.counts.ndim != 1:
            raise ValueError("Image feature counts must be a vector")
        if (self.counts < 0).any():
            raise ValueError("Image feature counts must be non-negative")

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    @property
    def dim(self) -> int:
        return int(self.counts.size)


@dataclass(frozen=True)
class WordSequence:
    words: tuple[str, ...]

    def __post_init__(self):
        object.__setattr__(self, "words", tuple(self.words))
        if any(not w for w in self.words):
            raise ValueError("Words must be non-empty phoneme strings")

    @property
    def B(self) -> int:
        return len(self.words)

    def joined(self) -> PhonemeString:
        return "".join(self.words)

    def __iter__(self):
        return iter(self.words)

    def __len__(self):
        return len(self.words)


Matrix2 = tuple[tuple[float, float], tuple[float, float]]


@dataclass
class Hyperparams:
    """Concentration, Dirichlet and normal-inverse-Wishart prior settings."""

    alpha: float = 20.0
    gamma: float = 10.0
    beta: float = 0.2
    chi: float = 0.2
    lam: float = 1.0
    m0: tuple[float, float] = (0.0, 0.0)
    kappa0: float = 0.001
    V0: Matrix2 = ((2.0, 0.0), (0.0, 2.0))
    nu0: float = 3.0

    def __post_init__(self):
        self.m0 = tuple(float(v) for v in self.m0)  # type: ignore[assignment]
        self.V0 = tuple(tuple(float(v) for v in row) for row in self.V0)  # type: ignore[assignment]
        self.validate()

    def validate(self):
        for name in ("alpha", "gamma", "beta", "chi", "lam", "kappa0"):
            if not getattr(self, name) > 0:
                raise ConfigError(f"Hyperparameter {name} must be positive")
        if self.nu0 <= POSITION_DIM - 1:
            raise ConfigError(f"nu0 must exceed {POSITION_DIM - 1}, got {self.nu0}")
        V0 = self.V0_array
        if V0.shape != (POSITION_DIM, POSITION_DIM) or not np.allclose(V0, V0.T):
            raise ConfigError("V0 must be a symmetric 2x2 matrix")
        if np.linalg.eigvalsh(V0).min() <= 0:
            raise ConfigError("V0 must be positive-definite")
        if len(self.m0) != POSITION_DIM:
            raise ConfigError("m0 must be a 2-vector")

    @property
    def m0_array(self) -> np.ndarray:
        return np.array(self.m0, dtype=float)

    @property
    def V0_array(self) -> np.ndarray:
        return np.array(self.V0, dtype=float)


def substitute_phonemes(
    text: PhonemeString, rate: float, alphabet: str, rng: "RandomSource"
) -> PhonemeString:
    """Replace each phoneme, with probability rate, by a different symbol of the alphabet."""
    if rate <= 0 or not text:
        return text
    size = len(alphabet)
    index = np.array([alphabet.index(symbol) for symbol in text])
    flips = rng.random(index.size) < rate
    shifts = rng.integers(1, size, index.size)
    index = np.where(flips, (index + shifts) % size, index)
    return "".join(alphabet[i] for i in index)
