"""
Rao-Blackwellized particle filter

Each particle carries a trajectory, an occupancy grid and the collapsed
spatial-concept statistics of its own teaching history. A step moves every
particle (motion sample and scan matching), weights it by the scan, and at
teaching steps also by the scene feature and the utterance after segmenting
the whole utterance history and sampling the event's concept and position
distribution. The highest-weight particle's segmentation then refreshes the
shared language model before the particles are resampled.
"""

from __future__ import annotations

import hashlib
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from scipy.special import logsumexp

from spcoslam.base.concepts import (
    ConceptParams,
    ConceptStats,
    estimate_params,
    sample_it_ct,
    weight_feature_term,
    weight_word_term,
)
from spcoslam.base.core import (
    Control,
    Hyperparams,
    ImageFeature,
    LaserScan,
    PhonemeString,
    Pose2D,
    RandomSource,
    WordSequence,
)
from spcoslam.base.errors import ConfigError, NumericalError
from spcoslam.base.lexicon import (
    DEFAULT_P_CONT,
    LanguageModel,
    Lattice,
    RecognitionNoiseSpec,
    SegmentationState,
    recognize,
    segment,
    select_max_weight_segmentation,
    update_language_model,
)
from spcoslam.base.slam import (
    LikelihoodFieldSpec,
    MotionNoise,
    OccupancyGrid,
    SearchSpec,
    observation_weight,
    sample_motion_model,
    scan_matching,
    update_occupancy_grid,
)

logger = logging.getLogger(__name__)

# RNG stream keys: (_PARTICLE, slot, t, purpose) and (_SHARED, t, purpose)
_PARTICLE, _SHARED = 0, 1
_MOTION, _WEIGHT, _SEGMENT, _ASSIGN, _RECOGNIZE, _RESAMPLE = range(6)


@dataclass
class GridSpec:
    size_x: float = 22.0
    size_y: float = 22.0
    resolution: float = 0.05
    origin: tuple[float, float] = (-1.0, -1.0)

    def __post_init__(self):
        self.origin = tuple(float(v) for v in self.origin)  # type: ignore[assignment]
        if self.size_x <= 0 or self.size_y <= 0 or self.resolution <= 0:
            raise ConfigError("Grid size and resolution must be positive")


@dataclass
class FilterConfig:
    particles: int = 30
    J: int = 30
    segment_iters: int = 2
    use_concepts: bool = True
    update_lm: bool = True
    use_features: bool = True
    shared_segmentation: bool = False
    ess_threshold: Optional[float] = None
    isolation_check: bool = False
    threads: int = 1
    p_cont: float = DEFAULT_P_CONT
    grid: GridSpec = field(default_factory=GridSpec)
    motion_noise: MotionNoise = field(default_factory=MotionNoise)
    likelihood: LikelihoodFieldSpec = field(default_factory=LikelihoodFieldSpec)
    search: SearchSpec = field(default_factory=SearchSpec)
    recognition: RecognitionNoiseSpec = field(default_factory=RecognitionNoiseSpec)

    def __post_init__(self):
        if self.particles < 1:
            raise ConfigError("At least one particle is required")
        if self.J < 1:
            raise ConfigError("J must be at least 1")
        if self.segment_iters < 1:
            raise ConfigError("segment_iters must be at least 1")
        if self.ess_threshold is not None and not 0.0 < self.ess_threshold <= 1.0:
            raise ConfigError("ess_threshold must lie in (0, 1]")
        if self.threads < 1:
            raise ConfigError("threads must be at least 1")


@dataclass(eq=False)
class Particle:
    """One SLAM and concept hypothesis.

    positions, concepts and segmentations cover every teaching event so far,
    except for a demoted particle (weight -inf), whose concept history stops
    at the event that demoted it.
    """

    id: int
    trajectory: list[Pose2D]
    grid: OccupancyGrid
    stats: ConceptStats
    positions: list[int] = field(default_factory=list)
    concepts: list[int] = field(default_factory=list)
    segmentations: list[WordSequence] = field(default_factory=list)
    log_weight: float = 0.0
    seg_state: SegmentationState = field(default_factory=SegmentationState)
    params: Optional[ConceptParams] = None

    @property
    def pose(self) -> Pose2D:
        return self.trajectory[-1]

    @property
    def demoted(self) -> bool:
        return self.log_weight == -math.inf

    def copy(self, new_id: int) -> "Particle":
        return Particle(
            id=new_id,
            trajectory=list(self.trajectory),
            grid=self.grid.copy(),
            stats=self.stats.copy(),
            positions=list(self.positions),
            concepts=list(self.concepts),
            segmentations=list(self.segmentations),
            log_weight=self.log_weight,
            seg_state=self.seg_state.copy(),
            params=self.params,
        )

    def digest(self) -> str:
        h = hashlib.sha256()
        h.update(self.grid.cells.tobytes())
        h.update(np.array([p.as_array() for p in self.trajectory]).tobytes())
        h.update(repr(self.stats.fingerprint()).encode())
        h.update(repr((self.positions, self.concepts, self.log_weight)).encode())
        return h.hexdigest()


@dataclass
class ParticleUpdate:
    log_wz: float = 0.0
    log_wf: float = 0.0
    log_ws: float = 0.0
    log_weight_prev: float = 0.0
    log_weight: float = 0.0


@dataclass
class StepAudit:
    """Per-step weight factors, kept for the weight recursion audit and the weight trace."""

    t: int
    teaching: bool
    updates: list[ParticleUpdate]
    ess: float
    resampled: bool
    best: Optional[Particle] = None


@dataclass(eq=False)
class FilterState:
    particles: list[Particle]
    lm: LanguageModel
    t: int = 0
    lattices: list[Lattice] = field(default_factory=list)
    utterances: list[PhonemeString] = field(default_factory=list)
    teaching_times: list[int] = field(default_factory=list)
    shared_seg_state: SegmentationState = field(default_factory=SegmentationState)
    last_audit: Optional[StepAudit] = None

    @property
    def R(self) -> int:
        return len(self.particles)


def initialize(
    config: FilterConfig,
    h: Hyperparams,
    start_pose: Pose2D,
    first_scan: LaserScan,
    feature_dim: int,
) -> FilterState:
    """Particles at the known start pose, each with the first scan integrated."""
    grid = OccupancyGrid.empty(
        config.grid.size_x, config.grid.size_y, config.grid.resolution, config.grid.origin
    )
    update_occupancy_grid(first_scan, start_pose, grid)
    R = config.particles
    particles = [
        Particle(
            id=r,
            trajectory=[start_pose],
            grid=grid.copy(),
            stats=ConceptStats(feature_dim),
            log_weight=-math.log(R),
        )
        for r in range(R)
    ]
    lm = LanguageModel(
        lam=h.lam, p_cont=config.p_cont, alphabet_size=len(config.recognition.alphabet)
    )
    return FilterState(particles=particles, lm=lm, t=0)


def normalize_weights(particles: Sequence[Particle] | np.ndarray) -> np.ndarray:
    """Normalized particle weights from log weights; NaN counts as -inf."""
    if isinstance(particles, np.ndarray):
        logs = particles.astype(float)
    else:
        logs = np.array([p.log_weight for p in particles], dtype=float)
    logs = np.where(np.isnan(logs), -np.inf, logs)
    if not np.isfinite(logs).any():
        raise NumericalError("Every particle weight is zero")
    return np.exp(logs - logsumexp(logs))


def effective_sample_size(weights: np.ndarray) -> float:
    return float(1.0 / np.sum(weights**2))


def resample(particles: Sequence[Particle], rng: RandomSource) -> list[Particle]:
    """Systematic resampling; duplicated particles are deep copies and weights reset to 1/R."""
    weights = normalize_weights(particles)
    R = len(particles)
    cumulative = np.cumsum(weights)
    cumulative[-1] = 1.0
    pointers = (rng.random() + np.arange(R)) / R
    sources = np.searchsorted(cumulative, pointers, side="right")

    taken: set = set()
    survivors = []
    for slot, source in enumerate(int(s) for s in sources):
        if source in taken:
            child = particles[source].copy(slot)
        else:
            taken.add(source)
            child = particles[source]
            child.id = slot
        child.log_weight = -math.log(R)
        survivors.append(child)
    return survivors


def best_particle(state: FilterState) -> Particle:
    return min(state.particles, key=lambda p: (-_finite_or_neg_inf(p.log_weight), p.id))


def _finite_or_neg_inf(value: float) -> float:
    return value if math.isfinite(value) else -math.inf


def _update_particle(
    slot: int,
    particle: Particle,
    state: FilterState,
    u: Control,
    z: LaserScan,
    teaching: Optional[tuple[PhonemeString, ImageFeature]],
    shared_segmentation: Optional[list[WordSequence]],
    rng: RandomSource,
    config: FilterConfig,
    h: Hyperparams,
) -> ParticleUpdate:
    t = state.t

    def stream(purpose: int) -> RandomSource:
        return rng.fork(_PARTICLE, slot, t, purpose)

    update = ParticleUpdate(log_weight_prev=particle.log_weight)
    x_prev = particle.pose
    x_pred = sample_motion_model(u, x_prev, config.motion_noise, stream(_MOTION))
    x_new = scan_matching(z, x_pred, particle.grid, config.likelihood, config.search)
    update.log_wz = observation_weight(
        z, u, x_prev, particle.grid, config.J, stream(_WEIGHT), config.motion_noise, config.likelihood
    )

    was_demoted = particle.demoted
    if teaching is not None and config.use_concepts and was_demoted:
        # concept history stays frozen at the demoting event
        update.log_ws = -math.inf
    elif teaching is not None and config.use_concepts:
        _, feature = teaching
        try:
            if shared_segmentation is not None:
                history = list(shared_segmentation)
            else:
                history = segment(
                    state.lattices,
                    h.lam,
                    config.segment_iters,
                    stream(_SEGMENT),
                    p_cont=config.p_cont,
                    alphabet_size=len(config.recognition.alphabet),
                    state=particle.seg_state,
                )
            stats = particle.stats
            stats.rebuild_words(history[:-1], particle.concepts)
            s_t = history[-1]
            f_t = feature if config.use_features else None
            if f_t is not None:
                update.log_wf = weight_feature_term(stats, f_t, h)
            update.log_ws = weight_word_term(stats, s_t, h)
            k, l = sample_it_ct(stats, x_new.position(), s_t, f_t, h, stream(_ASSIGN))
            particle.positions.append(k)
            particle.concepts.append(l)
            particle.segmentations = history
            particle.params = estimate_params(stats, h)
        except NumericalError as e:
            logger.warning(f"Particle {particle.id} demoted at step {t}: {e}")
            update.log_ws = -math.inf
            was_demoted = True

    total = update.log_wz + update.log_wf + update.log_ws
    particle.log_weight = particle.log_weight + total
    if not math.isfinite(particle.log_weight):
        if not was_demoted:
            logger.warning(f"Particle {particle.id} has a non-finite weight at step {t}")
        particle.log_weight = -math.inf
    update.log_weight = particle.log_weight

    update_occupancy_grid(z, x_new, particle.grid)
    particle.trajectory.append(x_new)
    return update


def _isolated_update(slot: int, state: FilterState, *args) -> ParticleUpdate:
    others = {
        j: p.digest() for j, p in enumerate(state.particles) if j != slot
    }
    update = _update_particle(slot, state.particles[slot], state, *args)
    for j, before in others.items():
        if state.particles[j].digest() != before:
            raise RuntimeError(f"Updating particle {slot} modified particle {j}")
    return update


def step(
    state: FilterState,
    u: Control,
    z: LaserScan,
    teaching: Optional[tuple[PhonemeString, ImageFeature]],
    rng: RandomSource,
    config: FilterConfig,
    h: Hyperparams,
) -> FilterState:
    """Advance the filter by one time step; teaching is an (utterance, feature) pair or None."""
    state.t += 1
    t = state.t
    if not config.use_concepts:
        teaching = None

    shared_segmentation = None
    if teaching is not None:
        utterance, _ = teaching
        lattice = recognize(
            utterance, state.lm, config.recognition, rng.fork(_SHARED, t, _RECOGNIZE)
        )
        state.lattices.append(lattice)
        state.utterances.append(utterance)
        state.teaching_times.append(t)
        if config.shared_segmentation:
            shared_segmentation = segment(
                state.lattices,
                h.lam,
                config.segment_iters,
                rng.fork(_SHARED, t, _SEGMENT),
                p_cont=config.p_cont,
                alphabet_size=len(config.recognition.alphabet),
                state=state.shared_seg_state,
            )

    args = (u, z, teaching, shared_segmentation, rng, config, h)
    if config.isolation_check:
        updates = [_isolated_update(r, state, *args) for r in range(state.R)]
    elif config.threads > 1 and state.R > 1:
        with ThreadPoolExecutor(max_workers=config.threads) as pool:
            updates = list(
                pool.map(lambda r: _update_particle(r, state.particles[r], state, *args), range(state.R))
            )
    else:
        updates = [_update_particle(r, state.particles[r], state, *args) for r in range(state.R)]

    if teaching is not None:
        s_star = select_max_weight_segmentation(state.particles)
        if config.update_lm:
            state.lm = update_language_model(
                s_star, h.lam, config.p_cont, len(config.recognition.alphabet)
            )

    weights = normalize_weights(state.particles)
    ess = effective_sample_size(weights)
    leader = best_particle(state)
    best = leader.copy(leader.id)
    resampled = config.ess_threshold is None or ess < config.ess_threshold * state.R
    if resampled:
        state.particles = resample(state.particles, rng.fork(_SHARED, t, _RESAMPLE))
    state.last_audit = StepAudit(t, teaching is not None, updates, ess, resampled, best)
    if teaching is not None:
        logger.info(
            f"Step {t}: teaching event {len(state.lattices)}, ESS {ess:.1f}, "
            f"L={best.stats.L} K={best.stats.K}"
        )
    else:
        logger.debug(f"Step {t}: ESS {ess:.1f}")
    return state
