import logging
import math
from collections import Counter
from dataclasses import replace

import numpy as np
import pytest

from spcoslam.base.concepts import ConceptStats
from spcoslam.base.core import Hyperparams, Pose2D, seeded_rng
from spcoslam.base.dataset import DatasetConfig, generate_dataset
from spcoslam.base.evaluation import map_accuracy, pose_rmse
from spcoslam.base.errors import ConfigError, NumericalError
from spcoslam.base.lexicon import LanguageModel, RecognitionNoiseSpec
from spcoslam.base.rbpf import (
    FilterConfig,
    FilterState,
    Particle,
    best_particle,
    effective_sample_size,
    initialize,
    normalize_weights,
    resample,
    step,
)
from spcoslam.base.slam import OccupancyGrid
from spcoslam.base.world import ScanSpec, WorldConfig

N_TEACHING = 2


def make_particle(i, log_weight=0.0):
    return Particle(
        id=i,
        trajectory=[Pose2D(float(i), 0.0)],
        grid=OccupancyGrid.empty(1.0, 1.0, 0.1),
        stats=ConceptStats(4),
        log_weight=log_weight,
    )


@pytest.fixture(scope="module")
def dataset():
    return generate_dataset(
        WorldConfig(phoneme_noise=0.0),
        DatasetConfig(n_teaching_events=N_TEACHING, scan=ScanSpec(n_beams=24)),
        seeded_rng(9),
    )


def small_config(dataset, **overrides):
    config = FilterConfig(
        particles=3,
        J=3,
        segment_iters=1,
        recognition=RecognitionNoiseSpec(sub=0.0, n_best=3, alphabet=dataset.world.alphabet),
    )
    return replace(config, **overrides)


def run_filter(dataset, config, seed=0, strip_teaching=False):
    """Run up to and including the last teaching step, keeping every audit."""
    h = Hyperparams()
    first = dataset.steps[0]
    state = initialize(config, h, first.true_pose, first.scan, dataset.world.feature_dim)
    rng = seeded_rng(seed)
    last = max(e.t for e in dataset.teaching_events)
    audits = []
    for record in dataset.steps[1 : last + 1]:
        teaching = None
        if record.teaching is not None and not strip_teaching:
            teaching = (record.teaching.utterance, record.teaching.feature)
        state = step(state, record.control, record.scan, teaching, rng, config, h)
        audits.append(state.last_audit)
    return state, audits


@pytest.fixture(scope="module")
def filtered(dataset):
    return run_filter(dataset, small_config(dataset))


def test_normalize_equal_weights():
    assert normalize_weights(np.array([0.0, 0.0])) == pytest.approx([0.5, 0.5])


def test_normalize_without_underflow():
    assert normalize_weights(np.array([-1000.0, -1000.0])) == pytest.approx([0.5, 0.5])


def test_normalize_by_hand():
    weights = normalize_weights(np.array([math.log(3), math.log(1)]))
    assert weights == pytest.approx([0.75, 0.25])


def test_normalize_treats_nan_as_zero_weight():
    assert normalize_weights(np.array([float("nan"), 0.0])) == pytest.approx([0.0, 1.0])


def test_normalize_fails_without_finite_weights():
    with pytest.raises(NumericalError):
        normalize_weights(np.array([-np.inf, -np.inf]))


def test_effective_sample_size():
    assert effective_sample_size(np.full(4, 0.25)) == pytest.approx(4.0)
    assert effective_sample_size(np.array([1.0, 0.0, 0.0])) == pytest.approx(1.0)


def test_uniform_resampling_keeps_each_particle_once():
    particles = [make_particle(i) for i in range(4)]
    survivors = resample(particles, seeded_rng(0))
    assert [id(p) for p in survivors] == [id(p) for p in particles]
    assert [p.id for p in survivors] == [0, 1, 2, 3]
    assert all(p.log_weight == pytest.approx(-math.log(4)) for p in survivors)


def test_degenerate_weights_give_deep_copies():
    particles = [make_particle(0, 0.0)] + [make_particle(i, -np.inf) for i in range(1, 4)]
    survivors = resample(particles, seeded_rng(0))
    assert [p.pose.x for p in survivors] == [0.0] * 4
    assert len({id(p) for p in survivors}) == 4
    assert len({id(p.grid) for p in survivors}) == 4
    assert [p.id for p in survivors] == [0, 1, 2, 3]
    survivors[1].grid.cells[0, 0] = 2.0
    assert survivors[0].grid.cells[0, 0] == 0.0


def test_offspring_counts_follow_weights():
    weights = np.array([0.45, 0.35, 0.2])
    rng = seeded_rng(4)
    counts = Counter()
    n_trials = 2000
    for trial in range(n_trials):
        particles = [make_particle(i, math.log(w)) for i, w in enumerate(weights)]
        particles += [make_particle(i, -np.inf) for i in range(3, 10)]
        for p in resample(particles, rng.fork(trial)):
            counts[int(p.pose.x)] += 1
    for i, w in enumerate(weights):
        assert counts[i] / (n_trials * 10) == pytest.approx(w, rel=0.02)


def test_resample_fails_without_finite_weights():
    with pytest.raises(NumericalError):
        resample([make_particle(0, -np.inf)], seeded_rng(0))


def test_best_particle_rules():
    single = FilterState([make_particle(0, -3.0)], LanguageModel())
    assert best_particle(single) is single.particles[0]

    ordered = FilterState([make_particle(0, -3.0), make_particle(1, -1.0)], LanguageModel())
    assert best_particle(ordered).id == 1

    tied = FilterState(
        [make_particle(2, -1.0), make_particle(0, -np.inf), make_particle(1, -1.0)], LanguageModel()
    )
    assert best_particle(tied).id == 1


@pytest.mark.parametrize(
    "overrides",
    [{"particles": 0}, {"J": 0}, {"segment_iters": 0}, {"ess_threshold": 1.5}, {"threads": 0}],
)
def test_filter_config_validation(overrides):
    with pytest.raises(ConfigError):
        FilterConfig(**overrides)


def test_initialize_uniform_weights(dataset):
    config = small_config(dataset)
    first = dataset.steps[0]
    state = initialize(config, Hyperparams(), first.true_pose, first.scan, dataset.world.feature_dim)
    assert state.R == 3
    assert all(p.log_weight == pytest.approx(-math.log(3)) for p in state.particles)
    assert all(p.pose == first.true_pose for p in state.particles)
    assert state.particles[0].grid is not state.particles[1].grid
    assert state.particles[0].grid.observed.any()


def test_run_keeps_particle_invariants(filtered):
    state, audits = filtered
    assert state.R == 3
    assert len(state.lattices) == N_TEACHING
    for particle in state.particles:
        assert len(particle.trajectory) == state.t + 1
        assert len(particle.positions) == len(particle.concepts) == N_TEACHING
        assert len(particle.segmentations) == N_TEACHING
        assert particle.params is not None
        assert particle.log_weight == pytest.approx(-math.log(3))
    assert [a.t for a in audits] == list(range(1, state.t + 1))
    assert sum(a.teaching for a in audits) == N_TEACHING


def test_weight_recursion_at_teaching_steps(filtered):
    _, audits = filtered
    for audit in audits:
        for update in audit.updates:
            total = update.log_wz + update.log_wf + update.log_ws
            assert update.log_weight == update.log_weight_prev + total
            if not audit.teaching:
                assert update.log_wf == 0.0
                assert update.log_ws == 0.0


def test_shared_language_model_follows_best_segmentation(filtered):
    state, _ = filtered
    assert state.lm.total_count > 0


def test_step_without_teaching_leaves_concepts_alone(dataset):
    config = small_config(dataset)
    h = Hyperparams()
    first = dataset.steps[0]
    state = initialize(config, h, first.true_pose, first.scan, dataset.world.feature_dim)
    before = [p.stats.fingerprint() for p in state.particles]
    record = dataset.steps[1]
    state = step(state, record.control, record.scan, None, seeded_rng(0), config, h)
    assert [p.stats.fingerprint() for p in state.particles] == before
    assert state.lm.total_count == 0


def test_disabled_concepts_match_a_run_without_teaching(dataset):
    plain, _ = run_filter(dataset, small_config(dataset, use_concepts=False))
    stripped, _ = run_filter(dataset, small_config(dataset), strip_teaching=True)
    for a, b in zip(plain.particles, stripped.particles):
        assert a.trajectory == b.trajectory
        np.testing.assert_array_equal(a.grid.cells, b.grid.cells)
    assert plain.lattices == []


def test_threaded_updates_match_sequential(dataset, filtered):
    threaded, _ = run_filter(dataset, small_config(dataset, threads=3))
    state, _ = filtered
    assert [p.digest() for p in threaded.particles] == [p.digest() for p in state.particles]


def test_isolation_check_passes(dataset):
    state, _ = run_filter(dataset, small_config(dataset, isolation_check=True, shared_segmentation=True))
    assert len(state.shared_seg_state) == N_TEACHING


def test_single_particle_run(dataset):
    state, audits = run_filter(dataset, small_config(dataset, particles=1))
    assert state.R == 1
    assert all(a.resampled for a in audits)
    assert len(state.particles[0].concepts) == N_TEACHING


def test_ess_gate_skips_resampling(dataset):
    _, audits = run_filter(dataset, small_config(dataset, ess_threshold=1e-9))
    assert not any(a.resampled for a in audits)


def test_demoted_particle_keeps_a_frozen_history(dataset, caplog):
    config = small_config(dataset, ess_threshold=1e-9)
    h = Hyperparams()
    first = dataset.steps[0]
    state = initialize(config, h, first.true_pose, first.scan, dataset.world.feature_dim)
    rng = seeded_rng(0)
    times = sorted(e.t for e in dataset.teaching_events)
    with caplog.at_level(logging.WARNING, logger="spcoslam.base.rbpf"):
        for record in dataset.steps[1 : times[-1] + 1]:
            teaching = None
            if record.teaching is not None:
                teaching = (record.teaching.utterance, record.teaching.feature)
            state = step(state, record.control, record.scan, teaching, rng, config, h)
            if record.t == times[0]:
                state.particles[0].log_weight = -math.inf
    demoted, *others = state.particles
    assert demoted.demoted
    assert len(demoted.concepts) == len(demoted.positions) == 1
    assert all(len(p.concepts) == N_TEACHING for p in others)
    assert len(demoted.trajectory) == state.t + 1
    assert "non-finite" not in caplog.text


@pytest.mark.slow
@pytest.mark.parametrize("seed", [1, 2])
def test_pose_and_map_accuracy_without_teaching(seed):
    data = generate_dataset(WorldConfig(), DatasetConfig(n_teaching_events=0), seeded_rng(seed))
    assert data.teaching_events == []
    config = FilterConfig(
        particles=30,
        J=30,
        use_concepts=False,
        recognition=RecognitionNoiseSpec(alphabet=data.world.alphabet),
    )
    h = Hyperparams()
    first = data.steps[0]
    state = initialize(config, h, first.true_pose, first.scan, data.world.feature_dim)
    rng = seeded_rng(seed)
    for record in data.steps[1:]:
        state = step(state, record.control, record.scan, None, rng, config, h)
    best = state.last_audit.best
    assert pose_rmse(best.trajectory, [r.true_pose for r in data.steps]) <= 0.15
    assert map_accuracy(best.grid, data.world) >= 0.90
