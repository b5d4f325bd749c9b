import json

import pytest

from spcoslam.base.config import (
    THREADS_ENV,
    RunConfig,
    apply_overrides,
    config_from_dict,
    dump_config,
    effective_threads,
    load_config,
)
from spcoslam.base.errors import ConfigError


def test_defaults_without_a_file():
    config = load_config(None)
    assert config.method == "spcoslam"
    assert config.filter.particles == 30
    assert config.filter.J == 30
    assert config.hyperparams.alpha == 20.0
    assert config.dataset.n_teaching_events == 50


def test_seed_is_required():
    with pytest.raises(ConfigError):
        RunConfig().validate()
    assert RunConfig(seed=4).validate().seed == 4


@pytest.mark.parametrize(
    "data",
    [
        {"seeds": 1},
        {"filter": {"particle_count": 3}},
        {"method": "spco"},
        {"schema_version": 2},
        {"filter": {"particles": 0}},
        {"hyperparams": {"nu0": 0.5}},
        {"world": []},
    ],
)
def test_invalid_documents(data):
    with pytest.raises(ConfigError):
        config_from_dict(data)


def test_nested_sections_are_built():
    config = config_from_dict(
        {
            "seed": 1,
            "filter": {"particles": 5, "grid": {"resolution": 0.1}},
            "world": {"n_places": 4, "n_names": 3},
        }
    )
    assert config.filter.particles == 5
    assert config.filter.grid.resolution == 0.1
    assert config.world.n_names == 3


def test_missing_and_malformed_files(tmp_path):
    with pytest.raises(ConfigError):
        load_config(str(tmp_path / "absent.json"))
    path = tmp_path / "broken.json"
    path.write_text("{seed: 1")
    with pytest.raises(ConfigError):
        load_config(str(path))


def test_flags_override_file_values():
    config = RunConfig(seed=1, out="a")
    config = apply_overrides(config, seed=7, method="no-features", out=None, particles=4, steps=12)
    assert (config.seed, config.method, config.out) == (7, "no-features", "a")
    assert config.filter.particles == 4
    assert config.max_teaching_steps == 12
    assert config.dataset.n_teaching_events == 12


def test_dump_and_load(tmp_path):
    config = apply_overrides(RunConfig(seed=2), particles=8)
    path = str(tmp_path / "config.json")
    dump_config(config, path)
    with open(path) as f:
        assert json.load(f)["filter"]["particles"] == 8
    assert load_config(path).to_dict() == config.to_dict()


@pytest.mark.parametrize(
    "method, switch",
    [("fastslam-only", "use_concepts"), ("no-lm-update", "update_lm"), ("no-features", "use_features")],
)
def test_method_switches(method, switch):
    assert getattr(RunConfig(method="spcoslam").filter_for_method(), switch) is True
    assert getattr(RunConfig(method=method).filter_for_method(), switch) is False


def test_thread_cap_from_environment(monkeypatch):
    monkeypatch.delenv(THREADS_ENV, raising=False)
    assert effective_threads(8) == 8
    monkeypatch.setenv(THREADS_ENV, "2")
    assert effective_threads(8) == 2
    assert effective_threads(1) == 1
    monkeypatch.setenv(THREADS_ENV, "many")
    with pytest.raises(ConfigError):
        effective_threads(8)
