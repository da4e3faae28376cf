"""Configuration presets, file loading and overrides."""

import json

import pytest

from src.config import PRESETS, ConfigManager, tomllib
from src.error_handler import ConfigError


def write_json(path, payload):
    path.write_text(json.dumps(payload))
    return path


@pytest.fixture(autouse=True)
def clean_env(monkeypatch):
    for key in ConfigManager.ENV_MAPPING:
        monkeypatch.delenv(key, raising=False)


@pytest.mark.parametrize("name", sorted(PRESETS))
def test_presets_build_scenarios(name):
    manager = ConfigManager(name)
    scenario = manager.build_scenario()
    assert scenario.num_receivers >= manager.config.system.num_selected_receivers
    assert len(scenario.rcs_per_receiver) == scenario.num_receivers
    assert all(0.09 <= rcs <= 0.1 for rcs in scenario.rcs_per_receiver)


def test_default_is_desk_preset():
    config = ConfigManager().config
    assert config.scenario.num_subcarriers == 16
    assert config.system.eta_reference == "baseline"
    assert config.eta_d == 2.0


def test_missing_file_is_a_config_error(tmp_path):
    with pytest.raises(ConfigError) as info:
        ConfigManager(tmp_path / "missing.toml")
    assert info.value.exit_code == 3


def test_too_many_selected_receivers(tmp_path):
    payload = {
        "scenario": {"receiver_positions": [[50, 0], [0, 50]]},
        "system": {"num_selected_receivers": 3},
    }
    with pytest.raises(ConfigError, match="num_selected_receivers"):
        ConfigManager(write_json(tmp_path / "run.json", payload))


def test_json_config_and_unbounded_defaults(tmp_path):
    payload = {
        "scenario": {
            "receiver_positions": [[50, 0], [0, 50], [-50, 0]],
            "rcs_per_receiver": [0.1, 0.2, 0.3],
            "num_subcarriers": 8,
        },
        "system": {"num_selected_receivers": 2},
    }
    manager = ConfigManager(write_json(tmp_path / "run.json", payload))
    assert manager.config.eta_d == float("inf")
    assert manager.config.eta_v == float("inf")
    scenario = manager.build_scenario()
    assert scenario.rcs_per_receiver == [0.1, 0.2, 0.3]
    assert scenario.num_subcarriers == 8


@pytest.mark.skipif(tomllib is None, reason="tomllib needs Python 3.11+")
def test_toml_config(tmp_path):
    path = tmp_path / "run.toml"
    path.write_text(
        "[scenario]\n"
        "receiver_positions = [[50.0, 0.0], [0.0, 50.0]]\n"
        "[solver]\n"
        "tol = 1e-6\n"
        "[solver.penalty]\n"
        "gamma = 2.0\n"
    )
    config = ConfigManager(path).config
    assert config.solver.tol == 1e-6
    assert config.solver.penalty.to_schedule().gamma == 2.0


def test_environment_and_explicit_overrides(monkeypatch):
    monkeypatch.setenv("DFRC_SEED", "7")
    assert ConfigManager("lemma_default").config.experiment.seed == 7
    overridden = ConfigManager("lemma_default", overrides={"experiment.seed": 11})
    assert overridden.config.experiment.seed == 11


def test_unsorted_sweep_is_rejected(tmp_path):
    payload = {
        "scenario": {"receiver_positions": [[50, 0]]},
        "experiment": {"sweep": [4.0, 2.0]},
    }
    with pytest.raises(ConfigError, match="sorted"):
        ConfigManager(write_json(tmp_path / "run.json", payload))


def test_unknown_keys_are_rejected(tmp_path):
    payload = {"scenario": {"receiver_positions": [[50, 0]], "antennas": 4}}
    with pytest.raises(ConfigError, match="scenario.antennas"):
        ConfigManager(write_json(tmp_path / "run.json", payload))


def test_malformed_json(tmp_path):
    path = tmp_path / "run.json"
    path.write_text("{not json")
    with pytest.raises(ConfigError, match="Cannot parse"):
        ConfigManager(path)


def test_scenarios_are_cached_per_seed():
    manager = ConfigManager("desk_default")
    assert manager.build_scenario() is manager.build_scenario()
    assert manager.build_scenario(seed=5) is not manager.build_scenario()


def test_invalid_geometry_surfaces_as_config_error(tmp_path):
    payload = {
        "scenario": {
            "receiver_positions": [[50, 0]],
            "target_positions": [[300, 0]],
            "target_velocities": [[0, 0]],
            "detection_subarea_angles": [[30, 60]],
        }
    }
    manager = ConfigManager(write_json(tmp_path / "run.json", payload))
    with pytest.raises(ConfigError, match="outside"):
        manager.build_scenario()
