import json

import pytest
from pydantic import ValidationError

from config.experiment_config import (
    AttackConfig,
    ExperimentConfig,
    LenetLiteArch,
    SyntheticDataset,
    TrainingConfig,
    load_experiment_config,
)
from config.settings import SETTINGS
from core.errors import ConfigError
from security.defenses import FedPassDefense, NoDefense


def test_settings_defaults():
    assert SETTINGS.DB_NAME.endswith(".db")
    assert SETTINGS.DEFAULT_JOBS >= 1


def test_load_experiment_config_from_json(tmp_path):
    path = tmp_path / "exp.json"
    path.write_text(json.dumps({
        "name": "fedpass_n",
        "dataset": {"kind": "synthetic", "n": 50, "dims": 4},
        "arch": {"kind": "lenet_lite", "fusion_dim": 16},
        "parties": 3,
        "defense_grids": [{"variant": "fedpass", "strengths": [1, 10], "fixed": {"sigma2": 2.0}},
                          {"variant": "none", "strengths": [0]}],
        "seeds": [0, 1],
    }))
    cfg = load_experiment_config(path)
    assert isinstance(cfg.dataset, SyntheticDataset) and isinstance(cfg.arch, LenetLiteArch)
    assert cfg.training.parties == 3
    grid = cfg.grid()
    assert [type(s) for s in grid] == [FedPassDefense, FedPassDefense, NoDefense]
    assert [s.N for s in grid[:2]] == [1.0, 10.0] and grid[0].sigma2 == 2.0


def test_config_errors_are_config_errors(tmp_path):
    with pytest.raises(ConfigError):
        load_experiment_config(tmp_path / "missing.json")
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"name": "x", "unknown_knob": 1}))
    with pytest.raises(ConfigError):
        load_experiment_config(bad)
    bad.write_text("{not json")
    with pytest.raises(ConfigError):
        load_experiment_config(bad)


@pytest.mark.parametrize("seeds", [[], [1, 1]])
def test_seed_lists_are_validated(seeds):
    with pytest.raises(ValidationError):
        ExperimentConfig(seeds=seeds)


def test_numeric_ranges_are_validated():
    with pytest.raises(ValidationError):
        TrainingConfig(lr=0.0)
    with pytest.raises(ValidationError):
        TrainingConfig(batch_size=0)
    with pytest.raises(ValidationError):
        AttackConfig(restarts=0)
    with pytest.raises(ValidationError):
        ExperimentConfig(parties=0)
