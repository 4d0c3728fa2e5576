"""Tests for process settings and the experiment config file"""

import pytest
from pydantic import ValidationError

from pcdenoise.config import Settings
from pcdenoise.core.errors import ConfigError, DatasetIOError
from pcdenoise.models.schemas import ExperimentConfig, NoiseKind


def test_settings_defaults(monkeypatch):
    for name in ("PCD_WORKERS", "PCD_FLOAT_DTYPE", "PCD_LOG_LEVEL", "PCD_LOG_FORMAT", "PCD_MESH_SUFFIXES"):
        monkeypatch.delenv(name, raising=False)
    settings = Settings(_env_file=None)

    assert settings.workers == 1
    assert settings.float_dtype == "float32"
    assert settings.log_format == "text"
    assert ".obj" in settings.mesh_suffixes
    assert settings.is_development


def test_settings_from_environment(monkeypatch):
    monkeypatch.setenv("PCD_WORKERS", "4")
    monkeypatch.setenv("PCD_LOG_LEVEL", "debug")
    monkeypatch.setenv("PCD_FLOAT_DTYPE", "float64")
    monkeypatch.setenv("PCD_MESH_SUFFIXES", ".OBJ, .off")
    monkeypatch.setenv("PCD_ENVIRONMENT", "production")
    settings = Settings(_env_file=None)

    assert settings.workers == 4
    assert settings.log_level == "DEBUG"
    assert settings.float_dtype == "float64"
    assert settings.mesh_suffixes == [".obj", ".off"]
    assert settings.is_production


@pytest.mark.parametrize(
    "name, value",
    [("PCD_WORKERS", "0"), ("PCD_FLOAT_DTYPE", "float16"), ("PCD_LOG_FORMAT", "xml")],
)
def test_settings_reject_invalid_values(monkeypatch, name, value):
    monkeypatch.setenv(name, value)
    with pytest.raises(ValidationError):
        Settings(_env_file=None)


def test_experiment_config_from_pairs():
    config = ExperimentConfig.from_pairs([
        "# inference",
        "denoise.T = 40",
        "denoise.t_act=25   # UniNet from step 25",
        "",
        "model.feat_widths=16,32",
        "noise.kind=gaussian",
        "uniformity.area_fractions=0.01,0.02",
    ])

    assert config.denoise.T == 40
    assert config.denoise.t_act == 25
    assert config.denoise.s0 == 0.2
    assert config.model.feat_widths == [16, 32]
    assert config.noise.kind is NoiseKind.ISOTROPIC_GAUSSIAN
    assert config.uniformity.area_fractions == [0.01, 0.02]


def test_defaults_match_documented_values():
    config = ExperimentConfig()

    assert (config.denoise.T, config.denoise.s0, config.denoise.gamma, config.denoise.t_act) == (30, 0.2, 0.95, 20)
    assert (config.model.k_uninet, config.model.l_uninet) == (8, 2)
    assert config.uniformity.area_fractions == [0.004, 0.006, 0.008, 0.010]


@pytest.mark.parametrize(
    "line, key",
    [
        ("denoise.T", "line 1"),
        ("T=3", "T"),
        ("solver.T=3", "solver.T"),
        ("denoise.steps=3", "denoise.steps"),
        ("denoise.T=0", "denoise.T"),
        ("denoise.s0=fast", "denoise.s0"),
    ],
)
def test_experiment_config_errors(line, key):
    with pytest.raises(ConfigError) as exc_info:
        ExperimentConfig.from_pairs([line])
    assert exc_info.value.key == key
    assert exc_info.value.exit_code == 2


def test_activation_step_beyond_iterations_is_config_error():
    with pytest.raises(ConfigError):
        ExperimentConfig.from_pairs(["denoise.T=10", "denoise.t_act=11"])


def test_from_file(tmp_path):
    path = tmp_path / "exp.cfg"
    path.write_text("train.epochs=3\ntrain.lr_milestones=1,2\n", encoding="utf-8")
    config = ExperimentConfig.from_file(path)

    assert config.train.epochs == 3
    assert config.train.lr_milestones == [1, 2]
    assert ExperimentConfig.from_file(None) == ExperimentConfig()
    with pytest.raises(DatasetIOError):
        ExperimentConfig.from_file(tmp_path / "absent.cfg")


def test_describe_keys_covers_every_section():
    rows = {key: (default, description) for key, default, description in ExperimentConfig.describe_keys()}

    assert rows["denoise.T"][0] == "30"
    assert rows["denoise.t_act"][0] == "20"
    assert rows["model.feat_widths"][0] == "32,64"
    assert rows["noise.kind"][0] == "isotropic_gaussian"
    assert all(description for _, description in rows.values())
    assert {key.split(".")[0] for key in rows} == {"noise", "denoise", "model", "train", "uniformity"}
