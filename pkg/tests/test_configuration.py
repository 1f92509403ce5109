"""Tests for configuration loading, validation and overrides."""

import json

import pytest

from mind_decoder.configuration import CONFIG_ENV_VAR, Configuration, load_config
from mind_decoder.errors import ConfigError


def write_config(tmp_path, payload, name="config.json"):
    path = tmp_path / name
    path.write_text(json.dumps(payload) if not isinstance(payload, str) else payload)
    return path


def test_template_is_the_default():
    config = Configuration.from_file()
    assert config.name == "MindDecoder desk scale"
    assert config.encoder.variant == "B"
    assert config.bridge.scaling_factor == 8
    assert config.loss.lambda_clip == 10.0
    assert config.data.roi_subset == "VC"
    assert config.analysis.tsne.perplexity == 15.0
    assert config.experiments.scaling_factors == [4, 8, 16]
    # desk-scale preset: ten times the built-in rate for its short 300-step schedule
    assert config.optimizer.learning_rate == 1e-3
    assert config.optimizer.steps == 300


def test_partial_file_fills_section_defaults(tmp_path):
    path = write_config(tmp_path, {"seed": 5, "loss": {"lambda_clip": 0.0}})
    config = Configuration.from_file(path)
    assert config.seed == 5
    assert config.loss.lambda_clip == 0.0
    assert config.loss.label_smoothing == 0.0
    assert config.run_optimizer.seed == 5
    assert config.run_pretrain.seed == 5
    assert config.optimizer.learning_rate == 1e-4


def test_environment_variable_selects_file(tmp_path, monkeypatch):
    path = write_config(tmp_path, {"name": "from env"})
    monkeypatch.setenv(CONFIG_ENV_VAR, str(path))
    assert load_config()["name"] == "from env"


def test_missing_explicit_path_falls_back(tmp_path, monkeypatch):
    monkeypatch.delenv(CONFIG_ENV_VAR, raising=False)
    assert load_config(tmp_path / "absent.json")["name"] == "MindDecoder desk scale"


INVALID_CASES = {
    "malformed_json": "{not json",
    "not_an_object": "[1, 2]",
    "unknown_top_level_key": {"learning_rate": 1.0},
    "unknown_section_key": {"bridge": {"scaling": 4}},
    "scaling_factor_not_a_divisor": {"bridge": {"scaling_factor": 3}},
    "bad_roi_subset": {"data": {"roi_subset": "V5"}},
    "bad_variant": {"experiments": {"variants": ["XL"]}},
    "bad_tsne": {"analysis": {"tsne": {"perplexity": 0.5}}},
    "bad_strategy": {"generation": {"strategy": "sample"}},
}


@pytest.mark.parametrize("payload", INVALID_CASES.values(), ids=INVALID_CASES.keys())
def test_invalid_configuration(tmp_path, payload):
    path = write_config(tmp_path, payload)
    with pytest.raises(ConfigError):
        Configuration.from_file(path)


def test_dict_round_trip():
    config = Configuration.from_file()
    assert Configuration.from_dict(config.to_dict()) == config


def test_overrides_merge_into_sections():
    config = Configuration.from_file().with_overrides({
        "seed": 3,
        "generation": {"strategy": "beam"},
        "analysis": {"tsne": {"perplexity": 4.0}},
    })
    assert config.seed == 3
    assert config.generation.strategy == "beam"
    assert config.generation.beam_width == 3
    assert config.analysis.tsne.perplexity == 4.0
    assert config.analysis.tsne.iterations == 1000


def test_runnable_config_overlays_known_keys():
    config = Configuration.from_runnable_config({"configurable": {"seed": 9, "thread_id": "t1"}})
    assert config.seed == 9
    assert Configuration.from_runnable_config(None) == Configuration()
