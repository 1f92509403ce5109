"""Tests for the command-line surface and the pipeline graph."""

import json

import pytest

from conftest import SMALL_VOXELS
from mind_decoder.cli import main
from mind_decoder.graph import graph, route_start
from mind_decoder.metrics import write_predictions
from mind_decoder.state import PipelineState

TINY_CONFIG = {
    "name": "tiny",
    "seed": 0,
    "synth": {
        "n_categories": 3,
        "samples_per_category": 4,
        "test_samples_per_category": 2,
        "voxel_counts": SMALL_VOXELS,
        "d_proxy": 8,
        "patch_grid": 4,
        "block_size": 2,
    },
    "encoder": {"embed_dim": 16, "n_layers": 1, "n_heads": 2},
    "decoder": {"embed_dim": 32, "n_layers": 2, "n_heads": 4, "max_seq_len": 16},
    "bridge": {"scaling_factor": 8, "n_heads": 4, "base_head_dim": 32},
    "optimizer": {"learning_rate": 0.001, "steps": 3, "batch_size": 6},
    "pretrain": {"learning_rate": 0.003, "steps": 20, "batch_size": 8},
    "generation": {"max_new_tokens": 6},
    "analysis": {"tsne": {"perplexity": 2.0, "iterations": 50}},
}


@pytest.fixture
def config_path(tmp_path):
    path = tmp_path / "tiny.json"
    path.write_text(json.dumps(TINY_CONFIG))
    return path


def run(*argv):
    return main([str(a) for a in argv])


def last_error(capsys):
    return json.loads(capsys.readouterr().err.strip().splitlines()[-1])


def test_synth_data_writes_splits_and_run_manifest(tmp_path, config_path):
    assert run("synth-data", "--config", config_path, "--out", tmp_path / "data", "--seed", 4) == 0
    for split in ("train", "test"):
        assert (tmp_path / "data" / split / "manifest.json").is_file()
    manifest = json.loads((tmp_path / "data" / "synth-data.run.json").read_text())
    assert manifest["seed"] == 4
    assert manifest["config_path"] == str(config_path)
    assert set(manifest["outputs"]) == {"train", "test"}


def test_missing_predictions_give_json_error(tmp_path, config_path, synthetic, capsys):
    code = run("evaluate", "--config", config_path, "--predictions", tmp_path / "none.tsv",
               "--test", synthetic.test.root, "--out", tmp_path / "eval")
    assert code == 2
    error = last_error(capsys)
    assert error["error_type"] == "MissingArtifact"
    assert error["success"] is False


def test_invalid_configuration_gives_config_error(tmp_path, capsys):
    path = tmp_path / "bad.json"
    path.write_text(json.dumps({"bridge": {"scaling_factor": 3}}))
    assert run("synth-data", "--config", path, "--out", tmp_path / "data") == 2
    assert last_error(capsys)["error_type"] == "ConfigError"


def test_unexpected_errors_exit_with_one(tmp_path, config_path, monkeypatch, capsys):
    def explode(*args, **kwargs):
        raise RuntimeError("disk on fire")

    monkeypatch.setattr("mind_decoder.commands.cmd_synth_data", explode)
    assert run("synth-data", "--config", config_path, "--out", tmp_path / "data") == 1
    error = last_error(capsys)
    assert error == {"error": "disk on fire", "error_type": "InternalError", "success": False}


def test_evaluate_reference_captions(tmp_path, config_path, synthetic):
    test = synthetic.test
    predictions = write_predictions([(s.sample_id, test.caption_text(s)) for s in test.samples],
                                    tmp_path / "predictions.tsv")
    assert run("evaluate", "--config", config_path, "--predictions", predictions, "--test", test.root,
               "--out", tmp_path / "eval") == 0
    report = json.loads((tmp_path / "eval" / "report.json").read_text())
    assert report["b1"] == pytest.approx(100.0)
    assert report["rouge_l"] == pytest.approx(100.0)
    assert (tmp_path / "eval" / "evaluate.run.json").is_file()


@pytest.mark.slow
def test_end_to_end_commands(tmp_path, config_path):
    data, lm, trained = tmp_path / "data", tmp_path / "lm", tmp_path / "train"
    common = ("--config", config_path)
    assert run("synth-data", *common, "--out", data) == 0
    assert run("pretrain-lm", *common, "--train", data / "train", "--out", lm) == 0
    assert (lm / "pretrain_log.tsv").read_text().startswith("step\tloss")
    assert run("train", *common, "--train", data / "train", "--decoder", lm / "decoder", "--out", trained) == 0
    model = trained / "model"

    for out in ("decode_a", "decode_b"):
        assert run("decode", *common, "--model", model, "--test", data / "test", "--out", tmp_path / out) == 0
    first = (tmp_path / "decode_a" / "predictions.tsv").read_text()
    assert first == (tmp_path / "decode_b" / "predictions.tsv").read_text()
    assert len(first.splitlines()) == 6

    assert run("decode", *common, "--model", model, "--test", data / "test", "--out", tmp_path / "beam",
               "--strategy", "beam", "--beam-width", "3") == 0
    assert run("evaluate", *common, "--predictions", tmp_path / "decode_a" / "predictions.tsv",
               "--test", data / "test", "--out", tmp_path / "eval") == 0

    assert run("tsne-export", *common, "--model", model, "--data", data / "test", "--out", tmp_path / "tsne") == 0
    summary = json.loads((tmp_path / "tsne" / "tsne_summary.json").read_text())
    assert {"kl_divergence", "silhouette", "trustworthiness"} <= set(summary)
    assert len((tmp_path / "tsne" / "tsne.tsv").read_text().splitlines()) == 7

    assert run("visualize-cues", *common, "--model", model, "--data", data / "test",
               "--out", tmp_path / "cues") == 0
    cues = json.loads((tmp_path / "cues" / "cue_maps.json").read_text())
    assert len(cues["cue_maps"]) == 6


#######################################
# Pipeline graph
#######################################

def test_graph_nodes():
    assert {"synth_data", "pretrain_lm", "train", "decode", "evaluate"} <= set(graph.nodes)
    assert graph.name == "MindDecoder Pipeline"


ROUTE_CASES = {
    "no_manifests": (PipelineState(), "synth_data"),
    "train_only": (PipelineState(train_manifest="a"), "synth_data"),
    "both_manifests": (PipelineState(train_manifest="a", test_manifest="b"), "pretrain_lm"),
}


@pytest.mark.parametrize("state,expected", ROUTE_CASES.values(), ids=ROUTE_CASES.keys())
def test_route_start(state, expected):
    assert route_start(state) == expected


@pytest.mark.slow
def test_pipeline_command(tmp_path, config_path):
    assert run("pipeline", "--config", config_path, "--out", tmp_path / "pipeline") == 0
    report = json.loads((tmp_path / "pipeline" / "evaluate" / "report.json").read_text())
    assert report["n_candidates"] == 6
