"""Tests for the header.json + tensors.bin checkpoint format."""

import json

import numpy as np
import pytest
import torch

from conftest import tiny_decoder_config
from mind_decoder.dataset import BOS_ID
from mind_decoder.errors import MissingArtifactError, ShapeMismatchError, VocabularyMismatchError
from mind_decoder.modeling import (
    BridgeConfig,
    EncoderConfig,
    FrozenDecoder,
    GenerationConfig,
    build_model,
    encode,
    generate,
    load_checkpoint,
    load_decoder,
    load_model,
    save_checkpoint,
    save_decoder,
    save_model,
)

FINGERPRINT = "0" * 40


@pytest.fixture
def decoder():
    torch.manual_seed(0)
    return FrozenDecoder(tiny_decoder_config(24)).freeze()


def test_tensor_layout_is_little_endian_float32(tmp_path):
    tensors = {"a": torch.arange(6, dtype=torch.float32).reshape(2, 3), "b": torch.tensor([1.5])}
    path = save_checkpoint(tmp_path / "ckpt", tensors, kind="test", config={"x": 1})
    blob = (path / "tensors.bin").read_bytes()
    assert len(blob) == 7 * 4
    np.testing.assert_array_equal(np.frombuffer(blob, dtype="<f4"), [0, 1, 2, 3, 4, 5, 1.5])
    header = json.loads((path / "header.json").read_text())
    assert header["tensors"][1] == {"name": "b", "shape": [1], "offset": 24, "length": 1}

    loaded = load_checkpoint(path)
    assert loaded.header["config"] == {"x": 1}
    torch.testing.assert_close(loaded.tensors["a"], tensors["a"])


def test_truncated_tensor_file(tmp_path):
    path = save_checkpoint(tmp_path / "ckpt", {"a": torch.ones(10)}, kind="test", config={})
    (path / "tensors.bin").write_bytes((path / "tensors.bin").read_bytes()[:20])
    with pytest.raises(ShapeMismatchError, match="runs past the end"):
        load_checkpoint(path)


def test_missing_checkpoint(tmp_path):
    with pytest.raises(MissingArtifactError):
        load_checkpoint(tmp_path / "nothing")


def test_decoder_round_trip(tmp_path, decoder):
    path = save_decoder(tmp_path / "decoder", decoder, FINGERPRINT)
    loaded = load_decoder(path, FINGERPRINT)
    ids = torch.tensor([[BOS_ID, 4, 5, 6]])
    torch.testing.assert_close(loaded(ids), decoder(ids))
    assert loaded.frozen and not loaded.training
    assert json.loads((path / "header.json").read_text())["frozen"] is True


def test_decoder_vocabulary_mismatch(tmp_path, decoder):
    path = save_decoder(tmp_path / "decoder", decoder, FINGERPRINT)
    with pytest.raises(VocabularyMismatchError):
        load_decoder(path, "1" * 40)


def test_model_round_trip(tmp_path, decoder, synthetic):
    train = synthetic.train
    decoder_path = save_decoder(tmp_path / "decoder", decoder, FINGERPRINT)
    model = build_model(
        EncoderConfig(embed_dim=16, n_layers=1, n_heads=2), BridgeConfig(base_head_dim=32), decoder,
        train.pad_width, 7, train.d_proxy, "frozen_random_map", seed=5,
    )
    with torch.no_grad():
        for layer in model.bridge.layers:
            layer.attn.to_out.weight.normal_(std=0.3)
    path = save_model(tmp_path / "model", model, dataset_fingerprint=train.fingerprint,
                      decoder_path=decoder_path, seed=5)
    loaded = load_model(path)

    sample = train.samples[0]
    model.eval()
    torch.testing.assert_close(encode(sample.rois, loaded.encoder), encode(sample.rois, model.encoder))
    config = GenerationConfig(max_new_tokens=6)
    latent = encode(sample.rois, model.encoder)
    assert generate(latent, config, loaded.decoder, loaded.bridge) == generate(latent, config, model.decoder, model.bridge)
    torch.testing.assert_close(loaded.proxy.image_map, model.proxy.image_map)
    assert loaded.proxy.mode == "frozen_random_map"


def test_model_checkpoint_is_not_a_decoder(tmp_path, decoder, synthetic):
    train = synthetic.train
    model = build_model(EncoderConfig(embed_dim=16, n_layers=1, n_heads=2), BridgeConfig(base_head_dim=32), decoder,
                        train.pad_width, 7, train.d_proxy, "from_dataset", seed=0)
    path = save_model(tmp_path / "model", model, dataset_fingerprint="", decoder_path=tmp_path / "none", seed=0)
    with pytest.raises(MissingArtifactError, match="not a decoder"):
        load_decoder(path)
