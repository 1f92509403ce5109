"""Shared fixtures: a small synthetic dataset and a pre-trained tiny decoder."""

import pytest

from mind_decoder.dataset import SynthConfig, generate_synthetic_dataset
from mind_decoder.modeling.bridge import DecoderConfig
from mind_decoder.training import OptimizerConfig, pretrain_lm

SMALL_VOXELS = {"V1": 12, "V2": 10, "V3": 9, "V4": 8, "LOC": 11, "FFA": 7, "PPA": 6}


def small_synth_config(**overrides) -> SynthConfig:
    params = dict(
        n_categories=3,
        samples_per_category=4,
        test_samples_per_category=2,
        voxel_counts=dict(SMALL_VOXELS),
        d_proxy=8,
        patch_grid=4,
        block_size=2,
    )
    params.update(overrides)
    return SynthConfig(**params)


def tiny_decoder_config(vocab_size: int, **overrides) -> DecoderConfig:
    params = dict(vocab_size=vocab_size, embed_dim=32, n_layers=2, n_heads=4, max_seq_len=16)
    params.update(overrides)
    return DecoderConfig(**params)


@pytest.fixture
def synth_config():
    return small_synth_config


@pytest.fixture(scope="session")
def synthetic(tmp_path_factory):
    return generate_synthetic_dataset(small_synth_config(), seed=7, out_dir=tmp_path_factory.mktemp("synth"))


@pytest.fixture(scope="session")
def pretrained_decoder(synthetic):
    train = synthetic.train
    corpus = [c for captions in train.category_caption_pool.values() for c in captions]
    config = tiny_decoder_config(len(train.vocabulary))
    optimizer = OptimizerConfig(learning_rate=3e-3, steps=150, batch_size=16, seed=0)
    return pretrain_lm(corpus, config, optimizer, vocabulary_size=len(train.vocabulary)).decoder
