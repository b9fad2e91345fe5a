"""Shared fixtures: a small world, its splits, feature tables and a tiny frozen model."""
import numpy as np
import pytest

from src.dataset import GenConfig, generate_world, split_bundles
from src.features import FeatureTable, ModalityFeatures, media_features
from src.fusion import FusionConfig
from src.tinylm import BaseLM, LMConfig, build_vocab, pretraining_corpus
from src.training import ModelState

RELATIONAL_DIM = 8
LM_WIDTH = 16


@pytest.fixture
def small_config():
    """A world small enough for fast tests."""
    return GenConfig(
        n_items=40,
        n_bundles=60,
        n_users=15,
        n_categories=4,
        n_styles=4,
        d_m=4,
        max_bundle_size=5,
    )


@pytest.fixture
def small_world(small_config):
    return generate_world(small_config, seed=7)


@pytest.fixture
def small_splits(small_world):
    return split_bundles(small_world, (0.8, 0.1, 0.1), "random", np.random.default_rng(3))


@pytest.fixture
def small_features(small_world):
    rng = np.random.default_rng(11)
    return ModalityFeatures(
        media=media_features(small_world),
        ui=FeatureTable("ui", rng.normal(size=(small_world.n_items, RELATIONAL_DIM))),
        bi=FeatureTable("bi", rng.normal(size=(small_world.n_items, RELATIONAL_DIM))),
    )


@pytest.fixture
def tiny_vocab(small_world, small_splits):
    return build_vocab(pretraining_corpus(small_world, small_splits.train))


@pytest.fixture
def tiny_base(tiny_vocab):
    config = LMConfig(vocab_size=len(tiny_vocab), d_model=LM_WIDTH, n_layers=1, n_heads=2, context_length=320, seed=0)
    return BaseLM(config).freeze()


@pytest.fixture
def fusion_config(small_world):
    return FusionConfig(
        media_dim=small_world.gen_config.d_m,
        relational_dim=RELATIONAL_DIM,
        hidden_dim=8,
        n_layers=1,
        lm_dim=LM_WIDTH,
        seed=0,
    )


@pytest.fixture
def tiny_state(tiny_base, tiny_vocab, fusion_config):
    return ModelState.initial(tiny_base, tiny_vocab, fusion_config, seed=0, lora_rank=2, lora_alpha=4.0)
