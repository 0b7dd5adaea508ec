"""Shared fixtures: a tiny catalog and a desk-scale model."""

import numpy as np
import pytest

from camenn import synth
from camenn.embeddings import Vocab
from camenn.model import CameNNModel, ModelConfig
from camenn.moe import MoeConfig


@pytest.fixture(scope="session")
def tiny_catalog():
    _, items = synth.gen_catalog(num_concepts=4, num_items=10,
                                 text_corruption_rate=0.0,
                                 image_corruption_rate=0.0, seed=42)
    return items


@pytest.fixture(scope="session")
def tiny_vocab(tiny_catalog):
    return Vocab.from_texts([i.text for i in tiny_catalog])


def make_model(vocab, **overrides):
    moe_kwargs = {"num_experts": 2, "top_k": 2}
    for k in ("num_experts", "top_k", "expert_kind", "gating_mode"):
        if k in overrides:
            moe_kwargs[k] = overrides.pop(k)
    cfg = ModelConfig(d_model=8, num_heads=2, num_blocks=1, ffn_hidden=16,
                      moe=MoeConfig(**moe_kwargs),
                      max_text_len=8, max_behavior=2, num_users=30,
                      seed=overrides.pop("seed", 0), **overrides)
    return CameNNModel(cfg, vocab)


@pytest.fixture
def tiny_model(tiny_vocab):
    return make_model(tiny_vocab)
