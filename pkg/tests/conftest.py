from __future__ import annotations

import pytest
import torch

from rsmoe.config import ModelConfig, RunConfig, model_preset
from rsmoe.dataset import collate, make_samples
from rsmoe.scenes import INSTRUCTIONS
from rsmoe.vocab import default_vocab


@pytest.fixture(scope="session")
def vocab():
    return default_vocab()


@pytest.fixture(scope="session")
def tiny_cfg(vocab) -> ModelConfig:
    return model_preset("tiny", vocab_size=len(vocab))


@pytest.fixture(scope="session")
def default_cfg(vocab) -> ModelConfig:
    return ModelConfig(vocab_size=len(vocab))


@pytest.fixture
def gen():
    def make(seed: int = 0) -> torch.Generator:
        return torch.Generator().manual_seed(seed)

    return make


@pytest.fixture(scope="session")
def samples():
    return make_samples(0, 6)


@pytest.fixture
def tiny_run(tiny_cfg) -> RunConfig:
    """A run small enough to train in seconds."""
    return RunConfig(
        seed=0,
        train_size=6,
        test_size=3,
        epochs=2,
        warmup_epochs=1,
        pretrain_epochs=1,
        batch_size=3,
        base_lr=1e-3,
        min_lr=1e-5,
        model=tiny_cfg,
    )


@pytest.fixture
def make_batch(vocab, tiny_cfg):
    def make(batch_samples, roles=("caption",), instruction=INSTRUCTIONS[0], cfg=None):
        cfg = cfg or tiny_cfg
        return collate(
            batch_samples,
            vocab,
            instruction=instruction,
            roles=roles,
            max_caption_len=cfg.max_caption_len,
            max_instruction_len=cfg.max_instruction_len,
        )

    return make
