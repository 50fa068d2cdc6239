import numpy as np
import pytest

from molrl.checkpoint import Checkpoint
from molrl.model import Model, ModelConfig
from molrl.tokenizer import Tokenizer


@pytest.fixture(scope="session")
def tok() -> Tokenizer:
    return Tokenizer()


def tiny_config(vocab_size=11, **overrides) -> ModelConfig:
    """A <=1k-parameter double-precision model for gradient verification."""
    defaults = dict(
        vocab_size=vocab_size,
        context_length=16,
        layer_count=1,
        model_width=8,
        head_count=2,
        ff_width=16,
        param_seed=0,
        dtype="float64",
    )
    defaults.update(overrides)
    return ModelConfig(**defaults)


def tiny_checkpoint(seed=0, **overrides) -> Checkpoint:
    cfg = tiny_config(param_seed=seed, **overrides)
    return Checkpoint(
        config=cfg,
        params=Model.init(cfg).params,
        provenance={"phase": "base", "step": 0, "config_hash": "test", "parent": None},
    )


def desk_checkpoint(tok: Tokenizer, seed=0, dtype="float64", context_length=384) -> Checkpoint:
    cfg = ModelConfig(
        vocab_size=tok.vocab_size,
        context_length=context_length,
        layer_count=2,
        model_width=64,
        head_count=4,
        ff_width=256,
        param_seed=seed,
        dtype=dtype,
    )
    return Checkpoint(
        config=cfg,
        params=Model.init(cfg).params,
        provenance={"phase": "base", "step": 0, "config_hash": "test", "parent": None},
    )
