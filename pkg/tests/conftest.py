import numpy as np
import pytest

from adapterkit import AdapterModel, ModelConfig


@pytest.fixture
def desk_config():
    """The default compact encoder shape used throughout the suite."""
    return ModelConfig()


@pytest.fixture
def tiny_config():
    """A minimal shape for oracle tests that recompute everything by hand."""
    return ModelConfig(hidden_size=8, num_layers=1, num_heads=2, ffn_size=16,
                      vocab_size=64, max_seq_len=8)


@pytest.fixture
def tiny_model(tiny_config):
    return AdapterModel(tiny_config, seed=7)


@pytest.fixture
def desk_model(desk_config):
    return AdapterModel(desk_config, seed=7)


def random_sequences(rng, n, max_len, vocab):
    out = []
    for _ in range(n):
        length = int(rng.integers(1, max_len + 1))
        out.append([int(t) for t in rng.integers(0, vocab, size=length)])
    return out
