import numpy as np
import pytest

from melodi.config import ModelConfig
from melodi.tensor import get_default_dtype, set_default_dtype


@pytest.fixture(autouse=True)
def float64():
    prev = get_default_dtype()
    set_default_dtype("float64")
    yield
    set_default_dtype(prev)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def toy_config(**kw) -> ModelConfig:
    """The 4-layer causality-suite model: dim 64, W=16, S=4, L=2, Q_max=4."""
    base = dict(n_layers=4, long_term_layer_positions=[2], dim=64, heads=4, ffn_hidden=128,
                window_len=16, short_tokens=4, long_tokens=2, q_max=4, vocab_size=50)
    base.update(kw)
    return ModelConfig(**base).validate()


def tiny_config(**kw) -> ModelConfig:
    base = dict(n_layers=2, long_term_layer_positions=[1], dim=8, heads=2, ffn_hidden=16,
                window_len=4, short_tokens=2, long_tokens=1, q_max=3, vocab_size=11)
    base.update(kw)
    return ModelConfig(**base).validate()
