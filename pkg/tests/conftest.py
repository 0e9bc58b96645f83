import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from unilora.mixed_lora import LoraAdapter  # noqa: E402
from unilora.model import BaseWeights, ModelConfig  # noqa: E402

TINY = ModelConfig(vocab_size=32, hidden=32, n_layers=2, n_heads=4, mlp_hidden=48, max_seq=64, dtype="float64")


@pytest.fixture(scope="session")
def cfg():
    return TINY


@pytest.fixture(scope="session")
def base():
    return BaseWeights.random(TINY, seed=0, std=0.2)


def make_adapter(config, aid, rank=2, seed=0, b_std=0.2, std=0.2, **kw):
    return LoraAdapter.init(config, aid, rank=rank, alpha=2.0 * rank, seed=seed, std=std, b_std=b_std, **kw)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
