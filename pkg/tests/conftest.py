import numpy as np
import pytest
import torch

from mmprotect.data import generate

torch.set_num_threads(1)


@pytest.fixture(scope="session")
def toy():
    """Small deterministic train/eval split shared across modules."""
    return generate(24, 12, 0)


@pytest.fixture(scope="session")
def tok(toy):
    return toy[0].tokenizer


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
