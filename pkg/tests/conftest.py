import numpy as np
import pytest
import torch

torch.set_num_threads(1)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def uniform_probs():
    def make(n, k=3):
        return torch.full((n, k), 1.0 / k)

    return make
