import numpy as np
import pytest

from snapflow.network import NetConfig, init_params
from snapflow.numerics import make_rng


@pytest.fixture
def small_cfg():
    return NetConfig(horizon=4, action_dim=2, context_dim=4, hidden=16, time_embed=8,
                     context_embed=8, n_freq=3)


@pytest.fixture
def small_params(small_cfg):
    return init_params(small_cfg, make_rng(0, 3))


def as_params(params):
    return {k: v.copy() for k, v in params.items()}
