import numpy as np
import pytest
import torch

from modiff.model import build_model
from modiff.motion import toy_skeleton

TINY = dict(base_channels=2, channel_mults=(1, 1, 1), heads=1, attn_dim=2, context_dim=2, ff_mult=1,
            zero_init_output=False, max_groups=1)


def tiny_model(modality="audio", dtype=torch.float64, seed=0, **kw):
    torch.manual_seed(seed)
    model = build_model(toy_skeleton(), 20.0, modality, **{**TINY, **kw})
    return model.to(dtype)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def skel():
    return toy_skeleton()
