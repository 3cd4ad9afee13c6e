import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from opcm import Checkpoint, ParamKind  # noqa: E402


def random_checkpoint(rng, shapes=None, scale=1.0):
    shapes = shapes or {"attn.w": (6, 4), "attn.b": (4,), "mlp.w": (5, 5), "norm": (5,)}
    return Checkpoint({n: scale * rng.standard_normal(s) for n, s in shapes.items()})


def random_experts(rng, theta0, n, scale=1.0):
    return [
        Checkpoint({k: theta0[k] + scale * rng.standard_normal(theta0[k].shape) for k in theta0})
        for _ in range(n)
    ]


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


@pytest.fixture
def theta0(rng):
    return random_checkpoint(rng)


@pytest.fixture
def experts(rng, theta0):
    return random_experts(rng, theta0, 4)


@pytest.fixture
def other_kind():
    return ParamKind.OTHER
