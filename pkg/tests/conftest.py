import warnings
from pathlib import Path

import pytest
import torch

from videodds.denoisers import GaussianWorld, load_pretrained
from videodds.diffcore import build_schedule

DATA = Path(__file__).parent / "data"


@pytest.fixture(scope="session")
def sched():
    return build_schedule()


@pytest.fixture(scope="session")
def pretrained():
    return load_pretrained()


@pytest.fixture
def world():
    gen = torch.Generator().manual_seed(0)
    mu = {c: torch.randn(2, 3, 4, 4, generator=gen) for c in ("red square", "blue square")}
    return GaussianWorld(mu, sigma=0.5)


@pytest.fixture(autouse=True)
def _quiet_degenerate_tokens():
    with warnings.catch_warnings():
        warnings.filterwarnings("ignore", message="zero-norm")
        yield
