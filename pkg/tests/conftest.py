import numpy as np
import pytest
import torch

from dosac.config import RunConfig, expand_preset
from dosac.tabular_scm import random_spec


def pytest_addoption(parser):
    parser.addoption("--runslow", action="store_true", default=False, help="run slow protocol tests")


def pytest_collection_modifyitems(config, items):
    if config.getoption("--runslow"):
        return
    skipSlow = pytest.mark.skip(reason="needs --runslow")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skipSlow)


@pytest.fixture
def spec_corpus():
    rng = np.random.default_rng(1234)
    specs = []
    for _ in range(100):
        S, A, U = rng.integers(1, 4, size=3)
        specs.append(random_spec(S, A, U, rng, iid_confounder=bool(rng.integers(2))))
    return specs


@pytest.fixture
def generator():
    return torch.Generator().manual_seed(0)


@pytest.fixture
def small_config(tmp_path) -> RunConfig:
    """A point-mass configuration that trains in a few seconds."""
    config = expand_preset("desk")
    data = config.to_dict()
    data.update(
        total_steps=300,
        warmup_steps=50,
        batch_size=16,
        buffer_capacity=1000,
        seeds=[0],
        output_dir=str(tmp_path),
    )
    data["network"].update(hidden_sizes=[8, 8], critic_hidden_sizes=[8, 8])
    data["env"].update(max_steps=40)
    data["eval"].update(interval=150, episodes=2)
    return RunConfig.from_dict(data)
