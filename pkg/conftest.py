import numpy as np
import pytest

from safe_explore.environments import build_corridor, build_unstable_grid
from safe_explore.mdp_core import Branch, TabularMDP
from safe_explore.models import GridSpec


def pytest_addoption(parser):
    parser.addoption("--runslow", action="store_true", default=False, help="run full-size experiment tests")


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: full-size experiment, needs --runslow")


def pytest_collection_modifyitems(config, items):
    if config.getoption("--runslow"):
        return
    skip_slow = pytest.mark.skip(reason="needs --runslow")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip_slow)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def corridor15():
    return build_corridor(15)


@pytest.fixture
def grid_spec():
    return GridSpec.from_map(
        "....\n"
        ".O..\n"
        "..#.\n"
        "....\n"
    )


@pytest.fixture
def small_grid(grid_spec):
    return build_unstable_grid(grid_spec)


@pytest.fixture
def forced_chain():
    """s_a (0) always moves to s_b (1); every action at s_b damages into sink 2."""
    return TabularMDP(
        3,
        2,
        [
            [[Branch(1, 1.0)], [Branch(1, 1.0)]],
            [[Branch(2, 1.0, 0.0, 1)], [Branch(2, 0.5, 0.0, 1), Branch(1, 0.5)]],
            [[Branch(2, 1.0)], [Branch(2, 1.0)]],
        ],
        terminal_states=[2],
        name="forced-chain",
    )


@pytest.fixture
def safe_loop():
    """Single damage-free state with reward 1."""
    return TabularMDP(1, 1, [[[Branch(0, 1.0, 1.0, 0)]]], name="safe-loop")
