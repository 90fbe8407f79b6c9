import numpy as np
import pytest

from noveltyplan import dataset as ds
from noveltyplan import evaluate as ev
from noveltyplan.vae import VaeConfig
from noveltyplan.world_model import DynamicsConfig, EncoderConfig

# every dataset built here is replay-checked in test_dataset
REPLAY_DATASETS = []


def _track(d):
    REPLAY_DATASETS.append(d)
    return d


@pytest.fixture(scope="session")
def granular_small():
    return _track(ds.generate("granular", ds.GAPPED, episodes=100, frames=20, seed=3))


@pytest.fixture(scope="session")
def rope_small():
    return _track(ds.generate("rope", ds.UNIFORM, episodes=12, frames=10, seed=4))


@pytest.fixture(scope="session")
def quick_artifacts(granular_small):
    """A fully trained but deliberately short-trained model stack."""
    return ev.train_artifacts(
        granular_small,
        EncoderConfig(epochs=25),
        DynamicsConfig(epochs=8),
        VaeConfig(epochs=40),
    )


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# one line per acceptance criterion, echoed in the terminal summary
ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
