import pickle

import pytest

from rltab import pipeline
from rltab.toy import load_toy


@pytest.fixture(scope="session")
def toy():
    return load_toy()


@pytest.fixture(scope="session")
def prep(toy):
    return pipeline.prepare(toy, 0.2, 0)


@pytest.fixture(scope="session")
def small_policy(prep):
    """A briefly pretrained small decoder, shared by tests that need a non-uniform policy."""
    result = pipeline.pretrain(prep, seed=0, epochs=3, lr=1e-3, batch_size=32, embed_dim=16, hidden=32)
    return result.policy


@pytest.fixture
def clone():
    return lambda obj: pickle.loads(pickle.dumps(obj))


@pytest.fixture(scope="session")
def default_pretrain(prep):
    """Pretraining at the package defaults (about a minute and a half on one core)."""
    return pipeline.pretrain(prep, seed=0)


def pytest_terminal_summary(terminalreporter):
    from .test_acceptance import RESULTS
    if RESULTS:
        terminalreporter.section("acceptance criteria")
        def order(line):
            return int(line.split()[1].rstrip(":")) if line.startswith("CRITERION") else 99
        for line in sorted(RESULTS, key=order):
            terminalreporter.write_line(line)
