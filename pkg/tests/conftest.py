import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from egl_lab import datagen

settings.register_profile("egl", deadline=None, max_examples=60,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("egl")

ACCEPTANCE_KEY = pytest.StashKey[list]()


def pytest_configure(config):
    config.stash[ACCEPTANCE_KEY] = []


def pytest_terminal_summary(terminalreporter, config):
    lines = sorted(config.stash.get(ACCEPTANCE_KEY, []))
    if lines:
        terminalreporter.section("acceptance criteria")
        for _, line in lines:
            terminalreporter.write_line(line)


@pytest.fixture
def criterion(request):
    """``criterion(number, passed, detail)`` records a summary line and asserts."""

    def record(number, passed, detail):
        line = f"[{'PASS' if passed else 'FAIL'}] criterion {number}: {detail}"
        request.config.stash[ACCEPTANCE_KEY].append((number, line))
        print(line)
        assert passed, line

    return record


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def cubic_small():
    return datagen.generate(datagen.DatasetSpec("cubic", num_instances=30, seed=3, n=20))


@pytest.fixture(scope="session")
def webadv_small():
    return datagen.generate(datagen.DatasetSpec("webadv", num_instances=30, seed=3, n=10, m=5, k=2))


@pytest.fixture(scope="session")
def portfolio_small():
    return datagen.generate(datagen.DatasetSpec("portfolio", num_instances=30, seed=3, d=8,
                                                history_len=5))
