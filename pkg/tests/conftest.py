import numpy as np
import pytest
from hypothesis import HealthCheck, settings

settings.register_profile("default", deadline=None, max_examples=60,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")

_ACCEPTANCE_KEY = pytest.StashKey[dict]()


def pytest_configure(config):
    config.stash[_ACCEPTANCE_KEY] = {}


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def acceptance_log(request):
    """Criterion number -> (passed, detail); printed in the terminal summary."""
    return request.config.stash[_ACCEPTANCE_KEY]


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    log = config.stash.get(_ACCEPTANCE_KEY, {})
    if not log:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(log):
        ok, detail = log[n]
        terminalreporter.write_line(f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
