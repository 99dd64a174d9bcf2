import numpy as np
import pytest
from hypothesis import settings

from sempl.dataset import SynthSpec, generate_synthetic_system

settings.register_profile("default", deadline=None, max_examples=60)
settings.load_profile("default")


def jittered(center, n=30, sigma=0.01, seed=0):
    return center + np.random.default_rng(seed).normal(0.0, sigma, size=n)


@pytest.fixture(scope="session")
def small_system():
    """Four binary-option environments at divergences 0, 1, 0.5 and 0.05."""
    return generate_synthetic_system(SynthSpec(n_options=6, n_samples=64,
                                               deltas=(0.0, 1.0, 0.5, 0.05)), seed=7)


@pytest.fixture(scope="session")
def property_system():
    return generate_synthetic_system(SynthSpec(n_options=10, n_samples=500,
                                               deltas=(0.0, 1.0, 0.5, 0.05)), seed=0)


_CRITERIA = []
_SETUP_TIME = pytest.StashKey[float]()


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None:
        return
    if rep.when == "setup" and rep.outcome == "passed":
        item.stash[_SETUP_TIME] = rep.duration
    elif rep.when == "call" or rep.when == "setup":
        status = {"passed": "PASS", "failed": "FAIL", "skipped": "SKIP"}[rep.outcome]
        duration = rep.duration + item.stash.get(_SETUP_TIME, 0.0)
        _CRITERIA.append((marker.args[0], marker.args[1], status, duration))


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.write_sep("=", "acceptance criteria")
    for number, title, status, duration in sorted(_CRITERIA):
        terminalreporter.write_line(f"{status}  criterion {number:>2}: {title} ({duration:.1f}s)")
