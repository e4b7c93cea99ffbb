import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from baselopt import build_panel, preset
from baselopt.scenario_data import ScenarioPanel

settings.register_profile(
    "repo", derandomize=True, deadline=None, max_examples=60,
    suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("repo")


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


@pytest.fixture(scope="session")
def small_panel():
    """d=4, two normal and two stressed windows of 12 days."""
    return build_panel(preset("normal", 4), preset("stressed", 4), 2, 2, 12, seed=7)


@pytest.fixture
def dominating_panel():
    """Asset 1 returns a constant 0.01; asset 2 is noisy with a lower mean."""
    g = np.random.default_rng(3)
    blocks = []
    for _ in range(2):
        noise = g.normal(0.0, 0.02, size=8)
        blocks.append(np.column_stack([np.full(8, 0.01), noise - 0.01]))
    return ScenarioPanel(tuple(blocks), 1, 1)


ACCEPTANCE = pytest.StashKey[dict]()


@pytest.fixture
def acceptance(request):
    """Record one pass/fail line per acceptance criterion for the terminal summary."""
    log = request.config.stash.setdefault(ACCEPTANCE, {})

    def record(number, ok, detail):
        line = f"ACCEPTANCE {number}: {'PASS' if ok else 'FAIL'}  {detail}"
        log[number] = line
        print(line)
        return ok

    return record


def pytest_terminal_summary(terminalreporter, config):
    log = config.stash.get(ACCEPTANCE, {})
    if log:
        terminalreporter.section("acceptance criteria")
        for number in sorted(log):
            terminalreporter.write_line(log[number])
