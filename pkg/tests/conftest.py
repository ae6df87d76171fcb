import numpy as np
import pytest

from nsdpo.core import Environment, OfflineDataset


def random_dataset(rng, n=60, T=11, d_x=2, n_actions=4, soft=False):
    """Sorted random dataset; labels are Bernoulli(1/2) or uniform soft labels."""
    env = Environment(d_x, n_actions)
    t = np.sort(rng.integers(1, T, size=n))
    a1 = rng.integers(0, n_actions, size=n)
    a2 = (a1 + rng.integers(1, n_actions, size=n)) % n_actions
    label = rng.random(n) if soft else (rng.random(n) < 0.5).astype(float)
    return OfflineDataset(rng.random((n, d_x)), a1, a2, t, label, T, env)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


ACCEPTANCE_LINES: dict[int, str] = {}


@pytest.fixture
def report():
    """Record the one-line verdict for an acceptance criterion."""

    def record(criterion: int, passed: bool, detail: str) -> None:
        line = f"criterion {criterion:>2}: {'PASS' if passed else 'FAIL'}  {detail}"
        ACCEPTANCE_LINES[criterion] = line
        print(line)

    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for k in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[k])
