import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from minclab.dataset import JointDistribution, FeatureTable, make_block_graph

settings.register_profile(
    "default", deadline=None, max_examples=40, suppress_health_check=[HealthCheck.too_slow]
)
settings.load_profile("default")


def random_joint(n, seed, symmetric=True, m=None):
    """Dense random joint with strictly positive marginals."""
    rng = np.random.default_rng(seed)
    table = rng.random((n, n if m is None else m)) + 0.05
    if symmetric and m is None:
        table = table + table.T
    return JointDistribution(table / table.sum())


@pytest.fixture
def block_graph():
    return make_block_graph(4, 8, 0.97, 0.5, 16, seed=0)


@pytest.fixture
def small_graph():
    return make_block_graph(2, 4, 0.9, 0.3, 5, seed=1)


@pytest.fixture
def sixteen_point():
    joint = random_joint(16, seed=3)
    feats = FeatureTable(np.random.default_rng(4).normal(size=(16, 5)))
    return joint, feats


ACCEPTANCE_LINES: list[str] = []


def record_criterion(number: int, title: str, ok: bool, detail: str) -> None:
    """Print and remember one pass/fail line; the terminal summary repeats them."""
    line = f"criterion {number:2d} [{'PASS' if ok else 'FAIL'}] {title}: {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
