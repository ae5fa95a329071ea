import numpy as np
import pytest

from mlwave.evalkit import SyntheticPopulationSpec, make_population
from mlwave.training import train_with_factors

ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.write_sep("=", "acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)


@pytest.fixture
def report_criterion():
    """Record one pass/fail line for the acceptance summary, then assert it."""

    def record(number: int, ok: bool, detail: str) -> None:
        line = f"criterion {number}: {'PASS' if ok else 'FAIL'} {detail}"
        ACCEPTANCE_LINES.append(line)
        print(line)
        assert ok, line

    return record


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def small_population():
    return make_population(SyntheticPopulationSpec(seed=3, rows=17, cols=17, d2=6, d3=4))


@pytest.fixture(scope="session")
def small_model(small_population):
    pop = small_population
    return train_with_factors(pop.training_set(), 3, 3, landmark_indices=pop.landmark_indices())


@pytest.fixture(scope="session")
def tiny_population():
    return make_population(SyntheticPopulationSpec(seed=5, rows=9, cols=9, d2=5, d3=4))


@pytest.fixture(scope="session")
def tiny_model(tiny_population):
    pop = tiny_population
    return train_with_factors(pop.training_set(), 3, 3, landmark_indices=pop.landmark_indices())[0]
