import numpy as np
import pytest

from twophase.simulation import preset, scenario_models, simulate_dataset


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def binary_case():
    """Binary outcome, expensive categorical covariate, logistic selection (n=4000)."""
    cfg = preset("table1", n=4000, master_seed=11)
    return cfg, scenario_models(cfg), simulate_dataset(cfg, 0)


@pytest.fixture(scope="session")
def linear_case():
    """Gaussian outcome with tail-stratified selection (zero selection probability in the middle)."""
    cfg = preset("table3", n=1500, master_seed=13)
    return cfg, scenario_models(cfg), simulate_dataset(cfg, 0)


@pytest.fixture(scope="session")
def surrogate_case():
    cfg = preset("table2", n=6000, master_seed=17)
    return cfg, scenario_models(cfg), simulate_dataset(cfg, 0)


_ACCEPTANCE_LINES = []


@pytest.fixture(scope="session")
def acceptance_lines():
    """Collector for the one-line PASS/FAIL verdicts of the acceptance criteria."""
    return _ACCEPTANCE_LINES


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in _ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
