import numpy as np
import pytest

from hemenet.datasets import SyntheticConfig, generate_synthetic
from hemenet.graph import GraphConfig
from hemenet.model import HeMeNetConfig, init_params
from hemenet.train import prepare_data

SMALL_DIMS = {"ec": 8, "mf": 8, "bp": 8, "cc": 8}

# one line per numbered criterion, filled in by test_acceptance.py
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


@pytest.fixture(scope="session")
def small_cfg64():
    return HeMeNetConfig(L=2, d=16, task_dims=SMALL_DIMS, dtype="float64")


@pytest.fixture(scope="session")
def small_store64(small_cfg64):
    return init_params(small_cfg64, seed=11)


@pytest.fixture(scope="session")
def synthetic_samples():
    return generate_synthetic(SyntheticConfig(n_samples=8, seed=3))


@pytest.fixture(scope="session")
def synthetic_data64(synthetic_samples):
    return prepare_data(synthetic_samples, GraphConfig(), np.float64)
