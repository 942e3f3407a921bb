import numpy as np
import pytest

from gres.checks import micro_config
from gres.data import GenConfig, generate_synthetic
from gres.pipeline import prepare


@pytest.fixture(scope="session")
def small_ds():
    return generate_synthetic(GenConfig(n_common_users=40, n_unique_users=8, n_items=60,
                                        n_categories=10, n_dishes=30, sparsity_A=0.08, rng_seed=3))


@pytest.fixture(scope="session")
def micro_cfg():
    return micro_config(0)


@pytest.fixture(scope="session")
def micro_prep(micro_cfg):
    return prepare(micro_cfg)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip("."))):
            terminalreporter.write_line(line)
