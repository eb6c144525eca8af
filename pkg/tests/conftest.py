import numpy as np
import pytest
from hypothesis import settings

from leakmi.data import Dataset

settings.register_profile("default", deadline=None, max_examples=100)
settings.load_profile("default")


def worked_example_dataset(n, seed=0):
    """Binary feature, binary label: x=0 -> y=0; x=1 -> y=1 with probability 0.1."""
    rng = np.random.default_rng(seed)
    cell = rng.choice(3, size=n, p=[0.5, 0.45, 0.05])
    x = (cell > 0).astype(float)
    y = (cell == 2).astype(int)
    return Dataset(x[:, None], y, 2)


def population_example_dataset(scale=20):
    """The same joint at exact population frequencies (multiples of 20 rows)."""
    n00, n10, n11 = 10 * scale, 9 * scale, 1 * scale
    x = np.r_[np.zeros(n00), np.ones(n10 + n11)]
    y = np.r_[np.zeros(n00 + n10), np.ones(n11)].astype(int)
    return Dataset(x[:, None], y, 2)


@pytest.fixture
def blobs():
    rng = np.random.default_rng(7)
    X = np.vstack([rng.normal(-3, 1, (100, 2)), rng.normal(3, 1, (100, 2))])
    y = np.r_[np.zeros(100), np.ones(100)].astype(int)
    return Dataset(X, y, 2)


# One line per acceptance criterion, echoed in the terminal summary.
ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.write_sep("=", "acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
