import numpy as np
import pytest

from lshmf.data import SparseRatings, Triplets, build_indices

ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


def make_ratings(rows, cols, vals, M=None, N=None) -> SparseRatings:
    t = Triplets(np.asarray(rows, dtype=np.int32),
                 np.asarray(cols, dtype=np.int32),
                 np.asarray(vals, dtype=np.float64))
    return build_indices(t, M=M, N=N)


@pytest.fixture
def balanced_toy():
    """3x3 matrix with mu=3 and all row/column deviations zero.

    Row 0 rates c0=4, c2=2; row 1 rates c0=2, c1=3, c2=4; row 2 rates
    c1=3, c2=3.  Every row mean, column mean and the global mean equal 3.
    """
    return make_ratings([0, 0, 1, 1, 1, 2, 2],
                        [0, 2, 0, 1, 2, 1, 2],
                        [4, 2, 2, 3, 4, 3, 3])


@pytest.fixture
def random_ratings():
    rng = np.random.default_rng(42)
    M, N = 12, 9
    mask = rng.random((M, N)) < 0.5
    rows, cols = np.nonzero(mask)
    vals = rng.integers(1, 6, size=len(rows)).astype(float)
    return make_ratings(rows, cols, vals, M=M, N=N)
