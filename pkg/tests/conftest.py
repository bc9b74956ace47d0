import numpy as np
import pytest

ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


@pytest.fixture
def rng():
    return np.random.default_rng(20240601)


def three_group_data(seed, n_per=20, p=4, sep=3.0):
    """Three shifted normal clouds with labels equal to the cloud index."""
    from enetlts.data import Dataset

    r = np.random.default_rng(seed)
    M = np.zeros((3, p))
    M[0, 0] = sep
    M[1, 1] = sep
    M[2, :2] = -sep
    labels = np.repeat([1, 2, 3], n_per)
    X = M[labels - 1] + r.standard_normal((3 * n_per, p))
    return Dataset(X=X, labels=labels, K=3), M


def planted_data(seed, n_per=20, p=4, offset=20.0):
    """Three clouds, two rows per group moved next to another group and pushed out by ``offset``."""
    from enetlts.data import Dataset

    data, M = three_group_data(seed, n_per, p)
    X = np.array(data.X)
    out = []
    for l in range(3):
        g = data.group_indexes[l][:2]
        target = M[(l + 1) % 3]
        X[g] = target + offset * np.sign(target)
        out.extend(g.tolist())
    return Dataset(X=X, labels=data.labels, K=3), np.array(out)
