import numpy as np
import pytest

from ensembleiv.data import Samples
from ensembleiv.rng import RngStream


def make_samples(n, p=3, *, labeled=True, seed=0, start=0):
    g = np.random.default_rng(seed)
    V = g.uniform(size=(n, p))
    X = V[:, 0] + g.normal(0, 0.1, n) if labeled else None
    W = g.normal(size=(n, 2))
    Y = 1 + 0.5 * (X if labeled else V[:, 0]) + W @ [2.0, 1.0] + g.normal(size=n)
    return Samples(V=V, Y=Y, W=W, X=X, ids=np.arange(start, start + n))


@pytest.fixture
def rng():
    return RngStream(12345)


def pytest_terminal_summary(terminalreporter):
    try:
        from test_acceptance import LINES
    except ImportError:
        return
    if LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(LINES, key=lambda s: int(s.split("criterion")[1].split(":")[0])):
            terminalreporter.write_line(line)
