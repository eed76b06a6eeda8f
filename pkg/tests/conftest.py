import numpy as np
import pytest

from tcssa.numerics import RngState, gaussian_sample
from tcssa.params import init_params


@pytest.fixture
def rng():
    return RngState(1234)


def random_instance(seed, b=2, n=64, d=8, k=4, c=3, **kw):
    rng = RngState(seed)
    params = init_params(rng, d, k, c, **kw)
    batch = [gaussian_sample(rng, (n, d)) for _ in range(b)]
    labels = rng.generator.integers(0, c, size=b)
    return params, batch, labels


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
