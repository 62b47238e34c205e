import sys

import numpy as np
import pytest

from vidiff import models


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


def central_grad(fn, z, h=1e-4):
    z = np.asarray(z, dtype=float)
    g = np.empty_like(z)
    for i in range(z.size):
        e = np.zeros_like(z)
        e[i] = h
        g[i] = (fn(z + e) - fn(z - e)) / (2 * h)
    return g


def random_ising(d, norm, seed):
    return models.IsingModel(models.random_coupling(d, norm, seed))


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    lines = getattr(mod, "RESULT_LINES", [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines):
            terminalreporter.write_line(line)
