import sys

import numpy as np
import pytest

from risisac.channel import CascadedPair, Scenario


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def random_complex(rng, *shape):
    return rng.standard_normal(shape) + 1j * rng.standard_normal(shape)


def random_pair(rng, N, M):
    return CascadedPair(phi_t=random_complex(rng, N, M), phi_c=random_complex(rng, N, M))


@pytest.fixture
def default_scn():
    return Scenario.from_db(M=4, N=16)


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    if mod is None or not mod.RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(mod.RESULTS):
        terminalreporter.write_line(mod.RESULTS[n])
