import numpy as np
import pytest

from diracsc import FieldConfig, ParticleParams


@pytest.fixture
def unit():
    return ParticleParams(m=1.0, e=1.0, c=1.0, hbar=0.05)


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


@pytest.fixture
def quartic():
    return FieldConfig.quartic_coupled(g=1.0, confinement=0.05)


ACCEPTANCE: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE:
            terminalreporter.write_line(line)
