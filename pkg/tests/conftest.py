import numpy as np
import pytest

from bpmre.cli import load_fixture
from bpmre.envmodel import EnvironmentModel, GeometricLaw, TruncatedPoissonLaw

FIXTURE_NAMES = ("model_a", "model_b", "model_c", "model_d")

# filled by tests/test_acceptance.py; one line per criterion
ACCEPTANCE = {}


@pytest.fixture(scope="session")
def fixtures():
    return {name: load_fixture(name) for name in FIXTURE_NAMES}


@pytest.fixture(scope="session")
def model_a():
    return load_fixture("model_a")


@pytest.fixture(scope="session")
def model_b():
    return load_fixture("model_b")


@pytest.fixture(scope="session")
def model_d():
    return load_fixture("model_d")


@pytest.fixture(scope="session")
def two_state():
    P = np.array([[0.3, 0.7], [0.4, 0.6]])
    laws = (GeometricLaw.from_mean(1.4), GeometricLaw.from_mean(0.5))
    return EnvironmentModel(("hi", "lo"), P, laws)


@pytest.fixture(scope="session")
def poisson_model():
    P = np.array([[0.5, 0.5], [0.2, 0.8]])
    laws = (TruncatedPoissonLaw(1.3, 12), TruncatedPoissonLaw(0.6, 10))
    return EnvironmentModel(("x", "y"), P, laws)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[k]
        terminalreporter.write_line(f"criterion {k:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
