import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from hogformer import tensor as T

settings.register_profile(
    "hogformer",
    max_examples=100,
    deadline=None,
    suppress_health_check=[HealthCheck.too_slow, HealthCheck.data_too_large],
)
settings.load_profile("hogformer")

# Lines appended by tests/test_acceptance.py, echoed after the run so they
# survive pytest's output capture.
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def f64():
    with T.default_dtype(np.float64):
        yield
