import numpy as np
import pytest
from hypothesis import settings

from ctseg import _accel

settings.register_profile("ctseg", deadline=None, max_examples=40)
settings.load_profile("ctseg")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(params=["numba", "numpy"])
def backend(request):
    """Run a test once per kernel backend."""
    previous = _accel.set_numba(request.param == "numba")
    if request.param == "numba" and not _accel.use_numba():
        _accel.set_numba(previous)
        pytest.skip("numba unavailable")
    yield request.param
    _accel.set_numba(previous)


# acceptance criteria report one line each; the lines are repeated at the end
# of the session so they survive output capturing
CRITERIA = []


def pytest_terminal_summary(terminalreporter):
    if CRITERIA:
        terminalreporter.section("acceptance criteria")
        for line in CRITERIA:
            terminalreporter.write_line(line)
