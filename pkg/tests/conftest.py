import numpy as np
import pytest
from hypothesis import settings, strategies as st

from stif.geometry import Box3D

settings.register_profile("default", max_examples=60, deadline=None)
settings.load_profile("default")

finite = st.floats(-50.0, 50.0, allow_nan=False, allow_infinity=False)
extent = st.floats(0.1, 10.0, allow_nan=False, allow_infinity=False)
angle = st.floats(-10.0, 10.0, allow_nan=False, allow_infinity=False)


@st.composite
def boxes3d(draw):
    return Box3D(draw(finite), draw(finite), draw(finite), draw(extent), draw(extent), draw(extent),
                 draw(angle))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
