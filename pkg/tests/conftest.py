import os

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from shapelab.environment import Box, EnvironmentSpec, PoissonCloud

settings.register_profile("ci", max_examples=40, deadline=None,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "ci"))

ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


def make_cloud(points, d=1, box=None, spec=None):
    """Hand-placed cloud; ``points`` rows are (t, x..., amp, rt, rx)."""
    pts = np.asarray(points, dtype=float).reshape(-1, d + 4)
    spec = spec or EnvironmentSpec(d=d)
    box = box or Box(-10.0, 10.0, (-10.0,) * d, (10.0,) * d)
    return PoissonCloud(pts[:, 0], pts[:, 1:d + 1], pts[:, d + 1], pts[:, d + 2], pts[:, d + 3], box, spec)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
