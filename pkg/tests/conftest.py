import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from planloc.floorplan import FloorPlan, make_floorplan

settings.register_profile("planloc", deadline=None, max_examples=60,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("planloc")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def box_plan():
    """Empty 20 x 10 m room at 8 px/m."""
    return make_floorplan([], (20.0, 10.0), 8)


@pytest.fixture
def random_raster_plan():
    """10 x 10 m plan at 64 px/m whose world origin sits at pixel (128, 128)."""
    r = np.random.default_rng(7).random((640, 640))
    return FloorPlan(raster=r, pixels_per_meter=64.0, origin_px=(128.0, 128.0), walls=np.zeros((0, 4)),
                     extent_m=(10.0, 10.0))


@pytest.fixture(scope="session")
def tiny_bundle(tmp_path_factory):
    """Report bundle of the tiny experiment, shared by the evaluation and CLI tests."""
    from planloc.evaluation import run_experiment
    from helpers import tiny_experiment
    out = tmp_path_factory.mktemp("bundle")
    summary = run_experiment(tiny_experiment(), out)
    return out, summary


def pytest_terminal_summary(terminalreporter):
    from helpers import ACCEPTANCE_LINES
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for _, line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
