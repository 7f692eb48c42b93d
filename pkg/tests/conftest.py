import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from rigrefine.dataset import LidarSpec, TrajectorySpec, capture, default_rig, generate_trajectory, generate_world

settings.register_profile(
    "default", deadline=None, max_examples=60, suppress_health_check=[HealthCheck.too_slow],
)
settings.register_profile("thorough", deadline=None, max_examples=1000)
settings.load_profile("default")


@pytest.fixture(scope="session")
def world():
    return generate_world(seed=0)


@pytest.fixture(scope="session")
def tiny_scene(world):
    """Four 32 px cameras and a sparse lidar over 1.2 s of driving."""
    rig = default_rig(image_size=32)
    traj = generate_trajectory(TrajectorySpec(duration=1.2), seed=0)
    return capture(world, rig, traj, frame_rate=5.0, lidar_spec=LidarSpec(rings=8, azimuth_steps=90), name="tiny")


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def pytest_terminal_summary(terminalreporter):
    from acceptance_log import RESULTS

    if RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in RESULTS:
            terminalreporter.write_line(line)
