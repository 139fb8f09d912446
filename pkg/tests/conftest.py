import numpy as np
import pytest

from edgeodom.geometry import CameraIntrinsics


@pytest.fixture
def intr():
    return CameraIntrinsics(525.0, 525.0, 319.5, 239.5, 640, 480)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
