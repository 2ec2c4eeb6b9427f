import math

import numpy as np
import pytest

from rank_odo.pose import EulerPose6D


def random_pose(rng, trans_scale=5.0, max_pitch=1.4):
    return EulerPose6D(
        *rng.uniform(-trans_scale, trans_scale, size=3),
        rng.uniform(-math.pi + 1e-9, math.pi),
        rng.uniform(-max_pitch, max_pitch),
        rng.uniform(-math.pi + 1e-9, math.pi),
    )


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
