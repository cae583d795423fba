from __future__ import annotations

import numpy as np
import pytest

from warpflow.geometry import CameraIntrinsics, CameraPose, quat_normalize


def random_unit_quat(rng: np.random.Generator) -> np.ndarray:
    return quat_normalize(rng.normal(size=4))


def random_pose(rng: np.random.Generator, t_scale: float = 1.0) -> CameraPose:
    return CameraPose(random_unit_quat(rng), rng.normal(scale=t_scale, size=3))


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(7)


@pytest.fixture
def small_K() -> CameraIntrinsics:
    return CameraIntrinsics(fx=16.0, fy=16.0, cx=8.0, cy=8.0, width=16, height=16)
