import numpy as np
import pytest

from dtsdf.camera import Intrinsics


@pytest.fixture
def tum_intrinsics():
    """Full-resolution TUM-style pinhole model."""
    return Intrinsics(fx=525.0, fy=525.0, cx=319.5, cy=239.5, width=640, height=480)


@pytest.fixture
def small_intrinsics():
    """Low-resolution model used by the desk-scale experiments."""
    return Intrinsics(fx=130.0, fy=130.0, cx=79.5, cy=59.5, width=160, height=120)


@pytest.fixture
def tiny_intrinsics():
    """Very small model for brute-force oracle comparisons."""
    return Intrinsics(fx=65.0, fy=65.0, cx=39.5, cy=29.5, width=80, height=60)


@pytest.fixture
def rng():
    return np.random.default_rng(7)
