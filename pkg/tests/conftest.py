import numpy as np
import pytest
from hypothesis import strategies as st

from bivo.geometry import Pose, so3_exp


def unit_vector(rng):
    v = rng.normal(size=3)
    n = np.linalg.norm(v)
    while n < 1e-8:
        v = rng.normal(size=3)
        n = np.linalg.norm(v)
    return v / n


def random_rotation(rng, max_angle=np.pi - 1e-3):
    return so3_exp(unit_vector(rng) * rng.uniform(0.0, max_angle))


def random_pose(rng, max_angle=np.pi - 1e-3, trans_scale=5.0):
    return Pose(random_rotation(rng, max_angle), rng.uniform(-trans_scale, trans_scale, 3))


@st.composite
def axis_angles(draw, max_angle=np.pi - 1e-3):
    direction = np.array(
        [
            draw(st.floats(-1.0, 1.0, allow_nan=False)),
            draw(st.floats(-1.0, 1.0, allow_nan=False)),
            draw(st.floats(-1.0, 1.0, allow_nan=False)),
        ]
    )
    norm = np.linalg.norm(direction)
    if norm < 1e-6:
        direction = np.array([1.0, 0.0, 0.0])
        norm = 1.0
    angle = draw(st.floats(0.0, max_angle, allow_nan=False))
    return direction / norm * angle


@st.composite
def rotations(draw, max_angle=np.pi - 1e-3):
    return so3_exp(draw(axis_angles(max_angle=max_angle)))


@st.composite
def poses(draw, max_angle=np.pi - 1e-3, trans_scale=5.0):
    t = np.array(
        [
            draw(st.floats(-trans_scale, trans_scale, allow_nan=False)),
            draw(st.floats(-trans_scale, trans_scale, allow_nan=False)),
            draw(st.floats(-trans_scale, trans_scale, allow_nan=False)),
        ]
    )
    return Pose(draw(rotations(max_angle=max_angle)), t)


@pytest.fixture
def rng():
    return np.random.default_rng(0)
