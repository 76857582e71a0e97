import math

import numpy as np
import pytest

from geometry.motion import RigidMotion, nearest_rotation
from tests.conftest import random_motion


def test_identity_leaves_points_unchanged(rng):
    points = rng.normal(size=(5, 3))
    assert np.array_equal(RigidMotion.identity().apply(points), points)


def test_compose_applies_right_operand_first(rng):
    a, b = random_motion(rng), random_motion(rng)
    points = rng.normal(size=(7, 3))
    assert np.allclose(a.compose(b).apply(points), a.apply(b.apply(points)), atol=1e-12)


def test_inverse_round_trip(rng):
    motion = random_motion(rng)
    points = rng.normal(size=(7, 3))
    assert np.allclose(motion.inverse().apply(motion.apply(points)), points, atol=1e-12)


def test_axis_angle_quarter_turn():
    motion = RigidMotion.from_axis_angle([0, 0, 1], math.pi / 2)
    assert np.allclose(motion.apply([1.0, 0.0, 0.0]), [0.0, 1.0, 0.0], atol=1e-12)


def test_normals_ignore_translation():
    motion = RigidMotion.from_translation([1.0, 2.0, 3.0])
    assert np.array_equal(motion.apply_normals([0.0, 0.0, 1.0]), [0.0, 0.0, 1.0])


def test_rejects_reflection():
    with pytest.raises(ValueError):
        RigidMotion(np.diag([1.0, 1.0, -1.0]), np.zeros(3))


def test_matrix_round_trip(rng):
    motion = random_motion(rng)
    again = RigidMotion.from_matrix(motion.as_matrix())
    assert np.allclose(again.rotation, motion.rotation) and np.allclose(again.translation, motion.translation)


def test_nearest_rotation_is_proper(rng):
    rotation = nearest_rotation(rng.normal(size=(3, 3)))
    assert np.allclose(rotation.T @ rotation, np.eye(3), atol=1e-12)
    assert np.linalg.det(rotation) == pytest.approx(1.0)


def test_rotation_angle_between_motions():
    a = RigidMotion.identity()
    b = RigidMotion.from_axis_angle([1, 0, 0], math.radians(30))
    assert a.rotation_angle_to(b) == pytest.approx(30.0)
