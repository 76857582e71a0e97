import math

import numpy as np
import pytest

from geometry.motion import RigidMotion
from geometry.rgbd import CameraIntrinsics, OrientedPointCloud


def random_motion(rng: np.random.Generator, max_translation: float = 1.0) -> RigidMotion:
    axis = rng.normal(size=3)
    return RigidMotion.from_axis_angle(axis, rng.uniform(0.0, math.pi), rng.uniform(-max_translation, max_translation, size=3))


def fibonacci_sphere(count: int, radius: float = 1.0, center=(0.0, 0.0, 0.0)) -> np.ndarray:
    k = np.arange(count) + 0.5
    polar = np.arccos(1 - 2 * k / count)
    azimuth = math.pi * (1 + math.sqrt(5)) * k
    unit = np.column_stack([np.cos(azimuth) * np.sin(polar), np.sin(azimuth) * np.sin(polar), np.cos(polar)])
    return unit * radius + np.asarray(center, dtype=np.float64)


def sphere_cloud(count: int, radius: float, center=(0.0, 0.0, 0.0)) -> OrientedPointCloud:
    points = fibonacci_sphere(count, radius, center)
    normals = (points - np.asarray(center, dtype=np.float64)) / radius
    return OrientedPointCloud(points, normals)


def angle_deg(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    cos = np.sum(a * b, axis=-1) / (np.linalg.norm(a, axis=-1) * np.linalg.norm(b, axis=-1))
    return np.degrees(np.arccos(np.clip(cos, -1.0, 1.0)))


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(1234)


@pytest.fixture
def intrinsics() -> CameraIntrinsics:
    return CameraIntrinsics(300.0, 300.0, 79.5, 59.5, 160, 120)
