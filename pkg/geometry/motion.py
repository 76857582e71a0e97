"""
Rigid motions in SE(3).

A RigidMotion g maps x -> R x + t. Composition follows function composition:
``a.compose(b)`` applies b first, then a.
"""

from dataclasses import dataclass

import numpy as np

ORTHONORMAL_TOL = 1e-9


def _frozen(array: np.ndarray) -> np.ndarray:
    array = np.array(array, dtype=np.float64, copy=True)
    array.setflags(write=False)
    return array


def nearest_rotation(matrix: np.ndarray) -> np.ndarray:
    """Project a 3x3 matrix onto SO(3) in the Frobenius sense."""
    u, _, vt = np.linalg.svd(np.asarray(matrix, dtype=np.float64))
    d = np.sign(np.linalg.det(u @ vt)) or 1.0
    return u @ np.diag([1.0, 1.0, d]) @ vt


@dataclass(frozen=True)
class RigidMotion:
    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        rotation = np.asarray(self.rotation, dtype=np.float64)
        translation = np.asarray(self.translation, dtype=np.float64).reshape(-1)
        if rotation.shape != (3, 3) or translation.shape != (3,):
            raise ValueError(f"RigidMotion expects a 3x3 rotation and a 3-vector, got {rotation.shape} and {translation.shape}")
        if not (np.all(np.isfinite(rotation)) and np.all(np.isfinite(translation))):
            raise ValueError("RigidMotion entries must be finite")
        if np.linalg.norm(rotation.T @ rotation - np.eye(3)) > ORTHONORMAL_TOL or abs(np.linalg.det(rotation) - 1.0) > ORTHONORMAL_TOL:
            raise ValueError("RigidMotion rotation is not a proper rotation matrix")
        object.__setattr__(self, "rotation", _frozen(rotation))
        object.__setattr__(self, "translation", _frozen(translation))

    @classmethod
    def identity(cls) -> "RigidMotion":
        return cls(np.eye(3), np.zeros(3))

    @classmethod
    def from_translation(cls, translation) -> "RigidMotion":
        return cls(np.eye(3), translation)

    @classmethod
    def from_axis_angle(cls, axis, angle: float, translation=(0.0, 0.0, 0.0)) -> "RigidMotion":
        """Rotation by ``angle`` radians about ``axis`` (Rodrigues), then translation."""
        axis = np.asarray(axis, dtype=np.float64)
        norm = np.linalg.norm(axis)
        if norm == 0.0:
            raise ValueError("rotation axis must be non-zero")
        k = axis / norm
        kx = np.array([[0.0, -k[2], k[1]], [k[2], 0.0, -k[0]], [-k[1], k[0], 0.0]])
        rotation = np.eye(3) + np.sin(angle) * kx + (1.0 - np.cos(angle)) * (kx @ kx)
        return cls(nearest_rotation(rotation), translation)

    @classmethod
    def from_matrix(cls, matrix, orthonormalize: bool = False) -> "RigidMotion":
        """Build from a 3x4 [R | t] or 4x4 homogeneous matrix."""
        matrix = np.asarray(matrix, dtype=np.float64)
        if matrix.shape not in ((3, 4), (4, 4)):
            raise ValueError(f"expected a 3x4 or 4x4 matrix, got {matrix.shape}")
        rotation = matrix[:3, :3]
        if orthonormalize:
            rotation = nearest_rotation(rotation)
        return cls(rotation, matrix[:3, 3])

    def as_matrix(self) -> np.ndarray:
        """4x4 homogeneous matrix."""
        out = np.eye(4)
        out[:3, :3] = self.rotation
        out[:3, 3] = self.translation
        return out

    def compose(self, other: "RigidMotion") -> "RigidMotion":
        """Return self o other, i.e. x -> self(other(x))."""
        rotation = self.rotation @ other.rotation
        return RigidMotion(rotation, self.rotation @ other.translation + self.translation)

    def inverse(self) -> "RigidMotion":
        rt = self.rotation.T
        return RigidMotion(rt, -(rt @ self.translation))

    def apply(self, points: np.ndarray) -> np.ndarray:
        """Map (N,3) or (3,) points."""
        points = np.asarray(points, dtype=np.float64)
        return points @ self.rotation.T + self.translation

    def apply_normals(self, normals: np.ndarray) -> np.ndarray:
        """Rotate (N,3) or (3,) direction vectors."""
        return np.asarray(normals, dtype=np.float64) @ self.rotation.T

    def rotation_angle_to(self, other: "RigidMotion") -> float:
        """Geodesic angle in degrees between the two rotations."""
        relative = self.rotation.T @ other.rotation
        cos_angle = np.clip((np.trace(relative) - 1.0) / 2.0, -1.0, 1.0)
        return float(np.degrees(np.arccos(cos_angle)))

    def translation_distance_to(self, other: "RigidMotion") -> float:
        return float(np.linalg.norm(self.translation - other.translation))
