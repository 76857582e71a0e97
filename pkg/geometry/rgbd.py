"""
Depth images, pinhole intrinsics and oriented point clouds.

Converts calibrated depth images into camera-frame points with normals. The
normal of the depth surface z(u, v) follows from the chain rule: the in-plane
slopes are (f_u / z) dz/du and (f_v / z) dz/dv, and the pinhole completion adds
the perspective term to the third component. Normals are emitted facing the
camera.
"""

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from utils.errors import EmptyCloudError, GradientUndefinedError, InvalidDepthError, InvalidIntrinsicsError
from utils.logger import get_logger

logger = get_logger(__name__)

UNIT_NORM_TOL = 1e-6
DEFAULT_JUMP_THRESHOLD = 0.05


def _readonly(array: np.ndarray, dtype=np.float64) -> np.ndarray:
    array = np.array(array, dtype=dtype, copy=True)
    array.setflags(write=False)
    return array


@dataclass(frozen=True)
class CameraIntrinsics:
    fu: float
    fv: float
    cu: float
    cv: float
    width: int | None = None
    height: int | None = None

    def __post_init__(self):
        if not (np.isfinite(self.fu) and np.isfinite(self.fv) and self.fu > 0 and self.fv > 0):
            raise InvalidIntrinsicsError(f"focal lengths must be positive, got fu={self.fu}, fv={self.fv}")
        if not (np.isfinite(self.cu) and np.isfinite(self.cv)):
            raise InvalidIntrinsicsError("principal point must be finite")

    def project(self, points: np.ndarray) -> np.ndarray:
        """Map camera-frame (N,3) points to (N,3) rows of (u, v, z)."""
        points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
        z = points[:, 2]
        u = points[:, 0] * self.fu / z + self.cu
        v = points[:, 1] * self.fv / z + self.cv
        return np.column_stack([u, v, z])

    def backproject(self, u: np.ndarray, v: np.ndarray, z: np.ndarray) -> np.ndarray:
        """Vectorized pinhole inversion; inputs are assumed valid."""
        u = np.asarray(u, dtype=np.float64)
        v = np.asarray(v, dtype=np.float64)
        z = np.asarray(z, dtype=np.float64)
        return np.stack([(u - self.cu) * z / self.fu, (v - self.cv) * z / self.fv, z], axis=-1)


@dataclass(frozen=True)
class DepthImage:
    """Metric depth, row-major (height, width), with a validity mask."""

    data: np.ndarray
    valid: np.ndarray

    def __post_init__(self):
        data = np.asarray(self.data, dtype=np.float64)
        valid = np.asarray(self.valid, dtype=bool)
        if data.ndim != 2 or valid.shape != data.shape:
            raise InvalidDepthError(f"depth data {data.shape} and mask {valid.shape} must be equal 2-d shapes")
        good = np.isfinite(data) & (data > 0)
        if np.any(valid & ~good):
            raise InvalidDepthError("valid pixels must hold strictly positive, finite depth")
        object.__setattr__(self, "data", _readonly(np.where(valid, data, 0.0)))
        object.__setattr__(self, "valid", _readonly(valid, dtype=bool))

    @classmethod
    def from_array(cls, depth: np.ndarray) -> "DepthImage":
        """Treat non-positive or non-finite entries as missing returns."""
        depth = np.asarray(depth, dtype=np.float64)
        with np.errstate(invalid="ignore"):
            valid = np.isfinite(depth) & (depth > 0)
        return cls(np.where(valid, depth, 0.0), valid)

    @property
    def height(self) -> int:
        return int(self.data.shape[0])

    @property
    def width(self) -> int:
        return int(self.data.shape[1])

    def valid_count(self) -> int:
        return int(np.count_nonzero(self.valid))


@dataclass(frozen=True)
class OrientedPointCloud:
    points: np.ndarray
    normals: np.ndarray
    colors: np.ndarray | None = None

    def __post_init__(self):
        points = np.asarray(self.points, dtype=np.float64).reshape(-1, 3)
        normals = np.asarray(self.normals, dtype=np.float64).reshape(-1, 3)
        if len(points) != len(normals):
            raise ValueError(f"points ({len(points)}) and normals ({len(normals)}) differ in length")
        if len(normals) and np.max(np.abs(np.linalg.norm(normals, axis=1) - 1.0)) > UNIT_NORM_TOL:
            raise ValueError("normals must have unit length")
        object.__setattr__(self, "points", _readonly(points))
        object.__setattr__(self, "normals", _readonly(normals))
        if self.colors is not None:
            colors = np.asarray(self.colors).reshape(-1, 3)
            if len(colors) != len(points):
                raise ValueError("colors must match points in length")
            object.__setattr__(self, "colors", _readonly(colors, dtype=np.uint8))

    def __len__(self) -> int:
        return int(self.points.shape[0])

    @classmethod
    def empty(cls) -> "OrientedPointCloud":
        return cls(np.zeros((0, 3)), np.zeros((0, 3)))

    def transformed(self, motion) -> "OrientedPointCloud":
        return OrientedPointCloud(motion.apply(self.points), motion.apply_normals(self.normals), self.colors)

    def subset(self, mask: np.ndarray) -> "OrientedPointCloud":
        colors = None if self.colors is None else self.colors[mask]
        return OrientedPointCloud(self.points[mask], self.normals[mask], colors)

    def bounds(self) -> tuple[np.ndarray, np.ndarray]:
        if len(self) == 0:
            raise EmptyCloudError("empty cloud has no bounds")
        return self.points.min(axis=0), self.points.max(axis=0)

    @staticmethod
    def concatenate(clouds: list["OrientedPointCloud"]) -> "OrientedPointCloud":
        if not clouds:
            return OrientedPointCloud.empty()
        with_colors = all(c.colors is not None for c in clouds)
        colors = np.concatenate([c.colors for c in clouds]) if with_colors else None
        return OrientedPointCloud(np.concatenate([c.points for c in clouds]), np.concatenate([c.normals for c in clouds]), colors)


def backproject_pixel(u: float, v: float, z: float, intrinsics: CameraIntrinsics) -> np.ndarray:
    """
    Backproject one pixel with metric depth into camera coordinates.

    Raises:
        InvalidDepthError: If z is not strictly positive and finite
    """
    if not (np.isfinite(z) and z > 0):
        raise InvalidDepthError(f"depth must be positive and finite, got {z}")
    return intrinsics.backproject(u, v, z)


def project_points(points: np.ndarray, intrinsics: CameraIntrinsics) -> np.ndarray:
    """Inverse of backprojection: camera-frame points to (u, v, z) rows."""
    return intrinsics.project(points)


def smooth_depth(depth: DepthImage, sigma: float) -> DepthImage:
    """Mask-aware Gaussian smoothing (normalized convolution); invalid pixels stay invalid."""
    if sigma <= 0:
        return depth
    mask = depth.valid.astype(np.float64)
    weight = ndimage.gaussian_filter(mask, sigma, mode="constant")
    blurred = ndimage.gaussian_filter(depth.data * mask, sigma, mode="constant")
    with np.errstate(invalid="ignore", divide="ignore"):
        data = np.where(depth.valid & (weight > 0), blurred / weight, 0.0)
    return DepthImage(data, depth.valid & (data > 0))


def _axis_gradient(z: np.ndarray, valid: np.ndarray, axis: int) -> tuple[np.ndarray, np.ndarray]:
    """Central differences where both neighbors are valid, one-sided otherwise."""
    z_next = np.zeros_like(z)
    z_prev = np.zeros_like(z)
    has_next = np.zeros_like(valid)
    has_prev = np.zeros_like(valid)
    if axis == 1:
        z_next[:, :-1], has_next[:, :-1] = z[:, 1:], valid[:, 1:]
        z_prev[:, 1:], has_prev[:, 1:] = z[:, :-1], valid[:, :-1]
    else:
        z_next[:-1, :], has_next[:-1, :] = z[1:, :], valid[1:, :]
        z_prev[1:, :], has_prev[1:, :] = z[:-1, :], valid[:-1, :]
    central = 0.5 * (z_next - z_prev)
    forward = z_next - z
    backward = z - z_prev
    grad = np.where(has_next & has_prev, central, np.where(has_next, forward, backward))
    defined = valid & (has_next | has_prev)
    return np.where(defined, grad, 0.0), defined


def depth_gradients(depth: DepthImage) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """
    Finite-difference gradient of z(u, v) over the whole image.

    Returns:
        Tuple of (dz/du, dz/dv, defined mask); a pixel is defined when it is valid
        and has at least one valid neighbor along each axis
    """
    du, defined_u = _axis_gradient(depth.data, depth.valid, axis=1)
    dv, defined_v = _axis_gradient(depth.data, depth.valid, axis=0)
    return du, dv, defined_u & defined_v


def depth_gradient(depth: DepthImage, u: int, v: int) -> tuple[float, float]:
    """
    Gradient (dz/du, dz/dv) at one pixel.

    Raises:
        GradientUndefinedError: If the pixel is invalid or isolated along an axis
    """
    if not (0 <= u < depth.width and 0 <= v < depth.height):
        raise GradientUndefinedError(f"pixel ({u}, {v}) outside the {depth.width}x{depth.height} image")
    du, dv, defined = depth_gradients(depth)
    if not defined[v, u]:
        raise GradientUndefinedError(f"gradient undefined at pixel ({u}, {v})")
    return float(du[v, u]), float(dv[v, u])


def estimate_normals(
    depth: DepthImage,
    intrinsics: CameraIntrinsics,
    jump_threshold: float = DEFAULT_JUMP_THRESHOLD,
    perspective_correction: bool = True,
    smoothing: float = 0.0,
    image: np.ndarray | None = None,
) -> OrientedPointCloud:
    """
    Backproject every pixel with a defined gradient and attach its unit normal.

    Args:
        depth: Depth image in meters
        intrinsics: Pinhole intrinsics
        jump_threshold: Reject pixels whose |dz/du| or |dz/dv| exceeds this (m/pixel)
        perspective_correction: Use the pinhole-complete third normal component
        smoothing: Optional Gaussian pre-smoothing of the depth, in pixels
        image: Optional grayscale or RGB image registered to the depth, used as point colors

    Returns:
        Camera-frame OrientedPointCloud in row-major pixel order

    Raises:
        EmptyCloudError: If no pixel qualifies
    """
    source = smooth_depth(depth, smoothing)
    du, dv, defined = depth_gradients(source)
    accepted = defined & (np.abs(du) <= jump_threshold) & (np.abs(dv) <= jump_threshold)
    rows, cols = np.nonzero(accepted)
    if rows.size == 0:
        raise EmptyCloudError("no pixel with a defined depth gradient")

    z = source.data[rows, cols]
    u = cols.astype(np.float64)
    v = rows.astype(np.float64)
    z_u = du[rows, cols]
    z_v = dv[rows, cols]
    points = intrinsics.backproject(u, v, z)

    slope_x = intrinsics.fu / z * z_u
    slope_y = intrinsics.fv / z * z_v
    if perspective_correction:
        third = 1.0 + ((u - intrinsics.cu) * z_u + (v - intrinsics.cv) * z_v) / z
    else:
        third = np.ones_like(z)
    # (-z_x, -z_y, 1) points away from the camera; negate to face it
    normals = np.column_stack([slope_x, slope_y, -third])
    norms = np.linalg.norm(normals, axis=1)
    keep = norms > 0
    normals = normals[keep] / norms[keep, None]
    points = points[keep]
    if not perspective_correction:
        away = np.einsum("ij,ij->i", normals, points) > 0
        normals[away] *= -1.0

    colors = None
    if image is not None:
        colors = _colors_from_image(np.asarray(image), rows[keep], cols[keep])

    logger.debug(f"estimate_normals: {len(points)} of {depth.valid_count()} valid pixels emitted")
    return OrientedPointCloud(points, normals, colors)


def _colors_from_image(image: np.ndarray, rows: np.ndarray, cols: np.ndarray) -> np.ndarray:
    samples = image[rows, cols]
    if np.issubdtype(samples.dtype, np.floating):
        samples = np.clip(np.round(samples * 255.0), 0, 255)
    samples = samples.astype(np.uint8)
    if samples.ndim == 1:
        samples = np.repeat(samples[:, None], 3, axis=1)
    return samples[:, :3]
