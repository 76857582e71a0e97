"""
Synthetic ground truth: analytic primitives rendered to depth from known poses.

Rays are cast in closed form against spheres, boxes, capped cylinders and an
optional ground plane. Camera rays are d = R ((u - c_u)/f_u, (v - c_v)/f_v, 1), so the
ray parameter of a hit is its camera-frame depth.
"""

import math
from dataclasses import dataclass, field

import numpy as np

from geometry.mesh import TriangleMesh
from geometry.motion import RigidMotion
from geometry.rgbd import CameraIntrinsics, DepthImage
from geometry.registration import Correspondence
from geometry.volume import Plane
from utils.logger import get_logger

logger = get_logger(__name__)

RAY_EPS = 1e-9
PRIMITIVE_KINDS = ("sphere", "box", "cylinder")
TEXTURES = ("noise", "checker", "none")


@dataclass(frozen=True)
class Primitive:
    """
    Analytic solid in its own frame, placed in the world by ``pose``.

    Parameters per kind: sphere (radius,), box (width, depth, height) centered on the
    origin, cylinder (radius, height) along the local z axis and centered on the origin.
    """

    kind: str
    params: tuple[float, ...]
    pose: RigidMotion = field(default_factory=RigidMotion.identity)

    def __post_init__(self):
        expected = {"sphere": 1, "box": 3, "cylinder": 2}
        if self.kind not in expected:
            raise ValueError(f"unknown primitive kind: {self.kind}")
        params = tuple(float(p) for p in self.params)
        if len(params) != expected[self.kind]:
            raise ValueError(f"{self.kind} takes {expected[self.kind]} parameters, got {len(params)}")
        if not all(p > 0 and math.isfinite(p) for p in params):
            raise ValueError(f"{self.kind} size parameters must be positive, got {params}")
        object.__setattr__(self, "params", params)

    def intersect(self, origin: np.ndarray, directions: np.ndarray) -> np.ndarray:
        """Nearest positive ray parameter per direction; inf on a miss."""
        inverse = self.pose.inverse()
        o = inverse.apply(origin)
        d = inverse.apply_normals(directions)
        if self.kind == "sphere":
            return _intersect_sphere(o, d, self.params[0])
        if self.kind == "box":
            return _intersect_box(o, d, np.asarray(self.params))
        return _intersect_cylinder(o, d, *self.params)

    def surface_distance(self, points: np.ndarray) -> np.ndarray:
        """Unsigned distance from world points to the primitive's surface."""
        local = self.pose.inverse().apply(points)
        if self.kind == "sphere":
            return np.abs(np.linalg.norm(local, axis=1) - self.params[0])
        if self.kind == "box":
            q = np.abs(local) - np.asarray(self.params) / 2
            outside = np.linalg.norm(np.maximum(q, 0.0), axis=1)
            inside = np.minimum(q.max(axis=1), 0.0)
            return np.abs(outside + inside)
        radius, height = self.params
        q = np.column_stack([np.linalg.norm(local[:, :2], axis=1) - radius, np.abs(local[:, 2]) - height / 2])
        return np.abs(np.linalg.norm(np.maximum(q, 0.0), axis=1) + np.minimum(q.max(axis=1), 0.0))


def _smaller_positive_root(a: np.ndarray, b: np.ndarray, c: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    disc = b * b - 4 * a * c
    hit = (disc >= 0) & (a > 0)
    root = np.sqrt(np.where(hit, disc, 0.0))
    safe_a = np.where(a > 0, a, 1.0)
    near = (-b - root) / (2 * safe_a)
    far = (-b + root) / (2 * safe_a)
    return np.where(hit, near, np.inf), np.where(hit, far, np.inf)


def _intersect_sphere(o: np.ndarray, d: np.ndarray, radius: float) -> np.ndarray:
    a = np.einsum("ij,ij->i", d, d)
    b = 2 * d @ o
    c = np.full_like(a, o @ o - radius**2)
    near, far = _smaller_positive_root(a, b, c)
    return np.where(near > RAY_EPS, near, np.where(far > RAY_EPS, far, np.inf))


def _intersect_box(o: np.ndarray, d: np.ndarray, extents: np.ndarray) -> np.ndarray:
    half = extents / 2
    with np.errstate(divide="ignore", invalid="ignore"):
        t1 = (-half - o) / d
        t2 = (half - o) / d
    parallel = d == 0
    inside_slab = np.abs(o) <= half
    t1 = np.where(parallel, np.where(inside_slab, -np.inf, np.inf), t1)
    t2 = np.where(parallel, np.where(inside_slab, np.inf, -np.inf), t2)
    t_near = np.minimum(t1, t2).max(axis=1)
    t_far = np.maximum(t1, t2).min(axis=1)
    hit = (t_far >= t_near) & (t_far > RAY_EPS)
    return np.where(hit & (t_near > RAY_EPS), t_near, np.where(hit, t_far, np.inf))


def _intersect_cylinder(o: np.ndarray, d: np.ndarray, radius: float, height: float) -> np.ndarray:
    a = d[:, 0] ** 2 + d[:, 1] ** 2
    b = 2 * (o[0] * d[:, 0] + o[1] * d[:, 1])
    c = np.full_like(a, o[0] ** 2 + o[1] ** 2 - radius**2)
    candidates = []
    for t in _smaller_positive_root(a, b, c):
        z = o[2] + t * d[:, 2]
        candidates.append(np.where((t > RAY_EPS) & (np.abs(np.where(np.isfinite(z), z, np.inf)) <= height / 2), t, np.inf))
    for cap in (-height / 2, height / 2):
        with np.errstate(divide="ignore", invalid="ignore"):
            t = (cap - o[2]) / d[:, 2]
        t = np.where(np.isfinite(t), t, np.inf)
        x = o[0] + t * d[:, 0]
        y = o[1] + t * d[:, 1]
        with np.errstate(invalid="ignore"):
            on_cap = (t > RAY_EPS) & (x**2 + y**2 <= radius**2)
        candidates.append(np.where(on_cap, t, np.inf))
    return np.min(np.stack(candidates), axis=0)


def _intersect_plane(origin: np.ndarray, directions: np.ndarray, plane: Plane) -> np.ndarray:
    denom = directions @ plane.normal
    with np.errstate(divide="ignore", invalid="ignore"):
        t = (plane.offset - plane.normal @ origin) / denom
    return np.where(np.isfinite(t) & (t > RAY_EPS), t, np.inf)


def analytic_volume(primitive: Primitive) -> float:
    """Closed-form volume in m^3."""
    if primitive.kind == "sphere":
        return 4.0 / 3.0 * math.pi * primitive.params[0] ** 3
    if primitive.kind == "box":
        w, d, h = primitive.params
        return w * d * h
    radius, height = primitive.params
    return math.pi * radius**2 * height


@dataclass(frozen=True)
class Scene:
    primitives: tuple[Primitive, ...]
    ground_plane: Plane | None = None
    texture: str = "noise"
    texture_scale: float = 0.01
    seed: int = 0

    def __post_init__(self):
        if self.texture not in TEXTURES:
            raise ValueError(f"unknown texture {self.texture}; expected one of {TEXTURES}")
        object.__setattr__(self, "primitives", tuple(self.primitives))
        if self.ground_plane is not None:
            for primitive in self.primitives:
                _check_above_ground(primitive, self.ground_plane)

    def total_volume(self) -> float:
        return math.fsum(analytic_volume(p) for p in self.primitives)


def _check_above_ground(primitive: Primitive, plane: Plane, tol: float = 1e-9) -> None:
    """Reject primitives whose extreme point along -normal lies below the plane."""
    n_local = primitive.pose.rotation.T @ plane.normal
    if primitive.kind == "sphere":
        reach = primitive.params[0]
    elif primitive.kind == "box":
        reach = float(np.abs(n_local) @ (np.asarray(primitive.params) / 2))
    else:
        radius, height = primitive.params
        reach = radius * float(np.linalg.norm(n_local[:2])) + height / 2 * abs(float(n_local[2]))
    lowest = plane.signed_distance(primitive.pose.translation) - reach
    if lowest < -tol:
        raise ValueError(f"{primitive.kind} penetrates the ground plane by {-lowest:.4g} m")


def _mix64(x: np.ndarray) -> np.ndarray:
    """SplitMix64 finalizer on uint64 arrays."""
    x = (x ^ (x >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)
    x = (x ^ (x >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)
    return x ^ (x >> np.uint64(31))


def _lattice_value(cells: np.ndarray, seed: int) -> np.ndarray:
    keys = cells.astype(np.int64).astype(np.uint64)
    with np.errstate(over="ignore"):
        h = _mix64(np.uint64(seed) + np.uint64(0x9E3779B97F4A7C15))
        for axis in range(3):
            h = _mix64(h ^ (keys[..., axis] * np.uint64(0x9E3779B97F4A7C15 + 2 * axis + 1)))
    return (h >> np.uint64(11)).astype(np.float64) / float(1 << 53)


def value_noise(points: np.ndarray, scale: float, seed: int = 0) -> np.ndarray:
    """Two-octave lattice value noise in [0, 1], contrast-stretched around 0.5."""
    points = np.asarray(points, dtype=np.float64)
    total = np.zeros(len(points))
    for octave, weight in ((1.0, 0.65), (2.0, 0.35)):
        local = points / (scale / octave)
        base = np.floor(local)
        frac = local - base
        smooth = frac * frac * (3 - 2 * frac)
        value = np.zeros(len(points))
        for corner in np.ndindex(2, 2, 2):
            offset = np.asarray(corner)
            w = np.prod(np.where(offset == 1, smooth, 1 - smooth), axis=1)
            value += w * _lattice_value(base + offset, seed + int(octave))
        total += weight * value
    return np.clip(0.5 + 2.0 * (total - 0.5), 0.0, 1.0)


def checker(points: np.ndarray, scale: float) -> np.ndarray:
    parity = np.floor(np.asarray(points) / scale).astype(np.int64).sum(axis=1) % 2
    return np.where(parity == 0, 0.1, 0.9)


def shade(scene: Scene, points: np.ndarray) -> np.ndarray:
    if scene.texture == "noise":
        return value_noise(points, scene.texture_scale, scene.seed)
    if scene.texture == "checker":
        return checker(points, scene.texture_scale)
    return np.full(len(points), 0.5)


def camera_rays(intrinsics: CameraIntrinsics, width: int, height: int) -> np.ndarray:
    """Camera-frame directions with unit z, row-major (height * width, 3)."""
    v, u = np.mgrid[0:height, 0:width].astype(np.float64)
    return np.stack([(u - intrinsics.cu) / intrinsics.fu, (v - intrinsics.cv) / intrinsics.fv, np.ones_like(u)], axis=-1).reshape(-1, 3)


def render_depth(scene: Scene, camera_pose: RigidMotion, intrinsics: CameraIntrinsics, size: tuple[int, int]) -> tuple[DepthImage, np.ndarray]:
    """
    Ray-cast the scene from a camera.

    Args:
        scene: Primitives and optional ground plane
        camera_pose: Camera-to-world motion (camera x right, y down, z forward)
        intrinsics: Intrinsics
        size: (width, height) in pixels

    Returns:
        Tuple of (DepthImage in meters with misses invalid, grayscale image in [0, 1])
    """
    width, height = size
    directions = camera_pose.apply_normals(camera_rays(intrinsics, width, height))
    origin = camera_pose.translation
    hits = [p.intersect(origin, directions) for p in scene.primitives]
    if scene.ground_plane is not None:
        hits.append(_intersect_plane(origin, directions, scene.ground_plane))
    t = np.min(np.stack(hits), axis=0) if hits else np.full(len(directions), np.inf)
    valid = np.isfinite(t)

    gray = np.zeros(len(t))
    if np.any(valid):
        gray[valid] = shade(scene, origin + t[valid, None] * directions[valid])
    depth = DepthImage(np.where(valid, t, 0.0).reshape(height, width), valid.reshape(height, width))
    logger.debug(f"render_depth: {int(valid.sum())} of {len(t)} pixels hit")
    return depth, gray.reshape(height, width)


def look_at(eye, target, up=(0.0, 0.0, 1.0)) -> RigidMotion:
    """Camera-to-world motion of a camera at ``eye`` looking at ``target``."""
    eye = np.asarray(eye, dtype=np.float64)
    forward = np.asarray(target, dtype=np.float64) - eye
    forward /= np.linalg.norm(forward)
    up = np.asarray(up, dtype=np.float64)
    right = np.cross(forward, up)
    if np.linalg.norm(right) < 1e-9:
        right = np.cross(forward, [0.0, 1.0, 0.0])
    right /= np.linalg.norm(right)
    down = np.cross(forward, right)
    return RigidMotion(np.column_stack([right, down, forward]), eye)


def camera_ring(count: int, radius: float, elevation_deg: float, target=(0.0, 0.0, 0.0)) -> list[RigidMotion]:
    """``count`` cameras evenly spaced in azimuth, all looking at ``target``."""
    target = np.asarray(target, dtype=np.float64)
    elevation = math.radians(elevation_deg)
    poses = []
    for k in range(count):
        azimuth = 2 * math.pi * k / count
        offset = radius * np.array([math.cos(elevation) * math.cos(azimuth), math.cos(elevation) * math.sin(azimuth), math.sin(elevation)])
        poses.append(look_at(target + offset, target))
    return poses


def _generator(seed: int) -> np.random.Generator:
    """Counter-based generator; draws are keyed by position in the output stream."""
    return np.random.Generator(np.random.Philox(key=seed))


def _chosen(count: int, fraction: float, rng: np.random.Generator) -> np.ndarray:
    if not 0 <= fraction < 1:
        raise ValueError(f"outlier fraction must lie in [0, 1), got {fraction}")
    return np.sort(rng.permutation(count)[: int(round(fraction * count))])


def corrupt_depth(depth: DepthImage, noise_sigma: float, outlier_fraction: float = 0.0, seed: int = 0) -> DepthImage:
    """
    Gaussian noise on every valid pixel plus uniform-depth outliers.

    Noise for pixel k is the k-th draw of the stream, so it does not depend on which
    other pixels are valid.
    """
    rng = _generator(seed)
    noise = rng.standard_normal(depth.data.shape) * noise_sigma if noise_sigma > 0 else np.zeros(depth.data.shape)
    data = np.where(depth.valid, depth.data + noise, 0.0)
    flat_valid = np.flatnonzero(depth.valid)
    chosen = flat_valid[_chosen(len(flat_valid), outlier_fraction, rng)]
    if len(chosen):
        lo, hi = depth.data[depth.valid].min(), depth.data[depth.valid].max()
        data.ravel()[chosen] = rng.uniform(lo, hi, size=len(chosen))
    valid = depth.valid & (data > 0)
    return DepthImage(np.where(valid, data, 0.0), valid)


def corrupt_pixels(pixels: np.ndarray, outlier_fraction: float, seed: int, size: tuple[int, int]) -> tuple[np.ndarray, np.ndarray]:
    """
    Replace a fraction of (u0, v0, u1, v1) rows' second pixel by uniform image positions.

    Returns:
        Tuple of (corrupted copy, sorted replaced row indices)
    """
    pixels = np.array(pixels, dtype=np.float64).reshape(-1, 4)
    rng = _generator(seed)
    chosen = _chosen(len(pixels), outlier_fraction, rng)
    width, height = size
    pixels[chosen, 2] = rng.uniform(0, width - 1, size=len(chosen))
    pixels[chosen, 3] = rng.uniform(0, height - 1, size=len(chosen))
    return pixels, chosen


def corrupt_correspondences(corrs: list[Correspondence], noise_sigma: float, outlier_fraction: float, seed: int) -> tuple[list[Correspondence], np.ndarray]:
    """
    Gaussian noise on both 3-d ends and uniform outliers for the chosen fraction.

    Outlier x1 positions are drawn uniformly in the bounding box of the x1 points.
    """
    rng = _generator(seed)
    n = len(corrs)
    if n == 0:
        return [], np.zeros(0, dtype=np.int64)
    x0 = np.stack([c.x0 for c in corrs]) + rng.standard_normal((n, 3)) * noise_sigma
    x1 = np.stack([c.x1 for c in corrs]) + rng.standard_normal((n, 3)) * noise_sigma
    chosen = _chosen(n, outlier_fraction, rng)
    lo, hi = x1.min(axis=0), x1.max(axis=0)
    x1[chosen] = rng.uniform(lo, hi, size=(len(chosen), 3))
    out = [Correspondence(c.i, c.j, c.p0, c.p1, x0[k], x1[k]) for k, c in enumerate(corrs)]
    return out, chosen


def corrupt(data, noise_sigma: float = 0.0, outlier_fraction: float = 0.0, seed: int = 0, image_size: tuple[int, int] | None = None):
    """
    Corrupt a DepthImage, a Correspondence list or an (N, 4) pixel-pair array.

    Returns the same type as the input; the replaced indices are dropped.
    """
    if isinstance(data, DepthImage):
        return corrupt_depth(data, noise_sigma, outlier_fraction, seed)
    if isinstance(data, list) and (not data or isinstance(data[0], Correspondence)):
        return corrupt_correspondences(data, noise_sigma, outlier_fraction, seed)[0]
    if image_size is None:
        raise ValueError("pixel correspondences need the image size")
    return corrupt_pixels(data, outlier_fraction, seed, image_size)[0]


def icosphere(radius: float = 1.0, level: int = 3, center=(0.0, 0.0, 0.0)) -> TriangleMesh:
    """Outward-wound subdivided icosahedron with vertices on the sphere."""
    phi = (1 + math.sqrt(5)) / 2
    vertices = [(-1, phi, 0), (1, phi, 0), (-1, -phi, 0), (1, -phi, 0), (0, -1, phi), (0, 1, phi), (0, -1, -phi), (0, 1, -phi), (phi, 0, -1), (phi, 0, 1), (-phi, 0, -1), (-phi, 0, 1)]
    vertices = [np.asarray(v, dtype=np.float64) / np.linalg.norm(v) for v in vertices]
    faces = [
        (0, 11, 5), (0, 5, 1), (0, 1, 7), (0, 7, 10), (0, 10, 11), (1, 5, 9), (5, 11, 4), (11, 10, 2), (10, 7, 6), (7, 1, 8),
        (3, 9, 4), (3, 4, 2), (3, 2, 6), (3, 6, 8), (3, 8, 9), (4, 9, 5), (2, 4, 11), (6, 2, 10), (8, 6, 7), (9, 8, 1),
    ]  # fmt: skip
    for _ in range(level):
        midpoints: dict[tuple[int, int], int] = {}

        def midpoint(a: int, b: int) -> int:
            key = (min(a, b), max(a, b))
            if key not in midpoints:
                m = vertices[a] + vertices[b]
                vertices.append(m / np.linalg.norm(m))
                midpoints[key] = len(vertices) - 1
            return midpoints[key]

        refined = []
        for a, b, c in faces:
            ab, bc, ca = midpoint(a, b), midpoint(b, c), midpoint(c, a)
            refined.extend([(a, ab, ca), (b, bc, ab), (c, ca, bc), (ab, bc, ca)])
        faces = refined
    mesh = TriangleMesh(np.asarray(vertices) * radius + np.asarray(center, dtype=np.float64), np.asarray(faces))
    # orientation check against the center
    a = mesh.vertices[mesh.faces[:, 0]] - np.asarray(center)
    if np.einsum("ij,ij->i", a, mesh.face_cross).sum() < 0:
        mesh = mesh.flipped()
    return mesh


BOX_SIDES = ("-x", "+x", "-y", "+y", "-z", "+z")


def box_mesh(lower=(0.0, 0.0, 0.0), upper=(1.0, 1.0, 1.0), subdivisions: int = 1, split_creases: bool = False, open_faces: tuple[str, ...] = ()) -> TriangleMesh:
    """
    Outward-wound axis-aligned box with each side split into subdivisions^2 quads.

    Args:
        lower: Minimum corner
        upper: Maximum corner
        subdivisions: Quads per side edge
        split_creases: Give each side its own vertices, so vertex normals equal face normals
        open_faces: Sides to leave out, named like "-z"
    """
    unknown = set(open_faces) - set(BOX_SIDES)
    if unknown:
        raise ValueError(f"unknown box sides: {sorted(unknown)}")
    n = int(subdivisions)
    if n < 1:
        raise ValueError("subdivisions must be at least 1")
    lower = np.asarray(lower, dtype=np.float64)
    upper = np.asarray(upper, dtype=np.float64)

    keys, faces = [], []
    grid = np.arange(n + 1)
    for side in BOX_SIDES:
        if side in open_faces:
            continue
        axis = "xyz".index(side[1])
        b, c = (axis + 1) % 3, (axis + 2) % 3
        ib, ic = np.meshgrid(grid, grid, indexing="ij")
        lattice = np.zeros((n + 1, n + 1, 3), dtype=np.int64)
        lattice[..., axis] = n if side[0] == "+" else 0
        lattice[..., b] = ib
        lattice[..., c] = ic
        base = sum(len(k) for k in keys)
        keys.append(lattice.reshape(-1, 3))
        index = base + np.arange((n + 1) ** 2).reshape(n + 1, n + 1)
        p00, p10, p11, p01 = index[:-1, :-1], index[1:, :-1], index[1:, 1:], index[:-1, 1:]
        quads = np.stack([p00, p10, p11, p01], axis=-1).reshape(-1, 4)
        side_faces = np.concatenate([quads[:, [0, 1, 2]], quads[:, [0, 2, 3]]])
        if side[0] == "-":
            side_faces = side_faces[:, [0, 2, 1]]
        faces.append(side_faces)

    keys = np.concatenate(keys)
    faces = np.concatenate(faces)
    if not split_creases:
        keys, inverse = np.unique(keys, axis=0, return_inverse=True)
        faces = inverse.reshape(-1)[faces]
    vertices = lower + (upper - lower) * keys / n
    return TriangleMesh(vertices, faces).compacted()
