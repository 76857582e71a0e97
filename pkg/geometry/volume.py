"""
Enclosed volume of triangle meshes by the divergence theorem.

With a flow field v of unit divergence, the enclosed volume equals the flux of v
through the surface. The default v = (x, 0, 0) has no flux through horizontal
planes, so a mesh whose only hole is its support, once that support is aligned with
z = 0, integrates to the same volume as its closed twin. The flux is evaluated with
the vertex quadrature rule: each face contributes A/3 times the sum of <v, n> over
its corners, with n the averaged vertex normals.
"""

import math
from dataclasses import dataclass, field
from enum import IntEnum

import numpy as np
from scipy.spatial import cKDTree

from geometry.mesh import TriangleMesh
from geometry.motion import RigidMotion
from geometry.registration import sample_triples
from geometry.rgbd import OrientedPointCloud
from utils.errors import EmptyCloudError, NoPlaneError
from utils.logger import get_logger

logger = get_logger(__name__)

UNIT_TOL = 1e-9
ON_PLANE_EPS = 1e-12
PLANE_BATCH = 256


class FlowField(IntEnum):
    """Unit-divergence field along one coordinate axis, e.g. X is v(x) = (x, 0, 0)."""

    X = 0
    Y = 1
    Z = 2

    def evaluate(self, points: np.ndarray) -> np.ndarray:
        points = np.asarray(points, dtype=np.float64)
        out = np.zeros_like(points)
        out[..., self.value] = points[..., self.value]
        return out


@dataclass(frozen=True)
class Plane:
    """The plane {x : <normal, x> = offset}."""

    normal: np.ndarray
    offset: float

    def __post_init__(self):
        normal = np.array(self.normal, dtype=np.float64).reshape(3)
        if abs(np.linalg.norm(normal) - 1.0) > UNIT_TOL:
            raise ValueError(f"plane normal must be unit length, got norm {np.linalg.norm(normal)}")
        normal.setflags(write=False)
        object.__setattr__(self, "normal", normal)
        object.__setattr__(self, "offset", float(self.offset))

    @classmethod
    def from_coefficients(cls, normal, offset: float) -> "Plane":
        """Normalize (normal, offset) jointly."""
        normal = np.asarray(normal, dtype=np.float64)
        norm = np.linalg.norm(normal)
        if norm == 0:
            raise ValueError("plane normal must be non-zero")
        return cls(normal / norm, offset / norm)

    def signed_distance(self, points: np.ndarray) -> np.ndarray:
        return np.asarray(points, dtype=np.float64) @ self.normal - self.offset

    def flipped(self) -> "Plane":
        return Plane(-self.normal, -self.offset)


def vertex_normals(mesh: TriangleMesh) -> np.ndarray:
    """
    Per-vertex unit normals from the normalized sum of incident unit face normals.

    Vertices whose one-ring normals cancel get a zero normal and are reported.
    """
    flagged = int(np.count_nonzero(mesh.flagged_vertices))
    if flagged:
        logger.warning(f"{flagged} vertices have cancelling one-ring normals and are excluded from quadrature")
    return mesh.vertex_normals


def mesh_volume_divergence(mesh: TriangleMesh, flow: FlowField = FlowField.X) -> float:
    """
    Volume as the vertex-quadrature flux of a unit-divergence field.

    No closedness check is made; an open mesh is only meaningful when its holes lie in
    planes the flow field does not cross.
    """
    if mesh.is_empty:
        logger.warning("volume of an empty mesh is zero")
        return 0.0
    normals = vertex_normals(mesh)
    flux = np.einsum("ij,ij->i", flow.evaluate(mesh.vertices), normals)
    per_face = mesh.face_areas / 3.0 * flux[mesh.faces].sum(axis=1)
    return math.fsum(per_face)


def mesh_volume_tetrahedra(mesh: TriangleMesh) -> float:
    """Sum of signed tetrahedra a . ((b - a) x (c - a)) / 6; exact for closed meshes."""
    if mesh.is_empty:
        return 0.0
    a = mesh.vertices[mesh.faces[:, 0]]
    return math.fsum(np.einsum("ij,ij->i", a, mesh.face_cross) / 6.0)


def _fit_plane(points: np.ndarray) -> tuple[np.ndarray, float]:
    """Least-squares plane through points: centroid and smallest scatter eigenvector."""
    centroid = points.mean(axis=0)
    centered = points - centroid
    _, vectors = np.linalg.eigh(centered.T @ centered)
    normal = vectors[:, 0]
    return normal, float(normal @ centroid)


@dataclass
class PlaneFit:
    plane: Plane
    inliers: np.ndarray


def fit_ground_plane(points: np.ndarray, iterations: int = 1000, distance_threshold: float = 0.005, seed: int = 0, min_inlier_fraction: float = 0.1) -> PlaneFit:
    """
    Seeded RANSAC over point triples with a least-squares refit on the winner's inliers.

    Hypotheses are ranked by inlier count, then by summed inlier distance, then by
    iteration. The refit normal points toward the side holding most non-inlier points,
    or toward +z when that is undecided.

    Raises:
        NoPlaneError: If fewer than max(3, min_inlier_fraction * N) points support the plane
    """
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    n = len(points)
    if n < 3:
        raise NoPlaneError(f"plane detection needs at least 3 points, got {n}")
    triples = sample_triples(n, iterations, seed)

    counts = np.full(len(triples), -1, dtype=np.int64)
    distance_sums = np.full(len(triples), np.inf)
    for start in range(0, len(triples), PLANE_BATCH):
        batch = points[triples[start : start + PLANE_BATCH]]
        normals = np.cross(batch[:, 1] - batch[:, 0], batch[:, 2] - batch[:, 0])
        norms = np.linalg.norm(normals, axis=1)
        usable = norms > 1e-15
        if not np.any(usable):
            continue
        normals = normals[usable] / norms[usable, None]
        offsets = np.einsum("ij,ij->i", normals, batch[usable, 0])
        distances = np.abs(points @ normals.T - offsets[None, :])
        inliers = distances <= distance_threshold
        positions = start + np.flatnonzero(usable)
        counts[positions] = inliers.sum(axis=0)
        distance_sums[positions] = np.where(inliers, distances, 0.0).sum(axis=0)

    order = np.lexsort((np.arange(len(triples)), distance_sums, -counts))
    required = max(3, int(math.ceil(min_inlier_fraction * n)))
    if len(order) == 0 or counts[order[0]] < required:
        best_count = 0 if len(order) == 0 else int(max(counts[order[0]], 0))
        raise NoPlaneError(f"best plane has {best_count} of {n} points, {required} required")

    best = triples[order[0]]
    a, b, c = points[best]
    normal = np.cross(b - a, c - a)
    normal /= np.linalg.norm(normal)
    inliers = np.flatnonzero(np.abs(points @ normal - normal @ a) <= distance_threshold)
    normal, offset = _fit_plane(points[inliers])
    inliers = np.flatnonzero(np.abs(points @ normal - offset) <= distance_threshold)

    mask = np.ones(n, dtype=bool)
    mask[inliers] = False
    side = np.sign(points[mask] @ normal - offset)
    above, below = int(np.count_nonzero(side > 0)), int(np.count_nonzero(side < 0))
    if below > above or (below == above and normal[2] < 0):
        normal, offset = -normal, -offset
    plane = Plane(normal, offset)
    logger.info(f"Ground plane: normal ({normal[0]:.4f}, {normal[1]:.4f}, {normal[2]:.4f}), offset {offset:.4f} m, {len(inliers)} of {n} inliers")
    return PlaneFit(plane, inliers)


def detect_ground_plane(points: np.ndarray, iterations: int = 1000, distance_threshold: float = 0.005, seed: int = 0, min_inlier_fraction: float = 0.1) -> Plane:
    """Ground plane of a point set; see fit_ground_plane."""
    return fit_ground_plane(points, iterations, distance_threshold, seed, min_inlier_fraction).plane


def support_motion(plane: Plane) -> RigidMotion:
    """
    Minimal rotation taking the plane normal to +z, followed by the translation that
    puts the plane at z = 0. An antiparallel normal is turned by 180 degrees about x.
    """
    n = plane.normal
    axis = np.cross(n, [0.0, 0.0, 1.0])
    s = np.linalg.norm(axis)
    c = float(n[2])
    if s < 1e-12:
        rotation = np.eye(3) if c > 0 else np.diag([1.0, -1.0, -1.0])
    else:
        k = np.array([[0.0, -axis[2], axis[1]], [axis[2], 0.0, -axis[0]], [-axis[1], axis[0], 0.0]])
        rotation = np.eye(3) + k + (k @ k) * ((1.0 - c) / s**2)
    return RigidMotion(rotation, [0.0, 0.0, -plane.offset])


def align_support_to_plane(mesh: TriangleMesh, plane: Plane) -> tuple[TriangleMesh, RigidMotion]:
    """Move the mesh so that ``plane`` becomes z = 0 with its normal along +z."""
    motion = support_motion(plane)
    return mesh.transformed(motion), motion


def clip_below_support(mesh: TriangleMesh, level: float = 0.0) -> TriangleMesh:
    """
    Keep the part of the mesh above z = level.

    Faces crossing the level are cut; new vertices are shared between neighboring
    faces through the id of the edge they lie on. Faces lying in the level plane or
    below it are removed, leaving the support open.
    """
    if mesh.is_empty:
        return mesh
    height = mesh.vertices[:, 2] - level
    height = np.where(np.abs(height) <= ON_PLANE_EPS, 0.0, height)
    face_heights = height[mesh.faces]
    keep = np.all(face_heights >= 0, axis=1) & np.any(face_heights > 0, axis=1)
    crossing = np.any(face_heights > 0, axis=1) & np.any(face_heights < 0, axis=1)

    vertices = [mesh.vertices]
    new_index: dict[tuple[int, int], int] = {}
    next_index = len(mesh.vertices)
    new_faces = [mesh.faces[keep]]
    extra_vertices = []

    def cut(a: int, b: int) -> int:
        nonlocal next_index
        key = (min(a, b), max(a, b))
        if key not in new_index:
            t = height[a] / (height[a] - height[b])
            point = mesh.vertices[a] + t * (mesh.vertices[b] - mesh.vertices[a])
            point[2] = level
            extra_vertices.append(point)
            new_index[key] = next_index
            next_index += 1
        return new_index[key]

    clipped = []
    for face in mesh.faces[crossing]:
        polygon = []
        for k in range(3):
            a, b = int(face[k]), int(face[(k + 1) % 3])
            if height[a] >= 0:
                polygon.append(a)
            if (height[a] > 0 > height[b]) or (height[a] < 0 < height[b]):
                polygon.append(cut(a, b))
        clipped.extend([polygon[0], polygon[i], polygon[i + 1]] for i in range(1, len(polygon) - 1))

    if clipped:
        new_faces.append(np.asarray(clipped, dtype=np.int64))
    if extra_vertices:
        vertices.append(np.asarray(extra_vertices))
    result = TriangleMesh(np.concatenate(vertices), np.concatenate(new_faces))
    logger.debug(f"clip_below_support: {len(mesh.faces)} -> {len(result.faces)} faces, {int(crossing.sum())} cut")
    return result.compacted()


def complete_support(cloud: OrientedPointCloud, plane: Plane, crop_margin: float = 0.003, mirror: bool = True) -> tuple[OrientedPointCloud, RigidMotion]:
    """
    Move a cloud into the support frame and prepare it for a closed reconstruction.

    Points less than ``crop_margin`` above the plane (the ground itself and anything
    below it) are dropped. With ``mirror`` the remaining object is reflected through
    z = 0, so the reconstructed surface closes symmetrically across the support and a
    cut at z = 0 leaves the object's own volume.

    Returns:
        Tuple of (support-frame cloud, motion from the input frame to the support frame)

    Raises:
        EmptyCloudError: If nothing is left above the plane
    """
    motion = support_motion(plane)
    aligned = cloud.transformed(motion)
    above = aligned.subset(aligned.points[:, 2] >= crop_margin)
    if len(above) == 0:
        raise EmptyCloudError(f"no points more than {crop_margin} m above the support plane")
    logger.info(f"Support crop kept {len(above)} of {len(cloud)} points")
    if not mirror:
        return above, motion
    flip = np.array([1.0, 1.0, -1.0])
    reflected = OrientedPointCloud(above.points * flip, above.normals * flip, above.colors)
    return OrientedPointCloud.concatenate([above, reflected]), motion


def unsupported_area_fraction(mesh: TriangleMesh, points: np.ndarray, distance: float) -> float:
    """Share of the surface area whose face centroids lie farther than ``distance`` from every sample."""
    if mesh.is_empty or len(points) == 0:
        return 1.0 if not mesh.is_empty else 0.0
    centroids = mesh.vertices[mesh.faces].mean(axis=1)
    nearest, _ = cKDTree(points).query(centroids)
    areas = mesh.face_areas
    total = math.fsum(areas)
    if total == 0:
        return 0.0
    return math.fsum(areas[nearest > distance]) / total


@dataclass
class VolumeReport:
    volume: float
    volume_tetrahedra: float
    boundary_edges: int
    support_gap: float | None
    gap_tolerance: float
    reliable: bool
    flagged_vertices: int
    degenerate_faces: int
    motion: RigidMotion | None = None
    warnings: list[str] = field(default_factory=list)

    def as_dict(self) -> dict:
        return {
            "volume_m3": self.volume,
            "volume_cm3": self.volume * 1e6,
            "volume_tetrahedra_m3": self.volume_tetrahedra,
            "boundary_edges": self.boundary_edges,
            "support_gap_m": self.support_gap,
            "gap_tolerance_m": self.gap_tolerance,
            "reliable": self.reliable,
            "flagged_vertices": self.flagged_vertices,
            "degenerate_faces": self.degenerate_faces,
            "warnings": list(self.warnings),
        }


def estimate_volume(
    mesh: TriangleMesh,
    plane: Plane | None = None,
    gap_tolerance: float | None = None,
    flow: FlowField = FlowField.X,
    clip: bool = False,
) -> VolumeReport:
    """
    Align the support (when a plane is given) and integrate.

    Args:
        mesh: Outward-wound mesh
        plane: Detected support plane, or None for a mesh asserted closed
        gap_tolerance: Allowed support-gap height; defaults to 2x the mean edge length
        flow: Unit-divergence field used for the flux
        clip: Cut the aligned mesh at z = 0 before integrating

    Returns:
        VolumeReport with both estimators and the support diagnostics
    """
    motion = None
    if plane is not None:
        mesh, motion = align_support_to_plane(mesh, plane)
        if clip:
            mesh = clip_below_support(mesh)

    tolerance = gap_tolerance if gap_tolerance is not None else 2.0 * mesh.mean_edge_length
    boundary = mesh.boundary_vertices
    warnings = []
    if plane is not None:
        gap = float(np.max(np.abs(mesh.vertices[boundary, 2]))) if len(boundary) else 0.0
        reliable = gap <= tolerance
        if not reliable:
            warnings.append(f"support gap {gap:.4g} m exceeds tolerance {tolerance:.4g} m")
    else:
        gap = None
        reliable = len(mesh.boundary_edges) == 0
        if not reliable:
            warnings.append(f"open mesh ({len(mesh.boundary_edges)} boundary edges) without a support plane")

    volume = mesh_volume_divergence(mesh, flow)
    flagged = int(np.count_nonzero(mesh.flagged_vertices)) if not mesh.is_empty else 0
    if mesh.is_empty:
        warnings.append("empty mesh")
    if mesh.degenerate_face_count:
        warnings.append(f"{mesh.degenerate_face_count} zero-area faces contribute nothing")
    if flagged:
        warnings.append(f"{flagged} vertices with cancelling normals excluded")
    for message in warnings:
        logger.warning(message)
    return VolumeReport(
        volume=volume,
        volume_tetrahedra=mesh_volume_tetrahedra(mesh),
        boundary_edges=int(len(mesh.boundary_edges)),
        support_gap=gap,
        gap_tolerance=tolerance,
        reliable=reliable,
        flagged_vertices=flagged,
        degenerate_faces=mesh.degenerate_face_count,
        motion=motion,
        warnings=warnings,
    )
