"""
Screened Poisson reconstruction on a regular voxel grid.

The implicit function phi lives on grid nodes. Its discrete Dirichlet energy is
measured on grid edges: forward differences of phi along each axis are compared with
the splatted normal field averaged onto the same edges. The normal equations give
the 7-point Neumann Laplacian on the left and minus the discrete divergence of the
normal field on the right; screening adds trilinear point constraints phi(x_i) = 0.
The system is solved in grid units (spacing 1) and rescaled by h.
"""

import math
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np
from scipy import sparse
from skimage import measure

from geometry.mesh import TriangleMesh
from geometry.rgbd import OrientedPointCloud
from utils.errors import ConvergenceError, EmptyCloudError, EmptyMeshError, OutOfDomainError
from utils.logger import get_logger

logger = get_logger(__name__)

DEFAULT_RESOLUTION = 128
PADDING_FRACTION = 0.1
MIN_PADDING_CELLS = 4
DOMAIN_EPS = 1e-9
# trilinear corner offsets in (x, y, z) order
CORNERS = np.array([[dx, dy, dz] for dx in (0, 1) for dy in (0, 1) for dz in (0, 1)])


@dataclass(frozen=True)
class VoxelGrid:
    """Regular grid with ``dims`` cells per axis and (dims + 1) nodes per axis."""

    origin: tuple[float, float, float]
    spacing: float
    dims: tuple[int, int, int]

    def __post_init__(self):
        if not (self.spacing > 0 and math.isfinite(self.spacing)):
            raise ValueError(f"grid spacing must be positive, got {self.spacing}")
        if len(self.dims) != 3 or min(self.dims) < 2:
            raise ValueError(f"grid needs at least 2 cells per axis, got {self.dims}")
        object.__setattr__(self, "origin", tuple(float(o) for o in self.origin))
        object.__setattr__(self, "dims", tuple(int(d) for d in self.dims))

    @classmethod
    def for_cloud(cls, cloud: OrientedPointCloud, resolution: int = DEFAULT_RESOLUTION) -> "VoxelGrid":
        """
        Grid with ``resolution`` cells along the longest padded axis.

        Each side of the bounding box is padded by 10% of the extent along its own axis,
        and by at least MIN_PADDING_CELLS cells, so flat clouds get thin grids.

        Raises:
            EmptyCloudError: If the cloud is empty
            ValueError: If the resolution leaves no room for the padding
        """
        if resolution <= 2 * MIN_PADDING_CELLS:
            raise ValueError(f"grid resolution must exceed {2 * MIN_PADDING_CELLS}, got {resolution}")
        lo, hi = cloud.bounds()
        extent = hi - lo
        longest = float(extent.max()) or 1e-3
        spacing = max(longest * (1 + 2 * PADDING_FRACTION) / resolution, longest / (resolution - 2 * MIN_PADDING_CELLS))
        padding = np.maximum(PADDING_FRACTION * extent, MIN_PADDING_CELLS * spacing)
        dims = np.maximum(np.ceil((extent + 2 * padding) / spacing - 1e-9).astype(int), 2)
        origin = (lo + hi) / 2 - dims * spacing / 2
        return cls(tuple(origin), spacing, tuple(dims))

    @property
    def node_shape(self) -> tuple[int, int, int]:
        return tuple(d + 1 for d in self.dims)

    @property
    def node_count(self) -> int:
        nx, ny, nz = self.node_shape
        return nx * ny * nz

    @property
    def upper(self) -> np.ndarray:
        return np.asarray(self.origin) + np.asarray(self.dims) * self.spacing

    def node_positions(self) -> np.ndarray:
        """(node_count, 3) positions in C order."""
        axes = [self.origin[a] + self.spacing * np.arange(self.node_shape[a]) for a in range(3)]
        return np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, 3)

    def trilinear(self, points: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """
        Trilinear stencil of each point.

        Returns:
            Tuple of (flat node indices (N,8), weights (N,8))

        Raises:
            OutOfDomainError: If a point lies outside the grid
        """
        local = (np.asarray(points, dtype=np.float64).reshape(-1, 3) - np.asarray(self.origin)) / self.spacing
        dims = np.asarray(self.dims)
        outside = np.any((local < -DOMAIN_EPS) | (local > dims + DOMAIN_EPS) | ~np.isfinite(local), axis=1)
        if np.any(outside):
            first = int(np.flatnonzero(outside)[0])
            raise OutOfDomainError(f"{int(outside.sum())} points outside the grid, first at index {first}")
        cell = np.clip(np.floor(local).astype(np.int64), 0, dims - 1)
        frac = np.clip(local - cell, 0.0, 1.0)
        corner = cell[:, None, :] + CORNERS[None, :, :]
        _, ny, nz = self.node_shape
        index = (corner[..., 0] * ny + corner[..., 1]) * nz + corner[..., 2]
        weight = np.prod(np.where(CORNERS[None, :, :] == 1, frac[:, None, :], 1.0 - frac[:, None, :]), axis=2)
        return index, weight

    def interpolation_matrix(self, points: np.ndarray) -> sparse.csr_matrix:
        index, weight = self.trilinear(points)
        rows = np.repeat(np.arange(len(index)), 8)
        return sparse.csr_matrix((weight.ravel(), (rows, index.ravel())), shape=(len(index), self.node_count))


@dataclass(frozen=True)
class VectorField3:
    grid: VoxelGrid
    values: np.ndarray

    def __post_init__(self):
        values = np.asarray(self.values, dtype=np.float64).reshape(self.grid.node_count, 3)
        object.__setattr__(self, "values", values)

    def component_major(self) -> np.ndarray:
        """Flatten as [v_x; v_y; v_z]."""
        return self.values.T.ravel()


@dataclass(frozen=True)
class ScalarField:
    grid: VoxelGrid
    values: np.ndarray
    residual_history: tuple[float, ...] = field(default=(), compare=False)

    def __post_init__(self):
        values = np.asarray(self.values, dtype=np.float64).reshape(self.grid.node_shape)
        if not np.all(np.isfinite(values)):
            raise ValueError("scalar field contains non-finite values")
        object.__setattr__(self, "values", values)

    def sample(self, points: np.ndarray) -> np.ndarray:
        index, weight = self.grid.trilinear(points)
        return np.sum(self.values.ravel()[index] * weight, axis=1)

    def gradient_at(self, points: np.ndarray) -> np.ndarray:
        """Trilinear interpolation of the central-difference gradient."""
        index, weight = self.grid.trilinear(points)
        grads = np.gradient(self.values, self.grid.spacing)
        return np.stack([np.sum(g.ravel()[index] * weight, axis=1) for g in grads], axis=1)

    def shifted(self, constant: float) -> "ScalarField":
        return ScalarField(self.grid, self.values + constant)


def _difference_1d(n: int) -> sparse.csr_matrix:
    return sparse.diags([-np.ones(n - 1), np.ones(n - 1)], [0, 1], shape=(n - 1, n), format="csr")


def _average_1d(n: int) -> sparse.csr_matrix:
    return sparse.diags([0.5 * np.ones(n - 1), 0.5 * np.ones(n - 1)], [0, 1], shape=(n - 1, n), format="csr")


def _along_axis(op_1d: sparse.csr_matrix, axis: int, shape: tuple[int, int, int]) -> sparse.csr_matrix:
    factors = [sparse.identity(n, format="csr") for n in shape]
    factors[axis] = op_1d
    return sparse.kron(sparse.kron(factors[0], factors[1]), factors[2], format="csr")


class GridOperators:
    """
    Sparse finite-difference operators on a VoxelGrid, in grid units.

    ``difference`` maps nodes to the forward differences on x-, y- and z-edges and
    ``averaging`` maps a component-major node vector field to the same edges. The node
    gradient is averaging^T difference and the divergence is its negative transpose.
    """

    def __init__(self, grid: VoxelGrid):
        self.grid = grid
        shape = grid.node_shape
        self._differences = [_along_axis(_difference_1d(shape[a]), a, shape) for a in range(3)]
        self._averages = [_along_axis(_average_1d(shape[a]), a, shape) for a in range(3)]

    @cached_property
    def difference(self) -> sparse.csr_matrix:
        return sparse.vstack(self._differences, format="csr")

    @cached_property
    def averaging(self) -> sparse.csr_matrix:
        return sparse.block_diag(self._averages, format="csr")

    @cached_property
    def gradient(self) -> sparse.csr_matrix:
        """Nodes to component-major node vectors: central differences, half one-sided at the boundary."""
        return (self.averaging.T @ self.difference).tocsr()

    @cached_property
    def divergence(self) -> sparse.csr_matrix:
        return (-self.gradient.T).tocsr()

    @cached_property
    def laplacian(self) -> sparse.csr_matrix:
        """Negative 7-point Laplacian with homogeneous Neumann boundary (D^T D)."""
        return (self.difference.T @ self.difference).tocsr()

    def divergence_rhs(self, v: VectorField3) -> np.ndarray:
        """D^T M v, equal to minus the divergence of v."""
        return self.difference.T @ (self.averaging @ v.component_major())


def splat_normals(cloud: OrientedPointCloud, grid: VoxelGrid) -> VectorField3:
    """
    Distribute each unit normal to its 8 surrounding nodes with trilinear weights.

    Per-node vectors are the weight-normalized average of the contributions; nodes
    with no contribution hold zero.

    Raises:
        EmptyCloudError: If the cloud is empty
        OutOfDomainError: If a point lies outside the grid
    """
    if len(cloud) == 0:
        raise EmptyCloudError("cannot splat an empty cloud")
    index, weight = grid.trilinear(cloud.points)
    flat_index = index.ravel()
    flat_weight = weight.ravel()
    total = np.bincount(flat_index, weights=flat_weight, minlength=grid.node_count)
    values = np.zeros((grid.node_count, 3))
    for axis in range(3):
        contribution = (weight * cloud.normals[:, axis : axis + 1]).ravel()
        values[:, axis] = np.bincount(flat_index, weights=contribution, minlength=grid.node_count)
    touched = total > 0
    values[touched] /= total[touched, None]
    logger.debug(f"splat_normals: {len(cloud)} points onto {int(touched.sum())} nodes")
    return VectorField3(grid, values)


@dataclass
class CgResult:
    x: np.ndarray
    residual_history: list[float]
    converged: bool

    @property
    def iterations(self) -> int:
        return len(self.residual_history) - 1


def conjugate_gradient(matrix: sparse.spmatrix, b: np.ndarray, tol: float, max_iters: int, x0: np.ndarray | None = None) -> CgResult:
    """
    Jacobi-preconditioned conjugate gradient for symmetric positive semi-definite matrix.

    Convergence is declared when ||b - matrix x|| <= tol * ||b||. The relative residual of
    every iteration is recorded.
    """
    b = np.asarray(b, dtype=np.float64)
    b_norm = float(np.linalg.norm(b))
    x = np.zeros_like(b) if x0 is None else np.array(x0, dtype=np.float64)
    if b_norm == 0.0:
        return CgResult(np.zeros_like(b), [0.0], True)
    diagonal = matrix.diagonal()
    inv_diag = np.where(diagonal > 0, 1.0 / np.where(diagonal > 0, diagonal, 1.0), 1.0)

    r = b - matrix @ x
    history = [float(np.linalg.norm(r)) / b_norm]
    if history[-1] <= tol:
        return CgResult(x, history, True)
    z = inv_diag * r
    p = z.copy()
    rz = float(r @ z)
    for _ in range(max_iters):
        Ap = matrix @ p
        pAp = float(p @ Ap)
        if pAp <= 0.0:
            break
        alpha = rz / pAp
        x += alpha * p
        r -= alpha * Ap
        history.append(float(np.linalg.norm(r)) / b_norm)
        if history[-1] <= tol:
            return CgResult(x, history, True)
        z = inv_diag * r
        rz_new = float(r @ z)
        p = z + (rz_new / rz) * p
        rz = rz_new
    return CgResult(x, history, False)


def screening_term(grid: VoxelGrid, points: np.ndarray, screening_weight: float) -> sparse.csr_matrix:
    """
    Point-constraint block gamma * A^T A added to the grid-unit Laplacian.

    Each sample weighs 1/|cloud| and the block is scaled by the number of occupied
    cells, so gamma = alpha * occupied / |cloud| and the balance with the Laplacian
    holds at any grid resolution.
    """
    interp = grid.interpolation_matrix(points)
    index, _ = grid.trilinear(points)
    occupied = len(np.unique(index[:, 0]))
    gamma = screening_weight * occupied / len(points)
    return (gamma * (interp.T @ interp)).tocsr()


def solve_screened_poisson(
    v: VectorField3,
    cloud: OrientedPointCloud,
    screening_weight: float = 4.0,
    cg_tol: float = 1e-6,
    cg_max_iters: int = 2000,
    operators: GridOperators | None = None,
) -> ScalarField:
    """
    Solve for phi whose gradient best matches v, screened toward phi(x_i) = 0.

    See screening_term for the point weights. With zero screening the Neumann null space
    is removed by pinning the mean of phi to zero.

    Args:
        v: Splatted normal field
        cloud: Samples used for screening
        screening_weight: alpha >= 0
        cg_tol: Relative residual target
        cg_max_iters: Iteration cap
        operators: Prebuilt operators for v.grid

    Returns:
        ScalarField with its CG residual history attached

    Raises:
        ValueError: If screening_weight is negative
        ConvergenceError: If CG does not reach cg_tol
    """
    if screening_weight < 0:
        raise ValueError(f"screening weight must be non-negative, got {screening_weight}")
    grid = v.grid
    ops = operators or GridOperators(grid)
    system = ops.laplacian
    if screening_weight > 0 and len(cloud) > 0:
        system = (system + screening_term(grid, cloud.points, screening_weight)).tocsr()
    rhs = ops.divergence_rhs(v)

    result = conjugate_gradient(system, rhs, cg_tol, cg_max_iters)
    if not result.converged:
        raise ConvergenceError("screened Poisson solve did not converge", result.residual_history[-1], result.iterations)
    solution = result.x
    if screening_weight == 0:
        solution = solution - solution.mean()
    logger.info(f"Poisson solve: {grid.node_count} nodes, {result.iterations} CG iterations, relative residual {result.residual_history[-1]:.2e}")
    return ScalarField(grid, grid.spacing * solution, tuple(result.residual_history))


def choose_isovalue(phi: ScalarField, cloud: OrientedPointCloud) -> float:
    """Mean of the trilinearly interpolated field at the samples."""
    if len(cloud) == 0:
        raise EmptyCloudError("cannot choose an iso-value without samples")
    return math.fsum(phi.sample(cloud.points)) / len(cloud)


def marching_cubes(phi: ScalarField, isovalue: float, interior: str = "below") -> TriangleMesh:
    """
    Extract the level set phi = isovalue as a welded triangle mesh.

    Args:
        phi: Scalar field
        isovalue: Level to extract
        interior: "below" when the enclosed region has phi < isovalue; faces are then
            wound to point toward increasing phi. "above" reverses both.

    Raises:
        EmptyMeshError: If phi does not cross the iso-value
    """
    if interior not in ("below", "above"):
        raise ValueError(f"interior must be 'below' or 'above', got {interior}")
    values = phi.values
    if not (values.min() < isovalue < values.max()):
        raise EmptyMeshError(f"field range [{values.min():.4g}, {values.max():.4g}] does not cross {isovalue:.4g}")
    h = phi.grid.spacing
    verts, faces, _, _ = measure.marching_cubes(values, level=isovalue, spacing=(h, h, h), allow_degenerate=False)
    verts = verts.astype(np.float64) + np.asarray(phi.grid.origin)
    mesh = TriangleMesh(verts, faces)
    if mesh.is_empty:
        raise EmptyMeshError("marching cubes produced no faces")

    centroids = verts[faces].mean(axis=1)
    alignment = np.einsum("ij,ij->i", mesh.face_normals, phi.gradient_at(centroids))
    score = math.fsum(mesh.face_areas * np.sign(alignment))
    wants_increasing = interior == "below"
    if (score < 0) == wants_increasing:
        mesh = mesh.flipped()
    logger.debug(f"marching_cubes: {len(mesh.vertices)} vertices, {len(mesh.faces)} faces at level {isovalue:.4g}")
    return mesh
