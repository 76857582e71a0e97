import numpy as np
import pytest

from geometry.poisson import (
    GridOperators,
    ScalarField,
    VectorField3,
    VoxelGrid,
    choose_isovalue,
    marching_cubes,
    screening_term,
    solve_screened_poisson,
    splat_normals,
)
from geometry.rgbd import OrientedPointCloud
from geometry.volume import mesh_volume_tetrahedra
from tests.conftest import sphere_cloud
from utils.errors import ConvergenceError, EmptyCloudError, EmptyMeshError, OutOfDomainError

UNIT_GRID = VoxelGrid((0.0, 0.0, 0.0), 1.0, (4, 4, 4))


def node_index(grid: VoxelGrid, i: int, j: int, k: int) -> int:
    _, ny, nz = grid.node_shape
    return (i * ny + j) * nz + k


def test_splat_point_on_node():
    cloud = OrientedPointCloud([[1.0, 2.0, 3.0]], [[0.0, 1.0, 0.0]])
    field = splat_normals(cloud, UNIT_GRID)
    target = node_index(UNIT_GRID, 1, 2, 3)
    assert np.array_equal(field.values[target], [0.0, 1.0, 0.0])
    others = np.delete(field.values, target, axis=0)
    assert not np.any(others)


def test_splat_point_at_cell_center():
    normal = np.array([0.6, 0.0, 0.8])
    field = splat_normals(OrientedPointCloud([[1.5, 1.5, 1.5]], [normal]), UNIT_GRID)
    touched = np.flatnonzero(np.linalg.norm(field.values, axis=1))
    assert len(touched) == 8
    assert np.allclose(field.values[touched], normal)


def test_splat_opposite_normals_cancel():
    cloud = OrientedPointCloud([[1.3, 2.2, 0.7]] * 2, [[0.0, 0.0, 1.0], [0.0, 0.0, -1.0]])
    assert not np.any(splat_normals(cloud, UNIT_GRID).values)


def test_splat_rejects_points_outside():
    with pytest.raises(OutOfDomainError):
        splat_normals(OrientedPointCloud([[5.5, 0.0, 0.0]], [[1.0, 0.0, 0.0]]), UNIT_GRID)


def test_splat_rejects_empty_cloud():
    with pytest.raises(EmptyCloudError):
        splat_normals(OrientedPointCloud.empty(), UNIT_GRID)


def test_grid_for_cloud_pads_bounds():
    cloud = sphere_cloud(200, 0.1, (0.3, -0.2, 0.05))
    grid = VoxelGrid.for_cloud(cloud, 32)
    lo, hi = cloud.bounds()
    assert max(grid.dims) <= 32
    assert np.all(lo - np.asarray(grid.origin) >= 4 * grid.spacing - 1e-12)
    assert np.all(grid.upper - hi >= 4 * grid.spacing - 1e-12)


def test_flat_cloud_gets_a_thin_grid():
    rng = np.random.default_rng(3)
    points = np.column_stack([rng.uniform(-0.1, 0.1, 500), rng.uniform(-0.1, 0.1, 500), rng.uniform(0.0, 0.01, 500)])
    cloud = OrientedPointCloud(points, np.tile([0.0, 0.0, 1.0], (500, 1)))
    grid = VoxelGrid.for_cloud(cloud, 128)
    lo, hi = cloud.bounds()
    assert grid.dims[2] <= 16
    assert lo[2] - grid.origin[2] >= 4 * grid.spacing - 1e-12
    assert grid.upper[2] - hi[2] >= 4 * grid.spacing - 1e-12
    assert lo[0] - grid.origin[0] >= 0.1 * (hi[0] - lo[0]) - 1e-12


def test_divergence_is_negative_adjoint_of_gradient(rng):
    ops = GridOperators(VoxelGrid((0.0, 0.0, 0.0), 0.1, (6, 5, 4)))
    n = ops.grid.node_count
    for _ in range(100):
        phi = rng.normal(size=n)
        v = rng.normal(size=3 * n)
        lhs = (ops.divergence @ v) @ phi
        rhs = -(v @ (ops.gradient @ phi))
        assert abs(lhs - rhs) <= 1e-10 * max(1.0, abs(lhs))


def test_laplacian_is_symmetric_with_constant_null_space():
    ops = GridOperators(VoxelGrid((0.0, 0.0, 0.0), 1.0, (5, 4, 3)))
    laplacian = ops.laplacian
    assert abs(laplacian - laplacian.T).max() == 0
    assert np.allclose(laplacian @ np.ones(ops.grid.node_count), 0.0)


def test_zero_field_gives_zero_solution():
    grid = VoxelGrid((0.0, 0.0, 0.0), 0.1, (6, 6, 6))
    phi = solve_screened_poisson(VectorField3(grid, np.zeros((grid.node_count, 3))), OrientedPointCloud.empty(), screening_weight=0.0)
    assert not np.any(phi.values)


def test_constant_field_recovers_linear_potential():
    grid = VoxelGrid((0.0, 0.0, 0.0), 0.05, (8, 8, 8))
    values = np.zeros((grid.node_count, 3))
    values[:, 0] = 1.0
    phi = solve_screened_poisson(VectorField3(grid, values), OrientedPointCloud.empty(), screening_weight=0.0, cg_tol=1e-10, cg_max_iters=2000)
    gradient = np.gradient(phi.values, grid.spacing)
    interior = (slice(1, -1),) * 3
    assert np.max(np.abs(gradient[0][interior] - 1.0)) < 1e-6
    assert np.max(np.abs(gradient[1][interior])) < 1e-6
    assert abs(phi.values.mean()) < 1e-9


def test_hole_in_normal_support_is_inpainted_harmonically():
    grid = VoxelGrid((0.0, 0.0, 0.0), 0.1, (12, 12, 12))
    positions = grid.node_positions()
    values = np.zeros((grid.node_count, 3))
    shell = np.abs(np.linalg.norm(positions - 0.6, axis=1) - 0.35) < 0.1
    values[shell] = (positions[shell] - 0.6) / np.linalg.norm(positions[shell] - 0.6, axis=1, keepdims=True)
    v = VectorField3(grid, values)
    cg_tol = 1e-8
    phi = solve_screened_poisson(v, OrientedPointCloud.empty(), screening_weight=0.0, cg_tol=cg_tol, cg_max_iters=4000)

    ops = GridOperators(grid)
    rhs = ops.divergence_rhs(v)
    residual = ops.laplacian @ (phi.values.ravel() / grid.spacing)
    hole = (rhs == 0) & ~shell
    assert np.count_nonzero(hole) > 0
    assert np.max(np.abs(residual[hole])) < 10 * cg_tol * np.linalg.norm(rhs)


@pytest.fixture(scope="module")
def sphere_solution():
    cloud = sphere_cloud(6000, 0.1)
    grid = VoxelGrid.for_cloud(cloud, 48)
    phi = solve_screened_poisson(splat_normals(cloud, grid), cloud, screening_weight=4.0, cg_tol=1e-6, cg_max_iters=4000)
    return cloud, phi


def test_sphere_iso_surface_is_within_one_voxel(sphere_solution):
    cloud, phi = sphere_solution
    isovalue = choose_isovalue(phi, cloud)
    mesh = marching_cubes(phi, isovalue)
    radii = np.linalg.norm(mesh.vertices, axis=1)
    assert np.sqrt(np.mean((radii - 0.1) ** 2)) < phi.grid.spacing
    assert mesh.is_watertight
    assert mesh_volume_tetrahedra(mesh) > 0


def test_screening_keeps_isovalue_near_zero(sphere_solution):
    cloud, phi = sphere_solution
    spread = phi.values.max() - phi.values.min()
    assert abs(choose_isovalue(phi, cloud)) < 0.1 * spread


def test_cg_residual_never_jumps(sphere_solution):
    history = sphere_solution[1].residual_history
    assert history[-1] <= 1e-6
    assert all(b < 10 * a for a, b in zip(history, history[1:], strict=False))


def test_solver_reports_non_convergence():
    cloud = sphere_cloud(500, 0.1)
    grid = VoxelGrid.for_cloud(cloud, 24)
    with pytest.raises(ConvergenceError) as info:
        solve_screened_poisson(splat_normals(cloud, grid), cloud, cg_tol=1e-12, cg_max_iters=2)
    assert info.value.iterations == 2
    assert info.value.residual > 1e-12


def test_negative_screening_weight_rejected():
    with pytest.raises(ValueError):
        solve_screened_poisson(VectorField3(UNIT_GRID, np.zeros((UNIT_GRID.node_count, 3))), OrientedPointCloud.empty(), screening_weight=-1.0)


def test_isovalue_of_constant_field():
    phi = ScalarField(UNIT_GRID, np.full(UNIT_GRID.node_shape, 5.0))
    cloud = OrientedPointCloud([[0.5, 1.5, 2.5], [3.0, 3.0, 3.0]], [[0.0, 0.0, 1.0]] * 2)
    assert choose_isovalue(phi, cloud) == pytest.approx(5.0)


def test_isovalue_of_linear_field_on_plane():
    grid = VoxelGrid((0.0, 0.0, 0.0), 0.1, (10, 10, 10))
    phi = ScalarField(grid, grid.node_positions()[:, 2])
    points = np.column_stack([np.linspace(0.05, 0.95, 7), np.linspace(0.9, 0.1, 7), np.full(7, 0.3)])
    cloud = OrientedPointCloud(points, np.tile([0.0, 0.0, 1.0], (7, 1)))
    assert choose_isovalue(phi, cloud) == pytest.approx(0.3, abs=1e-12)


def test_isovalue_shifts_with_field(sphere_solution):
    cloud, phi = sphere_solution
    assert choose_isovalue(phi.shifted(2.0), cloud) == pytest.approx(choose_isovalue(phi, cloud) + 2.0, abs=1e-9)


def sphere_sdf(radius: float, spacing: float, cells: int) -> ScalarField:
    half = cells * spacing / 2
    grid = VoxelGrid((-half, -half, -half), spacing, (cells, cells, cells))
    return ScalarField(grid, np.linalg.norm(grid.node_positions(), axis=1) - radius)


def test_marching_cubes_on_sphere_sdf():
    phi = sphere_sdf(0.6, 0.05, 36)
    mesh = marching_cubes(phi, 0.0)
    radii = np.linalg.norm(mesh.vertices, axis=1)
    assert radii.min() >= 0.6 - 0.05 and radii.max() <= 0.6 + 0.05
    assert mesh.is_watertight
    assert mesh.euler_characteristic == 2
    # outward winding encloses positive volume
    assert mesh_volume_tetrahedra(mesh) == pytest.approx(4.0 / 3.0 * np.pi * 0.6**3, rel=0.02)


def test_marching_cubes_above_interior_reverses_winding():
    phi = sphere_sdf(0.6, 0.05, 36)
    below = marching_cubes(phi, 0.0, interior="below")
    above = marching_cubes(phi, 0.0, interior="above")
    assert mesh_volume_tetrahedra(above) == pytest.approx(-mesh_volume_tetrahedra(below))


def test_marching_cubes_shift_invariance():
    phi = sphere_sdf(0.6, 0.05, 36)
    a = marching_cubes(phi, 0.013)
    b = marching_cubes(phi.shifted(3.0), 3.013)
    assert np.array_equal(a.faces, b.faces)
    assert np.allclose(a.vertices, b.vertices, atol=1e-9)


def test_marching_cubes_extracts_linear_plane_exactly():
    grid = VoxelGrid((0.03, 0.0, 0.0), 0.1, (10, 6, 6))
    phi = ScalarField(grid, grid.node_positions()[:, 0] - 0.5)
    mesh = marching_cubes(phi, 0.0)
    assert np.max(np.abs(mesh.vertices[:, 0] - 0.5)) < 1e-6
    # interior x < 0.5, so faces point toward +x
    assert np.all(mesh.face_normals[:, 0] > 0.99)


def test_marching_cubes_without_crossing_raises():
    phi = ScalarField(UNIT_GRID, np.ones(UNIT_GRID.node_shape))
    with pytest.raises(EmptyMeshError):
        marching_cubes(phi, 0.0)


def test_screening_is_scaled_by_occupied_cells():
    points = np.array([[1.0, 1.0, 1.0], [1.25, 1.0, 1.0], [3.5, 3.5, 3.5]])
    block = screening_term(UNIT_GRID, points, 4.0)
    interp = UNIT_GRID.interpolation_matrix(points)
    expected = 4.0 * 2 / 3 * (interp.T @ interp)
    assert abs(block - expected).max() < 1e-15
    assert block.shape == (UNIT_GRID.node_count, UNIT_GRID.node_count)


@pytest.mark.slow
def test_sphere_iso_surface_at_full_resolution():
    cloud = sphere_cloud(60000, 0.1)
    grid = VoxelGrid.for_cloud(cloud, 128)
    phi = solve_screened_poisson(splat_normals(cloud, grid), cloud, screening_weight=4.0, cg_tol=1e-6, cg_max_iters=8000)
    mesh = marching_cubes(phi, choose_isovalue(phi, cloud))
    radii = np.linalg.norm(mesh.vertices, axis=1)
    assert max(grid.dims) >= 127
    assert np.sqrt(np.mean((radii - 0.1) ** 2)) < grid.spacing
    assert mesh.is_watertight
