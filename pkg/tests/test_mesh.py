import numpy as np
import pytest

from geometry.mesh import TriangleMesh
from geometry.motion import RigidMotion
from geometry.synth import box_mesh, icosphere
from tests.conftest import angle_deg


def test_rejects_repeated_vertex_in_face():
    with pytest.raises(ValueError):
        TriangleMesh(np.eye(3), [[0, 0, 1]])


def test_rejects_out_of_range_index():
    with pytest.raises(ValueError):
        TriangleMesh(np.eye(3), [[0, 1, 3]])


def test_single_triangle_vertex_normals():
    mesh = TriangleMesh([[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0]], [[0, 1, 2]])
    assert np.allclose(mesh.vertex_normals, [[0.0, 0.0, 1.0]] * 3)
    assert mesh.face_areas[0] == pytest.approx(0.5)


def test_cube_corner_normal_is_diagonal():
    vertices = [[1.0, 1.0, 1.0], [1.0, 0.0, 1.0], [1.0, 1.0, 0.0], [0.0, 1.0, 1.0]]
    mesh = TriangleMesh(vertices, [[0, 1, 2], [0, 2, 3], [0, 3, 1]])
    assert np.allclose(mesh.face_normals, np.eye(3))
    assert np.allclose(mesh.vertex_normals[0], np.ones(3) / np.sqrt(3))


def test_icosphere_normals_are_radial():
    mesh = icosphere(0.1, 4)
    assert angle_deg(mesh.vertex_normals, mesh.vertices).max() < 2.0


def test_closed_box_topology():
    mesh = box_mesh(subdivisions=3)
    assert mesh.is_watertight
    assert mesh.euler_characteristic == 2
    assert len(mesh.boundary_edges) == 0


def test_open_box_boundary_is_bottom_loop():
    mesh = box_mesh(subdivisions=3, open_faces=("-z",))
    assert not mesh.is_watertight
    assert len(mesh.boundary_edges) == 12
    assert np.all(mesh.vertices[mesh.boundary_vertices, 2] == 0.0)


def test_split_creases_makes_vertex_normals_match_faces():
    mesh = box_mesh(subdivisions=2, split_creases=True)
    per_corner = mesh.vertex_normals[mesh.faces]
    assert np.allclose(per_corner, mesh.face_normals[:, None, :])


def test_flipped_reverses_face_normals():
    mesh = icosphere(1.0, 1)
    assert np.allclose(mesh.flipped().face_normals, -mesh.face_normals)


def test_transformed_moves_vertices_only():
    mesh = icosphere(1.0, 1)
    moved = mesh.transformed(RigidMotion.from_translation([1.0, 2.0, 3.0]))
    assert np.array_equal(moved.faces, mesh.faces)
    assert np.allclose(moved.vertices - mesh.vertices, [1.0, 2.0, 3.0])


def test_compacted_drops_unreferenced_vertices():
    mesh = TriangleMesh([[9.0, 9.0, 9.0], [0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0]], [[1, 2, 3]])
    compact = mesh.compacted()
    assert len(compact.vertices) == 3
    assert compact.faces.tolist() == [[0, 1, 2]]


def test_concatenate_offsets_faces():
    a = icosphere(1.0, 0)
    b = icosphere(1.0, 0, center=(5.0, 0.0, 0.0))
    both = TriangleMesh.concatenate([a, b])
    assert len(both.faces) == 40
    assert both.faces[20:].min() == 12
    assert both.euler_characteristic == 4


def test_degenerate_face_count():
    mesh = TriangleMesh([[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [2.0, 0.0, 0.0], [0.0, 1.0, 0.0]], [[0, 1, 2], [0, 1, 3]])
    assert mesh.degenerate_face_count == 1
    assert np.array_equal(mesh.face_normals[0], np.zeros(3))
