"""
PLY and OBJ readers and writers for oriented clouds and triangle meshes.
"""

from pathlib import Path

import numpy as np
from plyfile import PlyData, PlyElement

from geometry.mesh import TriangleMesh
from geometry.rgbd import OrientedPointCloud
from utils.errors import ParseError
from utils.logger import get_logger

logger = get_logger(__name__)

CLOUD_FIELDS = [("x", "f8"), ("y", "f8"), ("z", "f8"), ("nx", "f8"), ("ny", "f8"), ("nz", "f8")]
COLOR_FIELDS = [("red", "u1"), ("green", "u1"), ("blue", "u1")]


def _read_ply(path: Path) -> PlyData:
    try:
        return PlyData.read(str(path))
    except FileNotFoundError:
        raise
    except Exception as e:
        raise ParseError(path, f"invalid PLY: {e}") from e


def write_cloud_ply(path: str | Path, cloud: OrientedPointCloud, binary: bool = True) -> None:
    """Write x y z nx ny nz (and red green blue when the cloud has colors)."""
    fields = CLOUD_FIELDS + (COLOR_FIELDS if cloud.colors is not None else [])
    vertex = np.empty(len(cloud), dtype=fields)
    for k, name in enumerate("xyz"):
        vertex[name] = cloud.points[:, k]
        vertex["n" + name] = cloud.normals[:, k]
    if cloud.colors is not None:
        for k, name in enumerate(("red", "green", "blue")):
            vertex[name] = cloud.colors[:, k]
    PlyData([PlyElement.describe(vertex, "vertex")], text=not binary).write(str(path))
    logger.debug(f"Wrote {len(cloud)} points to {path}")


def read_ply_points(path: str | Path) -> np.ndarray:
    """Vertex positions of any PLY file as (N,3)."""
    path = Path(path)
    vertex = _vertex_element(_read_ply(path), path)
    return np.column_stack([np.asarray(vertex[name], dtype=np.float64) for name in "xyz"])


def _vertex_element(ply: PlyData, path: Path):
    if "vertex" not in ply:
        raise ParseError(path, "no vertex element")
    vertex = ply["vertex"].data
    missing = [name for name in "xyz" if name not in vertex.dtype.names]
    if missing:
        raise ParseError(path, f"vertex element lacks {', '.join(missing)}")
    return vertex


def read_cloud_ply(path: str | Path) -> OrientedPointCloud:
    """
    Read an oriented cloud; normals are renormalized to unit length.

    Raises:
        ParseError: If the file lacks normals or holds zero-length normals
    """
    path = Path(path)
    vertex = _vertex_element(_read_ply(path), path)
    names = vertex.dtype.names
    if not all(n in names for n in ("nx", "ny", "nz")):
        raise ParseError(path, "vertex element has no nx ny nz normals")
    points = np.column_stack([np.asarray(vertex[n], dtype=np.float64) for n in "xyz"])
    normals = np.column_stack([np.asarray(vertex[n], dtype=np.float64) for n in ("nx", "ny", "nz")])
    norms = np.linalg.norm(normals, axis=1)
    if np.any(norms == 0):
        raise ParseError(path, f"{int(np.count_nonzero(norms == 0))} zero-length normals")
    colors = None
    if all(n in names for n in ("red", "green", "blue")):
        colors = np.column_stack([np.asarray(vertex[n]) for n in ("red", "green", "blue")])
    return OrientedPointCloud(points, normals / norms[:, None], colors)


def write_mesh_ply(path: str | Path, mesh: TriangleMesh, binary: bool = True) -> None:
    vertex = np.empty(len(mesh.vertices), dtype=[("x", "f8"), ("y", "f8"), ("z", "f8")])
    for k, name in enumerate("xyz"):
        vertex[name] = mesh.vertices[:, k]
    face = np.empty(len(mesh.faces), dtype=[("vertex_indices", "i4", (3,))])
    face["vertex_indices"] = mesh.faces
    PlyData([PlyElement.describe(vertex, "vertex"), PlyElement.describe(face, "face")], text=not binary).write(str(path))
    logger.debug(f"Wrote mesh with {len(mesh.vertices)} vertices and {len(mesh.faces)} faces to {path}")


def _fan(polygon: list[int]) -> list[list[int]]:
    return [[polygon[0], polygon[k], polygon[k + 1]] for k in range(1, len(polygon) - 1)]


def _read_mesh_ply(path: Path) -> TriangleMesh:
    ply = _read_ply(path)
    vertex = _vertex_element(ply, path)
    vertices = np.column_stack([np.asarray(vertex[n], dtype=np.float64) for n in "xyz"])
    if "face" not in ply:
        raise ParseError(path, "no face element")
    face = ply["face"].data
    key = next((k for k in ("vertex_indices", "vertex_index") if k in face.dtype.names), None)
    if key is None:
        raise ParseError(path, "face element has no vertex_indices list")
    faces = []
    for polygon in face[key]:
        faces.extend(_fan([int(i) for i in polygon]))
    try:
        return TriangleMesh(vertices, np.asarray(faces, dtype=np.int64).reshape(-1, 3))
    except ValueError as e:
        raise ParseError(path, str(e)) from e


def _read_mesh_obj(path: Path) -> TriangleMesh:
    vertices, faces = [], []
    with open(path, encoding="utf-8") as f:
        for line_no, line in enumerate(f, start=1):
            parts = line.split("#", 1)[0].split()
            if not parts:
                continue
            try:
                if parts[0] == "v":
                    vertices.append([float(p) for p in parts[1:4]])
                    if len(vertices[-1]) != 3:
                        raise ValueError("vertex needs 3 coordinates")
                elif parts[0] == "f":
                    # "f a/b/c ..." keeps the position index; negative indices count from the end
                    indices = [int(p.split("/")[0]) for p in parts[1:]]
                    if len(indices) < 3:
                        raise ValueError("face needs at least 3 vertices")
                    polygon = [i - 1 if i > 0 else len(vertices) + i for i in indices]
                    faces.extend(_fan(polygon))
            except ValueError as e:
                raise ParseError(path, str(e), line_no) from e
    try:
        return TriangleMesh(np.asarray(vertices, dtype=np.float64).reshape(-1, 3), np.asarray(faces, dtype=np.int64).reshape(-1, 3))
    except ValueError as e:
        raise ParseError(path, str(e)) from e


def write_mesh_obj(path: str | Path, mesh: TriangleMesh) -> None:
    with open(path, "w", encoding="utf-8") as f:
        f.write(f"# {len(mesh.vertices)} vertices, {len(mesh.faces)} faces\n")
        for x, y, z in mesh.vertices:
            f.write(f"v {float(x)!r} {float(y)!r} {float(z)!r}\n")
        for a, b, c in mesh.faces + 1:
            f.write(f"f {a} {b} {c}\n")


def read_mesh(path: str | Path) -> TriangleMesh:
    """Read a PLY or OBJ triangle mesh; polygons are fan-triangulated."""
    path = Path(path)
    suffix = path.suffix.lower()
    if suffix == ".ply":
        return _read_mesh_ply(path)
    if suffix == ".obj":
        return _read_mesh_obj(path)
    raise ParseError(path, f"unsupported mesh format {suffix or '(none)'}")


def write_mesh(path: str | Path, mesh: TriangleMesh, binary: bool = True) -> None:
    path = Path(path)
    if path.suffix.lower() == ".obj":
        write_mesh_obj(path, mesh)
    else:
        write_mesh_ply(path, mesh, binary=binary)
