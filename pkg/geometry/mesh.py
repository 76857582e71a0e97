"""
Indexed triangle meshes.
"""

from dataclasses import dataclass
from functools import cached_property

import numpy as np

from geometry.motion import RigidMotion


@dataclass(frozen=True)
class TriangleMesh:
    vertices: np.ndarray
    faces: np.ndarray

    def __post_init__(self):
        vertices = np.array(self.vertices, dtype=np.float64, copy=True).reshape(-1, 3)
        faces = np.array(self.faces, dtype=np.int64, copy=True).reshape(-1, 3)
        if len(faces) and (faces.min() < 0 or faces.max() >= len(vertices)):
            raise ValueError(f"face index out of range for {len(vertices)} vertices")
        if np.any((faces[:, 0] == faces[:, 1]) | (faces[:, 1] == faces[:, 2]) | (faces[:, 0] == faces[:, 2])):
            raise ValueError("degenerate face with a repeated vertex index")
        vertices.setflags(write=False)
        faces.setflags(write=False)
        object.__setattr__(self, "vertices", vertices)
        object.__setattr__(self, "faces", faces)

    @classmethod
    def empty(cls) -> "TriangleMesh":
        return cls(np.zeros((0, 3)), np.zeros((0, 3), dtype=np.int64))

    @property
    def is_empty(self) -> bool:
        return len(self.faces) == 0

    @cached_property
    def face_cross(self) -> np.ndarray:
        """(b - a) x (c - a) per face; twice the area times the unit normal."""
        a, b, c = (self.vertices[self.faces[:, k]] for k in range(3))
        return np.cross(b - a, c - a)

    @cached_property
    def face_areas(self) -> np.ndarray:
        return 0.5 * np.linalg.norm(self.face_cross, axis=1)

    @cached_property
    def face_normals(self) -> np.ndarray:
        """Unit face normals; zero for zero-area faces."""
        norms = 2.0 * self.face_areas
        out = np.zeros_like(self.face_cross)
        nonzero = norms > 0
        out[nonzero] = self.face_cross[nonzero] / norms[nonzero, None]
        return out

    @cached_property
    def degenerate_face_count(self) -> int:
        return int(np.count_nonzero(self.face_areas == 0))

    @cached_property
    def _vertex_normal_data(self) -> tuple[np.ndarray, np.ndarray]:
        summed = np.zeros_like(self.vertices)
        for k in range(3):
            np.add.at(summed, self.faces[:, k], self.face_normals)
        norms = np.linalg.norm(summed, axis=1)
        referenced = np.zeros(len(self.vertices), dtype=bool)
        referenced[self.faces.ravel()] = True
        flagged = referenced & (norms <= 1e-12)
        normals = np.zeros_like(summed)
        good = norms > 1e-12
        normals[good] = summed[good] / norms[good, None]
        return normals, flagged

    @property
    def vertex_normals(self) -> np.ndarray:
        """Normalized sum of incident unit face normals; zero where isolated or cancelling."""
        return self._vertex_normal_data[0]

    @property
    def flagged_vertices(self) -> np.ndarray:
        """Mask of referenced vertices whose one-ring normals cancel."""
        return self._vertex_normal_data[1]

    @cached_property
    def _edge_data(self) -> tuple[np.ndarray, np.ndarray]:
        directed = np.concatenate([self.faces[:, [0, 1]], self.faces[:, [1, 2]], self.faces[:, [2, 0]]])
        undirected = np.sort(directed, axis=1)
        if len(undirected) == 0:
            return np.zeros((0, 2), dtype=np.int64), np.zeros(0, dtype=np.int64)
        return np.unique(undirected, axis=0, return_counts=True)

    @property
    def edges(self) -> np.ndarray:
        return self._edge_data[0]

    @property
    def edge_face_counts(self) -> np.ndarray:
        return self._edge_data[1]

    @cached_property
    def boundary_edges(self) -> np.ndarray:
        return self.edges[self.edge_face_counts == 1]

    @cached_property
    def boundary_vertices(self) -> np.ndarray:
        return np.unique(self.boundary_edges.ravel())

    @cached_property
    def is_watertight(self) -> bool:
        return not self.is_empty and bool(np.all(self.edge_face_counts == 2))

    @cached_property
    def euler_characteristic(self) -> int:
        referenced = len(np.unique(self.faces.ravel()))
        return int(referenced - len(self.edges) + len(self.faces))

    @cached_property
    def mean_edge_length(self) -> float:
        if len(self.edges) == 0:
            return 0.0
        return float(np.mean(np.linalg.norm(self.vertices[self.edges[:, 0]] - self.vertices[self.edges[:, 1]], axis=1)))

    def flipped(self) -> "TriangleMesh":
        """Same surface with every face's winding reversed."""
        return TriangleMesh(self.vertices, self.faces[:, [0, 2, 1]])

    def transformed(self, motion: RigidMotion) -> "TriangleMesh":
        return TriangleMesh(motion.apply(self.vertices), self.faces)

    def without_faces(self, mask: np.ndarray) -> "TriangleMesh":
        return TriangleMesh(self.vertices, self.faces[~np.asarray(mask, dtype=bool)]).compacted()

    def compacted(self) -> "TriangleMesh":
        """Drop unreferenced vertices, preserving vertex order."""
        used = np.unique(self.faces.ravel())
        remap = np.full(len(self.vertices), -1, dtype=np.int64)
        remap[used] = np.arange(len(used))
        return TriangleMesh(self.vertices[used], remap[self.faces])

    @staticmethod
    def concatenate(meshes: list["TriangleMesh"]) -> "TriangleMesh":
        offsets = np.cumsum([0] + [len(m.vertices) for m in meshes[:-1]])
        return TriangleMesh(np.concatenate([m.vertices for m in meshes]), np.concatenate([m.faces + o for m, o in zip(meshes, offsets, strict=True)]))
