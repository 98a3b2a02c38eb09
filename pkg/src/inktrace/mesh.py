"""Triangle meshes on a rows x cols grid, with OBJ round-tripping."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np


@dataclass
class SurfaceMesh:
    """A traced sheet as a vertex grid triangulated into a strip.

    vertices : (n, 3) float, voxel units (x, y, z)
    faces    : (m, 3) int vertex indices, consistent orientation
    uv       : optional (n, 2) float flattened coordinates
    rows, cols : grid layout; vertex (r, c) is index ``r * cols + c``
    """

    vertices: np.ndarray
    faces: np.ndarray
    rows: int
    cols: int
    uv: np.ndarray | None = None

    def __post_init__(self):
        self.vertices = np.asarray(self.vertices, dtype=np.float64)
        self.faces = np.asarray(self.faces, dtype=np.intp)
        if self.vertices.ndim != 2 or self.vertices.shape[1] != 3:
            raise ValueError(f"vertices must be (n, 3), got {self.vertices.shape}")
        if self.faces.ndim != 2 or self.faces.shape[1] != 3:
            raise ValueError(f"faces must be (m, 3), got {self.faces.shape}")
        if self.rows * self.cols != len(self.vertices):
            raise ValueError(f"{self.rows}x{self.cols} grid does not match "
                             f"{len(self.vertices)} vertices")
        if len(self.faces) and self.faces.max() >= len(self.vertices):
            raise ValueError("face index out of range")
        if self.uv is not None:
            self.uv = np.asarray(self.uv, dtype=np.float64)
            if self.uv.shape != (len(self.vertices), 2):
                raise ValueError(f"uv must be (n, 2), got {self.uv.shape}")


def strip_faces(rows: int, cols: int) -> np.ndarray:
    """Triangulate a vertex grid: 2*(rows-1)*(cols-1) triangles."""
    r, c = np.meshgrid(np.arange(rows - 1), np.arange(cols - 1), indexing="ij")
    v00 = (r * cols + c).ravel()
    v01 = v00 + 1
    v10 = v00 + cols
    v11 = v10 + 1
    tri_a = np.stack([v00, v10, v01], axis=1)
    tri_b = np.stack([v10, v11, v01], axis=1)
    return np.concatenate([tri_a, tri_b]).reshape(2, -1, 3).transpose(
        1, 0, 2).reshape(-1, 3)


def grid_mesh(vertices: np.ndarray, rows: int, cols: int,
              uv: np.ndarray | None = None) -> SurfaceMesh:
    return SurfaceMesh(vertices=vertices, faces=strip_faces(rows, cols),
                       rows=rows, cols=cols, uv=uv)


def face_normals_areas(vertices: np.ndarray,
                       faces: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Unit face normals and face areas; degenerate faces get zero normal."""
    p = vertices[faces]
    cr = np.cross(p[:, 1] - p[:, 0], p[:, 2] - p[:, 0])
    norm = np.linalg.norm(cr, axis=1)
    areas = 0.5 * norm
    safe = np.where(norm > 0, norm, 1.0)
    return cr / safe[:, None], areas


def vertex_normals(mesh: SurfaceMesh) -> np.ndarray:
    """Area-weighted average of incident face normals, normalized."""
    fn, areas = face_normals_areas(mesh.vertices, mesh.faces)
    vn = np.zeros_like(mesh.vertices)
    w = fn * areas[:, None]
    for k in range(3):
        np.add.at(vn, mesh.faces[:, k], w)
    norm = np.linalg.norm(vn, axis=1)
    return vn / np.where(norm > 0, norm, 1.0)[:, None]


def euler_characteristic(mesh: SurfaceMesh) -> int:
    edges = np.concatenate([mesh.faces[:, [0, 1]], mesh.faces[:, [1, 2]],
                            mesh.faces[:, [2, 0]]])
    edges = np.sort(edges, axis=1)
    n_edges = len(np.unique(edges, axis=0))
    return len(mesh.vertices) - n_edges + len(mesh.faces)


def boundary_vertices(mesh: SurfaceMesh) -> np.ndarray:
    """Indices of vertices on edges used by exactly one face."""
    edges = np.concatenate([mesh.faces[:, [0, 1]], mesh.faces[:, [1, 2]],
                            mesh.faces[:, [2, 0]]])
    edges = np.sort(edges, axis=1)
    uniq, counts = np.unique(edges, axis=0, return_counts=True)
    return np.unique(uniq[counts == 1])


def save_obj(mesh: SurfaceMesh, path) -> None:
    """Write v/vt/f records; grid layout goes into a comment for reload."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    lines = [f"# grid {mesh.rows} {mesh.cols}"]
    for v in mesh.vertices:
        lines.append(f"v {v[0]:.8f} {v[1]:.8f} {v[2]:.8f}")
    has_uv = mesh.uv is not None
    if has_uv:
        for t in mesh.uv:
            lines.append(f"vt {t[0]:.8f} {t[1]:.8f}")
    for f in mesh.faces:
        a, b, c = f + 1
        if has_uv:
            lines.append(f"f {a}/{a} {b}/{b} {c}/{c}")
        else:
            lines.append(f"f {a} {b} {c}")
    path.write_text("\n".join(lines) + "\n")


def load_obj(path) -> SurfaceMesh:
    verts, uvs, faces = [], [], []
    rows = cols = None
    for line in Path(path).read_text().splitlines():
        parts = line.split()
        if not parts:
            continue
        if parts[0] == "#" and len(parts) == 4 and parts[1] == "grid":
            rows, cols = int(parts[2]), int(parts[3])
        elif parts[0] == "v":
            verts.append([float(x) for x in parts[1:4]])
        elif parts[0] == "vt":
            uvs.append([float(x) for x in parts[1:3]])
        elif parts[0] == "f":
            faces.append([int(p.split("/")[0]) - 1 for p in parts[1:4]])
    if rows is None:
        rows, cols = 1, len(verts)
    return SurfaceMesh(
        vertices=np.array(verts, dtype=np.float64),
        faces=np.array(faces, dtype=np.intp).reshape(-1, 3),
        rows=rows, cols=cols,
        uv=np.array(uvs, dtype=np.float64) if uvs else None)
