"""Triangle meshes: closed-surface tests, inside/outside classification, OBJ I/O."""

from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property

import numba
import numpy as np
from scipy.spatial import ConvexHull


class MeshError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class TriMesh:
    vertices: np.ndarray  # (V, 3)
    triangles: np.ndarray  # (T, 3) int

    def __post_init__(self):
        object.__setattr__(self, "vertices", np.ascontiguousarray(self.vertices, dtype=np.float64))
        object.__setattr__(self, "triangles", np.ascontiguousarray(self.triangles, dtype=np.int64))

    @cached_property
    def face_normals(self) -> np.ndarray:
        v = self.vertices[self.triangles]
        return np.cross(v[:, 1] - v[:, 0], v[:, 2] - v[:, 0])

    @cached_property
    def areas(self) -> np.ndarray:
        return 0.5 * np.linalg.norm(self.face_normals, axis=1)

    @cached_property
    def vertex_normals(self) -> np.ndarray:
        n = np.zeros_like(self.vertices)
        for k in range(3):
            np.add.at(n, self.triangles[:, k], self.face_normals)
        norm = np.linalg.norm(n, axis=1, keepdims=True)
        return n / np.where(norm > 0, norm, 1.0)

    def open_edges(self) -> np.ndarray:
        """Directed edges lacking an opposite twin (empty for a closed, oriented mesh)."""
        tri = self.triangles
        e = np.concatenate([tri[:, [0, 1]], tri[:, [1, 2]], tri[:, [2, 0]]])
        fwd = {tuple(x) for x in e.tolist()}
        bad = [x for x in fwd if (x[1], x[0]) not in fwd]
        if len(fwd) != len(e):
            # duplicate directed edge: non-manifold or inconsistent winding
            uniq, cnt = np.unique(e, axis=0, return_counts=True)
            bad.extend(map(tuple, uniq[cnt > 1].tolist()))
        return np.array(sorted(bad), dtype=np.int64).reshape(-1, 2)

    def check_watertight(self, name: str = "mesh") -> None:
        bad = self.open_edges()
        if len(bad):
            a, b = bad[0]
            raise MeshError(f"{name} is not watertight: {len(bad)} unmatched edge(s), "
                            f"first at vertices ({a}, {b})")

    def inside_grid(self, origin, h: float, dims) -> np.ndarray:
        """Boolean (nx, ny, nz) occupancy of voxel centers by parity ray casting along +x."""
        origin = np.asarray(origin, dtype=np.float64)
        nx, ny, nz = (int(d) for d in dims)
        toggle = np.zeros((nx + 1, ny, nz), dtype=np.uint8)
        _row_crossings(self.vertices, self.triangles, origin, float(h), nx, ny, nz, toggle)
        return (np.cumsum(toggle[:nx], axis=0) % 2).astype(bool)


@numba.njit(cache=True)
def _owns_edge(ay, az, by, bz):
    # half-open tie rule on shared edges
    dy = by - ay
    dz = bz - az
    return dz < 0.0 or (dz == 0.0 and dy > 0.0)


@numba.njit(cache=True)
def _row_crossings(verts, tris, origin, h, nx, ny, nz, toggle):
    for t in range(tris.shape[0]):
        p0 = verts[tris[t, 0]]
        p1 = verts[tris[t, 1]]
        p2 = verts[tris[t, 2]]
        # orient so the yz-projected area is positive
        area = (p1[1] - p0[1]) * (p2[2] - p0[2]) - (p2[1] - p0[1]) * (p1[2] - p0[2])
        if area == 0.0:
            continue
        if area < 0.0:
            p1, p2 = p2, p1
            area = -area
        ymin = min(p0[1], p1[1], p2[1])
        ymax = max(p0[1], p1[1], p2[1])
        zmin = min(p0[2], p1[2], p2[2])
        zmax = max(p0[2], p1[2], p2[2])
        j0 = max(0, int(np.ceil((ymin - origin[1]) / h - 0.5)))
        j1 = min(ny - 1, int(np.floor((ymax - origin[1]) / h - 0.5)))
        k0 = max(0, int(np.ceil((zmin - origin[2]) / h - 0.5)))
        k1 = min(nz - 1, int(np.floor((zmax - origin[2]) / h - 0.5)))
        for j in range(j0, j1 + 1):
            y = origin[1] + (j + 0.5) * h
            for k in range(k0, k1 + 1):
                z = origin[2] + (k + 0.5) * h
                w0 = (p1[1] - y) * (p2[2] - z) - (p2[1] - y) * (p1[2] - z)
                w1 = (p2[1] - y) * (p0[2] - z) - (p0[1] - y) * (p2[2] - z)
                w2 = (p0[1] - y) * (p1[2] - z) - (p1[1] - y) * (p0[2] - z)
                if w0 < 0.0 or w1 < 0.0 or w2 < 0.0:
                    continue
                if w0 == 0.0 and not _owns_edge(p1[1], p1[2], p2[1], p2[2]):
                    continue
                if w1 == 0.0 and not _owns_edge(p2[1], p2[2], p0[1], p0[2]):
                    continue
                if w2 == 0.0 and not _owns_edge(p0[1], p0[2], p1[1], p1[2]):
                    continue
                x = (w0 * p0[0] + w1 * p1[0] + w2 * p2[0]) / area
                i0 = int(np.ceil((x - origin[0]) / h - 0.5))
                if i0 < 0:
                    i0 = 0
                if i0 <= nx:
                    toggle[i0, j, k] ^= 1


def fibonacci_sphere(n: int) -> np.ndarray:
    i = np.arange(n) + 0.5
    z = 1.0 - 2.0 * i / n
    rho = np.sqrt(np.clip(1.0 - z * z, 0.0, None))
    phi = np.pi * (3.0 - np.sqrt(5.0)) * np.arange(n)
    return np.stack([rho * np.cos(phi), rho * np.sin(phi), z], axis=1)


def sphere_mesh(radius: float, n_vertices: int = 1200, center=(0.0, 0.0, 0.0)) -> TriMesh:
    """Closed, outward-wound sphere from the convex hull of Fibonacci points."""
    pts = fibonacci_sphere(n_vertices)
    hull = ConvexHull(pts)
    tri = hull.simplices.copy()
    # orient outward
    v = pts[tri]
    n = np.cross(v[:, 1] - v[:, 0], v[:, 2] - v[:, 0])
    flip = np.einsum("ij,ij->i", n, v.mean(axis=1)) < 0
    tri[flip] = tri[flip][:, [0, 2, 1]]
    return TriMesh(pts * radius + np.asarray(center, dtype=np.float64), tri)


def read_obj(path) -> TriMesh:
    verts, faces = [], []
    with open(path) as fh:
        for line in fh:
            parts = line.split()
            if not parts:
                continue
            if parts[0] == "v":
                verts.append([float(x) for x in parts[1:4]])
            elif parts[0] == "f":
                idx = [int(p.split("/")[0]) for p in parts[1:]]
                idx = [i - 1 if i > 0 else len(verts) + i for i in idx]
                for k in range(1, len(idx) - 1):
                    faces.append([idx[0], idx[k], idx[k + 1]])
    return TriMesh(np.array(verts, dtype=np.float64).reshape(-1, 3),
                   np.array(faces, dtype=np.int64).reshape(-1, 3))


def write_obj(path, mesh: TriMesh) -> None:
    with open(path, "w") as fh:
        for v in mesh.vertices:
            fh.write(f"v {float(v[0])!r} {float(v[1])!r} {float(v[2])!r}\n")
        for f in mesh.triangles + 1:
            fh.write(f"f {f[0]} {f[1]} {f[2]}\n")
