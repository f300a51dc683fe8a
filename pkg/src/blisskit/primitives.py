"""Procedural sphere meshes used as starting surfaces for synthetic bodies."""

from __future__ import annotations

import numpy as np
from scipy.spatial import ConvexHull

from .mesh import TriMesh


def icosphere(subdivisions: int = 2, radius: float = 1.0) -> TriMesh:
    """Subdivided icosahedron projected onto a sphere of the given radius.

    Vertex / face counts per level: 12/20, 42/80, 162/320, 642/1280, 2562/5120.
    """
    phi = (1.0 + np.sqrt(5.0)) / 2.0
    verts = np.array(
        [
            [-1, phi, 0], [1, phi, 0], [-1, -phi, 0], [1, -phi, 0],
            [0, -1, phi], [0, 1, phi], [0, -1, -phi], [0, 1, -phi],
            [phi, 0, -1], [phi, 0, 1], [-phi, 0, -1], [-phi, 0, 1],
        ],
        dtype=np.float64,
    )
    faces = np.array(
        [
            [0, 11, 5], [0, 5, 1], [0, 1, 7], [0, 7, 10], [0, 10, 11],
            [1, 5, 9], [5, 11, 4], [11, 10, 2], [10, 7, 6], [7, 1, 8],
            [3, 9, 4], [3, 4, 2], [3, 2, 6], [3, 6, 8], [3, 8, 9],
            [4, 9, 5], [2, 4, 11], [6, 2, 10], [8, 6, 7], [9, 8, 1],
        ],
        dtype=np.int64,
    )
    for _ in range(subdivisions):
        verts, faces = _subdivide(verts, faces)
    verts /= np.linalg.norm(verts, axis=1, keepdims=True)
    return TriMesh(verts * radius, faces)


def _subdivide(verts: np.ndarray, faces: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    # One loop of 1-to-4 triangle splitting with shared midpoint vertices.
    midpoint_cache: dict[tuple[int, int], int] = {}
    verts_list = list(verts)

    def midpoint(i: int, j: int) -> int:
        key = (i, j) if i < j else (j, i)
        if key not in midpoint_cache:
            midpoint_cache[key] = len(verts_list)
            verts_list.append(0.5 * (verts_list[i] + verts_list[j]))
        return midpoint_cache[key]

    new_faces = []
    for a, b, c in faces:
        ab, bc, ca = midpoint(a, b), midpoint(b, c), midpoint(c, a)
        new_faces.extend([[a, ab, ca], [b, bc, ab], [c, ca, bc], [ab, bc, ca]])
    return np.array(verts_list), np.array(new_faces, dtype=np.int64)


def fibonacci_sphere(n_vertices: int, radius: float = 1.0) -> TriMesh:
    """Sphere triangulated as the convex hull of a Fibonacci point set.

    Gives an (almost) uniform mesh with an exact vertex count; a closed
    sphere-topology hull has 2*n - 4 faces.
    """
    if n_vertices < 12:
        raise ValueError("fibonacci_sphere needs at least 12 vertices")
    k = np.arange(n_vertices, dtype=np.float64)
    golden = (1.0 + np.sqrt(5.0)) / 2.0
    z = 1.0 - (2.0 * k + 1.0) / n_vertices
    theta = 2.0 * np.pi * k / golden
    r_xy = np.sqrt(np.maximum(0.0, 1.0 - z * z))
    pts = np.column_stack([r_xy * np.cos(theta), r_xy * np.sin(theta), z])

    hull = ConvexHull(pts)
    faces = hull.simplices.astype(np.int64)
    # Qhull does not orient simplices consistently; flip to outward normals.
    v = pts[faces]
    normals = np.cross(v[:, 1] - v[:, 0], v[:, 2] - v[:, 0])
    centroids = v.mean(axis=1)
    flip = np.einsum("ij,ij->i", normals, centroids) < 0.0
    faces[flip] = faces[flip][:, [0, 2, 1]]
    return TriMesh(pts * radius, faces)
