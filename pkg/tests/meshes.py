"""Small fixed meshes used across the test suite."""

import numpy as np

from fracfem.mesh import TriangleMesh


def fan_square():
    """Unit square split into 4 triangles from the center: one interior dof."""
    verts = np.array(
        [[0.0, 0.0], [1.0, 0.0], [1.0, 1.0], [0.0, 1.0], [0.5, 0.5]]
    )
    tris = np.array([[0, 1, 4], [1, 2, 4], [2, 3, 4], [3, 0, 4]], dtype=np.int32)
    bnd = np.array([True, True, True, True, False])
    return TriangleMesh(verts, tris, bnd, h=1.0, mu=1.0)


def structured_square(n=2, side=1.0):
    """(n+1)^2 grid of the square, 2 n^2 right triangles."""
    xs = np.linspace(0.0, side, n + 1)
    vx, vy = np.meshgrid(xs, xs, indexing="ij")
    verts = np.column_stack([vx.ravel(), vy.ravel()])
    tris = []
    for i in range(n):
        for j in range(n):
            v00 = i * (n + 1) + j
            v10 = (i + 1) * (n + 1) + j
            v01 = v00 + 1
            v11 = v10 + 1
            tris.append([v00, v10, v11])
            tris.append([v00, v11, v01])
    bnd = (
        (verts[:, 0] == 0.0)
        | (verts[:, 0] == side)
        | (verts[:, 1] == 0.0)
        | (verts[:, 1] == side)
    )
    return TriangleMesh(
        verts, np.array(tris, dtype=np.int32), bnd, h=side / n, mu=1.0
    )


def two_triangle_square():
    """Unit square split along the diagonal; no interior vertices."""
    verts = np.array([[0.0, 0.0], [1.0, 0.0], [1.0, 1.0], [0.0, 1.0]])
    tris = np.array([[0, 1, 2], [0, 2, 3]], dtype=np.int32)
    bnd = np.ones(4, dtype=bool)
    return TriangleMesh(verts, tris, bnd, h=1.0, mu=1.0)


def equilateral_fan():
    """Regular hexagon fan: 6 equilateral triangles around one interior
    vertex, edge length 1."""
    th = np.pi * np.arange(6) / 3.0
    ring = np.column_stack([np.cos(th), np.sin(th)])
    verts = np.vstack([[0.0, 0.0], ring])
    tris = np.array(
        [[0, 1 + k, 1 + (k + 1) % 6] for k in range(6)], dtype=np.int32
    )
    bnd = np.array([False] + [True] * 6)
    return TriangleMesh(verts, tris, bnd, h=1.0, mu=1.0)
