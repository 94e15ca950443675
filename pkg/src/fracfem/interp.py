"""Positivity-preserving quasi-interpolation.

Nodal values are averages over the maximal ball around each interior vertex
(contained in the union of its incident triangles); boundary values are zero.
Averaging preserves nonnegativity exactly and reproduces affine functions at
interior vertices because the balls are centered there.
"""

import numpy as np

from fracfem.mesh import maximal_ball
from fracfem.quadrature import gauss_legendre_01

__all__ = ["NodalField", "ball_average", "interpolate", "evaluate_field"]


class NodalField:
    """Piecewise-linear field given by coefficients at interior vertices
    (zero on the boundary)."""

    def __init__(self, mesh, values):
        values = np.asarray(values, dtype=np.float64)
        if len(values) != mesh.ndof:
            raise ValueError("coefficient count does not match interior vertices")
        self.mesh = mesh
        self.values = values

    def vertex_values(self):
        """Values at all mesh vertices (zeros on the boundary)."""
        out = np.zeros(self.mesh.nverts)
        out[self.mesh.interior_vertices()] = self.values
        return out

    def __call__(self, points):
        return evaluate_field(self.mesh, self.vertex_values(), points)


def _ball_rule(q_ball):
    """Polar product rule on the unit disk: q_ball radial x 2 q_ball angular
    Gauss points; weights sum to pi."""
    xr, wr = gauss_legendre_01(q_ball)
    xa, wa = gauss_legendre_01(2 * q_ball)
    th = 2.0 * np.pi * xa
    r = xr[:, None]
    pts = np.stack(
        [r * np.cos(th)[None, :], r * np.sin(th)[None, :]], axis=-1
    ).reshape(-1, 2)
    w = (wr[:, None] * xr[:, None] * (2.0 * np.pi * wa)[None, :]).reshape(-1)
    return pts, w


def ball_average(mesh, star, i, v, q_ball=8):
    """Average of v over the maximal ball of interior vertex i."""
    x, rho = maximal_ball(mesh, star, i)
    pts, w = _ball_rule(q_ball)
    vals = np.asarray(v(x[None, :] + rho * pts), dtype=np.float64)
    return float((w * vals).sum() / np.pi)


def interpolate(mesh, star, v, q_ball=8):
    """Quasi-interpolant of v: ball averages at interior vertices, zero on
    the boundary.  v takes an (n, 2) array of points and returns n values;
    v >= 0 implies all coefficients >= 0 since all weights are positive."""
    interior = mesh.interior_vertices()
    pts, w = _ball_rule(q_ball)
    coeffs = np.empty(len(interior))
    # evaluate in batches to keep the point array moderate
    batch = max(1, 500_000 // len(w))
    for lo in range(0, len(interior), batch):
        idx = interior[lo : lo + batch]
        centers = mesh.vertices[idx]
        rhos = np.array([maximal_ball(mesh, star, int(i))[1] for i in idx])
        allpts = centers[:, None, :] + rhos[:, None, None] * pts[None, :, :]
        vals = np.asarray(v(allpts.reshape(-1, 2)), dtype=np.float64).reshape(
            len(idx), -1
        )
        coeffs[lo : lo + batch] = vals @ w / np.pi
    return NodalField(mesh, coeffs)


def evaluate_field(mesh, vertex_values, points):
    """Evaluate a piecewise-linear field (values at all vertices) at points.

    Points outside the mesh evaluate to zero (the fields extend by zero).
    """
    points = np.atleast_2d(np.asarray(points, dtype=np.float64))
    tri_idx = _locate(mesh, points)
    out = np.zeros(len(points))
    ok = tri_idx >= 0
    if ok.any():
        tris = mesh.triangles[tri_idx[ok]]
        p = mesh.vertices[tris]
        b = _barycentric(p, points[ok])
        out[ok] = np.einsum("nk,nk->n", b, vertex_values[tris])
    return out


def _barycentric(p, x):
    d = np.empty((len(x), 3))
    v0 = p[:, 1] - p[:, 0]
    v1 = p[:, 2] - p[:, 0]
    r = x - p[:, 0]
    det = v0[:, 0] * v1[:, 1] - v0[:, 1] * v1[:, 0]
    l1 = (r[:, 0] * v1[:, 1] - r[:, 1] * v1[:, 0]) / det
    l2 = (v0[:, 0] * r[:, 1] - v0[:, 1] * r[:, 0]) / det
    d[:, 0] = 1.0 - l1 - l2
    d[:, 1] = l1
    d[:, 2] = l2
    return d


def _locate(mesh, points, pad=1e-12):
    """Bucket-grid point location; returns -1 for points in no triangle."""
    grid = _locator_grid(mesh)
    (x0, y0, hx, hy, nx, ny, cell_ptr, cell_tris) = grid
    ix = np.clip(((points[:, 0] - x0) / hx).astype(np.int64), 0, nx - 1)
    iy = np.clip(((points[:, 1] - y0) / hy).astype(np.int64), 0, ny - 1)
    cells = ix * ny + iy
    out = np.full(len(points), -1, dtype=np.int64)
    p = mesh.vertices[mesh.triangles]
    for n in range(len(points)):
        c = cells[n]
        for k in range(cell_ptr[c], cell_ptr[c + 1]):
            t = cell_tris[k]
            b = _barycentric(p[t][None], points[n][None])[0]
            if b.min() >= -1e-10:
                out[n] = t
                break
    return out


def _locator_grid(mesh):
    if getattr(mesh, "_locator", None) is None:
        p = mesh.vertices[mesh.triangles]
        lo = mesh.vertices.min(axis=0) - 1e-12
        hi = mesh.vertices.max(axis=0) + 1e-12
        n = max(8, int(np.sqrt(mesh.ntris)))
        hx = (hi[0] - lo[0]) / n
        hy = (hi[1] - lo[1]) / n
        tmin = p.min(axis=1)
        tmax = p.max(axis=1)
        ix0 = np.clip(((tmin[:, 0] - lo[0]) / hx).astype(np.int64), 0, n - 1)
        ix1 = np.clip(((tmax[:, 0] - lo[0]) / hx).astype(np.int64), 0, n - 1)
        iy0 = np.clip(((tmin[:, 1] - lo[1]) / hy).astype(np.int64), 0, n - 1)
        iy1 = np.clip(((tmax[:, 1] - lo[1]) / hy).astype(np.int64), 0, n - 1)
        buckets = [[] for _ in range(n * n)]
        for t in range(mesh.ntris):
            for i in range(ix0[t], ix1[t] + 1):
                for j in range(iy0[t], iy1[t] + 1):
                    buckets[i * n + j].append(t)
        ptr = np.zeros(n * n + 1, dtype=np.int64)
        for c, bkt in enumerate(buckets):
            ptr[c + 1] = ptr[c] + len(bkt)
        tris = np.concatenate([np.array(b, dtype=np.int64) if b else np.empty(0, np.int64) for b in buckets])
        mesh._locator = (lo[0], lo[1], hx, hy, n, n, ptr, tris)
    return mesh._locator
