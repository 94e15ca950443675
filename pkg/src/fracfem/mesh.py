"""Graded conforming triangulations of convex polygons.

Meshes are built by size-field-driven longest-edge bisection from a coarse
fan triangulation.  The target local size is

    ell(x) = h * max(dist(x, boundary), h**mu) ** ((mu - 1) / mu),

which makes elements whose first ring touches the boundary scale like h**mu
while interior elements scale like h * d**((mu-1)/mu) with d their distance
to the boundary.  For disk domains, new boundary vertices are snapped onto
the circle, so the effective domain is an inscribed polygon whose boundary
segments match the boundary element size.
"""

from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "Polygon",
    "TriangleMesh",
    "StarIndex",
    "disk_domain",
    "square_domain",
    "regular_polygon",
    "build_graded_mesh",
    "build_star_index",
    "maximal_ball",
    "mesh_stats",
    "save_mesh",
    "load_mesh",
    "boundary_polygon",
]


@dataclass
class Polygon:
    """Convex polygon with counterclockwise vertices.

    If ``circle`` is set (center_x, center_y, radius), the polygon is treated
    as an inscribed approximation of that circle: mesh refinement snaps new
    boundary vertices onto the circle and boundary distances are measured to
    the circle.
    """

    vertices: np.ndarray
    circle: tuple | None = None

    def __post_init__(self):
        v = np.asarray(self.vertices, dtype=np.float64)
        if v.ndim != 2 or v.shape[1] != 2 or len(v) < 3:
            raise ValueError("polygon needs at least 3 planar vertices")
        e = np.roll(v, -1, axis=0) - v
        lens = np.linalg.norm(e, axis=1)
        cross = e[:, 0] * np.roll(e, -1, axis=0)[:, 1] - e[:, 1] * np.roll(e, -1, axis=0)[:, 0]
        if np.any(lens < 1e-14):
            raise ValueError("degenerate polygon: repeated vertices")
        # collinear boundary vertices are allowed (mesh loops contain them)
        if np.any(cross < -1e-12 * lens.max() ** 2):
            raise ValueError("polygon must be convex and counterclockwise")
        self.vertices = v

    @property
    def nedges(self):
        return len(self.vertices)

    def centroid(self):
        return self.vertices.mean(axis=0)

    def area(self):
        v = self.vertices
        w = np.roll(v, -1, axis=0)
        return 0.5 * np.sum(v[:, 0] * w[:, 1] - w[:, 0] * v[:, 1])

    def inradius(self):
        """Distance from the centroid to the boundary (lower bound on the
        largest inscribed circle through the centroid)."""
        return float(self.boundary_distance(self.centroid()[None, :])[0])

    def boundary_distance(self, points):
        """Unsigned distance from interior points to the boundary."""
        points = np.atleast_2d(np.asarray(points, dtype=np.float64))
        if self.circle is not None:
            cx, cy, r = self.circle
            return r - np.hypot(points[:, 0] - cx, points[:, 1] - cy)
        return _dist_to_segments(points, self.vertices, np.roll(self.vertices, -1, axis=0))

    def contains(self, points, tol=0.0):
        points = np.atleast_2d(np.asarray(points, dtype=np.float64))
        v = self.vertices
        e = np.roll(v, -1, axis=0) - v
        n = np.column_stack([e[:, 1], -e[:, 0]])  # outward normals (CCW)
        d = (points[:, None, :] - v[None, :, :]) * n[None, :, :]
        return np.all(d.sum(axis=2) <= tol, axis=1)


def _dist_to_segments(points, a, b):
    ab = b - a
    ab2 = np.maximum((ab * ab).sum(axis=1), 1e-300)
    ap = points[:, None, :] - a[None, :, :]
    t = np.clip((ap * ab[None, :, :]).sum(axis=2) / ab2[None, :], 0.0, 1.0)
    proj = a[None, :, :] + t[:, :, None] * ab[None, :, :]
    d = np.linalg.norm(points[:, None, :] - proj, axis=2)
    return d.min(axis=1)


def regular_polygon(m, radius=1.0, center=(0.0, 0.0)):
    th = 2.0 * np.pi * np.arange(m) / m
    v = np.column_stack([center[0] + radius * np.cos(th), center[1] + radius * np.sin(th)])
    return Polygon(v)


def disk_domain(radius=1.0, center=(0.0, 0.0), coarse_segments=16):
    """Unit-disk style domain: coarse inscribed polygon plus snap circle."""
    p = regular_polygon(coarse_segments, radius=radius, center=center)
    p.circle = (center[0], center[1], radius)
    return p


def square_domain(side=1.0, center=(0.0, 0.0)):
    s = 0.5 * side
    v = np.array(
        [
            [center[0] - s, center[1] - s],
            [center[0] + s, center[1] - s],
            [center[0] + s, center[1] + s],
            [center[0] - s, center[1] + s],
        ]
    )
    return Polygon(v)


@dataclass
class TriangleMesh:
    """Conforming triangulation with boundary flags and grading metadata."""

    vertices: np.ndarray          # (nv, 2)
    triangles: np.ndarray         # (nt, 3) int32, positively oriented
    boundary_vertex: np.ndarray   # (nv,) bool
    h: float = 0.0
    mu: float = 1.0
    circle: tuple | None = None   # boundary-on-circle metadata, or None

    def __post_init__(self):
        self.vertices = np.ascontiguousarray(self.vertices, dtype=np.float64)
        self.triangles = np.ascontiguousarray(self.triangles, dtype=np.int32)
        self.boundary_vertex = np.asarray(self.boundary_vertex, dtype=bool)
        self._geom = None

    @property
    def nverts(self):
        return len(self.vertices)

    @property
    def ntris(self):
        return len(self.triangles)

    @property
    def ndof(self):
        return int(np.count_nonzero(~self.boundary_vertex))

    def interior_vertices(self):
        return np.flatnonzero(~self.boundary_vertex)

    def _geometry(self):
        if self._geom is None:
            p = self.vertices[self.triangles]  # (nt, 3, 2)
            e0 = p[:, 1] - p[:, 0]
            e1 = p[:, 2] - p[:, 1]
            e2 = p[:, 0] - p[:, 2]
            areas = 0.5 * (e0[:, 0] * (-e2[:, 1]) - e0[:, 1] * (-e2[:, 0]))
            lens = np.stack(
                [np.linalg.norm(e0, axis=1), np.linalg.norm(e1, axis=1), np.linalg.norm(e2, axis=1)]
            )
            h_t = lens.max(axis=0)
            rho_t = 4.0 * areas / lens.sum(axis=0)
            cents = p.mean(axis=1)
            self._geom = (areas, h_t, rho_t, cents)
        return self._geom

    @property
    def areas(self):
        return self._geometry()[0]

    @property
    def h_T(self):
        return self._geometry()[1]

    @property
    def rho_T(self):
        return self._geometry()[2]

    @property
    def centroids(self):
        return self._geometry()[3]

    def boundary_edges(self):
        """(nbe, 2) vertex pairs of edges lying on the boundary."""
        edges, counts, _ = _edge_incidence(self.triangles)
        return edges[counts == 1]

    def boundary_distance(self, points):
        """Distance to the mesh boundary (the circle for snapped disks)."""
        points = np.atleast_2d(np.asarray(points, dtype=np.float64))
        if self.circle is not None:
            cx, cy, r = self.circle
            return r - np.hypot(points[:, 0] - cx, points[:, 1] - cy)
        be = self.boundary_edges()
        a = self.vertices[be[:, 0]]
        b = self.vertices[be[:, 1]]
        out = np.empty(len(points))
        # chunked sweep keeps the (npts x nedges) temporaries small
        step = max(1, 2_000_000 // max(len(be), 1))
        for lo in range(0, len(points), step):
            out[lo : lo + step] = _dist_to_segments(points[lo : lo + step], a, b)
        return out

    def size_target(self, points):
        """Grading size field ell at the given points."""
        d = self.boundary_distance(points)
        return grading_size(self.h, self.mu, d)


def grading_size(h, mu, dist):
    return h * np.maximum(dist, h**mu) ** ((mu - 1.0) / mu)


def _edge_incidence(tris):
    """Sorted edge list with per-edge triangle counts and an index map."""
    e = np.vstack([tris[:, [0, 1]], tris[:, [1, 2]], tris[:, [2, 0]]])
    e.sort(axis=1)
    edges, inv, counts = np.unique(e, axis=0, return_inverse=True, return_counts=True)
    return edges, counts, inv.reshape(3, -1).T


class _Builder:
    """Mutable triangulation used during longest-edge bisection."""

    def __init__(self, domain):
        self.domain = domain
        poly = domain.vertices
        c = domain.centroid()
        self.verts = [tuple(c)] + [tuple(p) for p in poly]
        self.is_bnd = [False] + [True] * len(poly)
        m = len(poly)
        self.tris = [(0, 1 + k, 1 + (k + 1) % m) for k in range(m)]
        self.edge_map = {}
        for t, tri in enumerate(self.tris):
            for e in _tri_edges(tri):
                self.edge_map.setdefault(e, []).append(t)

    def longest_edge(self, tri):
        best = None
        for e in _tri_edges(tri):
            pa, pb = self.verts[e[0]], self.verts[e[1]]
            l2 = (pa[0] - pb[0]) ** 2 + (pa[1] - pb[1]) ** 2
            key = (l2, -e[0], -e[1])
            if best is None or key > best[0]:
                best = (key, e)
        return best[1]

    def midpoint(self, e, on_boundary):
        pa, pb = self.verts[e[0]], self.verts[e[1]]
        m = (0.5 * (pa[0] + pb[0]), 0.5 * (pa[1] + pb[1]))
        if on_boundary and self.domain.circle is not None:
            cx, cy, r = self.domain.circle
            dx, dy = m[0] - cx, m[1] - cy
            n = np.hypot(dx, dy)
            m = (cx + r * dx / n, cy + r * dy / n)
        self.verts.append(m)
        self.is_bnd.append(bool(on_boundary))
        return len(self.verts) - 1

    def bisect(self, t):
        """Bisect triangle t at its longest edge, with conformity closure."""
        stack = [t]
        while stack:
            t = stack[-1]
            tri = self.tris[t]
            e = self.longest_edge(tri)
            nbrs = [u for u in self.edge_map[e] if u != t]
            if nbrs and self.longest_edge(self.tris[nbrs[0]]) != e:
                stack.append(nbrs[0])
                continue
            stack.pop()
            mid = self.midpoint(e, on_boundary=not nbrs)
            self._split(t, e, mid)
            if nbrs:
                self._split(nbrs[0], e, mid)

    def _split(self, t, e, mid):
        tri = self.tris[t]
        a, b = e
        c = next(v for v in tri if v not in e)
        # preserve orientation: children inherit the parent's cyclic order
        i = tri.index(a)
        if tri[(i + 1) % 3] == b:
            child1, child2 = (a, mid, c), (mid, b, c)
        else:
            child1, child2 = (mid, a, c), (b, mid, c)
        self._replace(t, child1)
        self._append(child2)

    def _replace(self, t, newtri):
        for e in _tri_edges(self.tris[t]):
            self.edge_map[e].remove(t)
        self.tris[t] = newtri
        for e in _tri_edges(newtri):
            self.edge_map.setdefault(e, []).append(t)

    def _append(self, newtri):
        t = len(self.tris)
        self.tris.append(newtri)
        for e in _tri_edges(newtri):
            self.edge_map.setdefault(e, []).append(t)


def _tri_edges(tri):
    a, b, c = tri
    return (
        (a, b) if a < b else (b, a),
        (b, c) if b < c else (c, b),
        (a, c) if a < c else (c, a),
    )


def build_graded_mesh(domain, h, mu, sigma_max=10.0, max_rounds=200):
    """Construct a boundary-graded conforming triangulation of a convex
    polygon.

    Parameters
    ----------
    domain : Polygon
        Convex domain; use :func:`disk_domain` for (snapped) disk meshes.
    h : float
        Mesh parameter.  Interior elements have size ~ h * d**((mu-1)/mu);
        elements near the boundary have size ~ h**mu.
    mu : float
        Grading strength in [1, 2]; mu = 1 gives a quasi-uniform mesh.
    sigma_max : float
        Shape-regularity bound; construction aborts if exceeded.
    """
    if not (0 < h):
        raise ValueError("h must be positive")
    if not (1.0 <= mu <= 2.0):
        raise ValueError("mu must lie in [1, 2]")
    rin = domain.inradius()
    if h**mu >= 0.5 * rin or h >= rin:
        raise ValueError(
            f"h={h} too large to grade the domain (inradius {rin:.3g}): "
            "fewer than one boundary layer would fit"
        )

    b = _Builder(domain)
    for _ in range(max_rounds):
        verts = np.asarray(b.verts)
        tris = np.asarray(b.tris, dtype=np.int64)
        p = verts[tris]
        cent = p.mean(axis=1)
        hts = np.maximum(
            np.maximum(
                np.linalg.norm(p[:, 0] - p[:, 1], axis=1),
                np.linalg.norm(p[:, 1] - p[:, 2], axis=1),
            ),
            np.linalg.norm(p[:, 2] - p[:, 0], axis=1),
        )
        d = domain.boundary_distance(cent)
        target = grading_size(h, mu, np.maximum(d, 0.0))
        marked = np.flatnonzero(hts > target)
        if len(marked) == 0:
            break
        # visit the largest triangles first; closure bisections may have
        # already replaced a marked slot, so re-check before splitting
        for t in marked[np.argsort(-hts[marked], kind="stable")]:
            t = int(t)
            tri = b.tris[t]
            pa = np.array([b.verts[v] for v in tri])
            ht = max(
                np.hypot(*(pa[0] - pa[1])),
                np.hypot(*(pa[1] - pa[2])),
                np.hypot(*(pa[2] - pa[0])),
            )
            d = float(domain.boundary_distance(pa.mean(axis=0)[None, :])[0])
            if ht > grading_size(h, mu, max(d, 0.0)):
                b.bisect(t)
    else:
        raise RuntimeError("mesh grading did not terminate")

    mesh = TriangleMesh(
        vertices=np.asarray(b.verts),
        triangles=np.asarray(b.tris, dtype=np.int32),
        boundary_vertex=np.asarray(b.is_bnd, dtype=bool),
        h=float(h),
        mu=float(mu),
        circle=domain.circle,
    )
    sigma = float(np.max(mesh.h_T / mesh.rho_T))
    if sigma > sigma_max:
        raise RuntimeError(
            f"shape regularity violated: sigma={sigma:.3g} > sigma_max={sigma_max}"
        )
    return mesh


@dataclass
class StarIndex:
    """Vertex stars, first/second rings, and the interior/boundary element
    partition of a mesh."""

    vertex_tri_ptr: np.ndarray
    vertex_tri_ind: np.ndarray
    ring1: list
    ring2: list
    is_boundary_elem: np.ndarray

    def vertex_star(self, i):
        """Indices of the triangles containing vertex i."""
        return self.vertex_tri_ind[self.vertex_tri_ptr[i] : self.vertex_tri_ptr[i + 1]]


def build_star_index(mesh):
    tris = mesh.triangles
    nv, nt = mesh.nverts, mesh.ntris
    order = np.argsort(tris.ravel(), kind="stable")
    vis = tris.ravel()[order]
    tids = np.repeat(np.arange(nt), 3)[order]
    ptr = np.zeros(nv + 1, dtype=np.int64)
    np.add.at(ptr, vis + 1, 1)
    ptr = np.cumsum(ptr)

    vstars = [tids[ptr[v] : ptr[v + 1]] for v in range(nv)]
    ring1 = []
    for t in range(nt):
        s = np.unique(np.concatenate([vstars[v] for v in tris[t]]))
        ring1.append(s)
    ring2 = []
    for t in range(nt):
        vs = np.unique(tris[ring1[t]].ravel())
        s = np.unique(np.concatenate([vstars[v] for v in vs]))
        ring2.append(s)
    bnd = mesh.boundary_vertex
    is_bnd_elem = np.array(
        [bool(bnd[tris[ring1[t]].ravel()].any()) for t in range(nt)], dtype=bool
    )
    return StarIndex(
        vertex_tri_ptr=ptr,
        vertex_tri_ind=tids,
        ring1=ring1,
        ring2=ring2,
        is_boundary_elem=is_bnd_elem,
    )


def maximal_ball(mesh, star, i):
    """Center and radius of the maximal ball around interior vertex i that is
    contained in the union of its incident triangles."""
    if mesh.boundary_vertex[i]:
        raise ValueError(f"vertex {i} is on the boundary; it has no maximal ball")
    x = mesh.vertices[i]
    rho = np.inf
    for t in star.vertex_star(i):
        tri = mesh.triangles[t]
        opp = [v for v in tri if v != i]
        a, b = mesh.vertices[opp[0]], mesh.vertices[opp[1]]
        rho = min(rho, float(_dist_to_segments(x[None, :], a[None, :], b[None, :])[0]))
    return x.copy(), rho


def mesh_stats(mesh):
    """Shape regularity, size range, dof count and observed grading constants."""
    sigma = float(np.max(mesh.h_T / mesh.rho_T))
    target = mesh.size_target(mesh.centroids)
    ratio = mesh.h_T / target
    return {
        "sigma": sigma,
        "h_max": float(mesh.h_T.max()),
        "h_min": float(mesh.h_T.min()),
        "ndof": mesh.ndof,
        "nverts": mesh.nverts,
        "ntris": mesh.ntris,
        "c1": float(ratio.min()),
        "c2": float(ratio.max()),
        "area": float(mesh.areas.sum()),
    }


def check_conforming(mesh):
    """Edge-hashing conformity check: interior edges shared by exactly two
    triangles, boundary edges by exactly one, all areas positive."""
    if np.any(mesh.areas <= 0):
        return False
    edges, counts, _ = _edge_incidence(mesh.triangles)
    if not np.all((counts == 1) | (counts == 2)):
        return False
    bnd_edges = edges[counts == 1]
    flagged = mesh.boundary_vertex
    return bool(np.all(flagged[bnd_edges.ravel()]))


def boundary_polygon(mesh):
    """Ordered CCW boundary loop of the mesh as a Polygon."""
    be = mesh.boundary_edges()
    # orient each boundary edge CCW using its owning triangle
    edges, counts, tri_edge = _edge_incidence(mesh.triangles)
    bset = {tuple(e) for e in be}
    succ = {}
    for t, tri in enumerate(mesh.triangles):
        for k in range(3):
            a, b = int(tri[k]), int(tri[(k + 1) % 3])
            if (min(a, b), max(a, b)) in bset:
                succ[a] = b
    start = be[0, 0]
    loop = [int(start)]
    while True:
        nxt = succ[loop[-1]]
        if nxt == loop[0]:
            break
        loop.append(nxt)
        if len(loop) > len(succ) + 1:
            raise RuntimeError("boundary loop did not close")
    poly = Polygon(mesh.vertices[loop])
    poly.circle = mesh.circle
    return poly


def save_mesh(mesh, path):
    """Write the plain-text mesh dump (frac-mesh v1)."""
    with open(path, "w") as f:
        f.write(f"frac-mesh v1 {mesh.nverts} {mesh.ntris}\n")
        for (x, y), flag in zip(mesh.vertices, mesh.boundary_vertex):
            f.write(f"{x:.17g} {y:.17g} {int(flag)}\n")
        for i, j, k in mesh.triangles:
            f.write(f"{i} {j} {k}\n")


def load_mesh(path):
    with open(path) as f:
        header = f.readline().split()
        if header[:2] != ["frac-mesh", "v1"]:
            raise ValueError(f"{path}: not a frac-mesh v1 file")
        nv, nt = int(header[2]), int(header[3])
        verts = np.empty((nv, 2))
        flags = np.empty(nv, dtype=bool)
        for i in range(nv):
            x, y, b = f.readline().split()
            verts[i] = (float(x), float(y))
            flags[i] = bool(int(b))
        tris = np.empty((nt, 3), dtype=np.int32)
        for t in range(nt):
            tris[t] = [int(v) for v in f.readline().split()]
    return TriangleMesh(vertices=verts, triangles=tris, boundary_vertex=flags)
