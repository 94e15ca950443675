"""Independent brute-force oracles for the pair integrals and the complement
weight.  Deliberately avoids the production code paths: the inner integral is
reduced exactly in the radial variable (polar coordinates around each outer
point), and the outer integral uses adaptive triangle subdivision driven by a
two-rule error indicator.  Slow but trustworthy."""

import heapq
import itertools

import numpy as np

_GL_CACHE = {}


def _gl(n):
    if n not in _GL_CACHE:
        x, w = np.polynomial.legendre.leggauss(n)
        _GL_CACHE[n] = (0.5 * (x + 1.0), 0.5 * w)
    return _GL_CACHE[n]


def _tri_area(t):
    return 0.5 * abs(
        (t[1][0] - t[0][0]) * (t[2][1] - t[0][1])
        - (t[1][1] - t[0][1]) * (t[2][0] - t[0][0])
    )


def _hat_coeffs(tri):
    """Affine coefficients (c_k, g_k) with phi_k(y) = c_k + g_k . y on tri."""
    M = np.column_stack([np.ones(3), tri])
    C = np.linalg.inv(M).T  # row k: (c_k, gx_k, gy_k)
    return C[:, 0], C[:, 1:]


def _inner_radial(x, phi_x, cb, gb, tb, s, n_theta=24):
    """Integral over y in tb of K(x-y) (phi_u(x)-phi_u(y)) (phi_v(x)-phi_v(y))
    for all 6 slot pairs, by exact radial moments and adaptive angular
    panels.  phi_x: slot values at x; cb, gb: affine data of the slots on tb
    (zero rows for slots supported only on ta)."""
    # angular panel boundaries: directions of tb's corners from x
    angs = sorted(np.arctan2(tb[k][1] - x[1], tb[k][0] - x[0]) for k in range(3))
    panels = []
    for k in range(3):
        a = angs[k]
        b = angs[(k + 1) % 3] if k < 2 else angs[0] + 2 * np.pi
        if b > a + 1e-15:
            panels.append((a, b))

    A0 = phi_x - (cb + gb @ x)
    # edge data for the vectorized ray clipping (inward normals for CCW)
    ea = tb
    ebv = np.roll(tb, -1, axis=0)
    en = np.column_stack([-(ebv - ea)[:, 1], (ebv - ea)[:, 0]])
    enum = np.einsum("kd,kd->k", en, ea - x)

    def panel_value(a, b, nn):
        gx, gw = _gl(nn)
        th = a + (b - a) * gx
        u = np.column_stack([np.cos(th), np.sin(th)])
        den = u @ en.T                       # (n, 3)
        with np.errstate(divide="ignore", invalid="ignore"):
            rr = enum[None, :] / den
        r_lo = np.where(den > 0, rr, 0.0).max(axis=1, initial=0.0)
        r_hi = np.where(den < 0, rr, np.inf).min(axis=1, initial=np.inf)
        bad = den == 0
        r_hi = np.where((bad & (enum[None, :] > 0)).any(axis=1), r_lo, r_hi)
        valid = r_hi > r_lo
        if not valid.any():
            return np.zeros((6, 6))
        r0 = r_lo[valid]
        r1 = r_hi[valid]
        w_ = (gw * (b - a))[valid]
        uv = u[valid]
        interior = r0 <= 1e-300
        r0s = np.where(interior, 1.0, r0)  # placeholder, masked out below
        mom0 = np.where(interior, 0.0, (r1 ** (-2 * s) - r0s ** (-2 * s)) / (-2 * s))
        if abs(s - 0.5) < 1e-14:
            mom1 = np.where(interior, 0.0, np.log(r1 / r0s))
        else:
            mom1 = (r1 ** (1 - 2 * s) - np.where(interior, 0.0, r0s ** (1 - 2 * s))) / (1 - 2 * s)
        mom2 = (r1 ** (2 - 2 * s) - r0 ** (2 - 2 * s)) / (2 - 2 * s)
        A1 = uv @ gb.T                       # (n, 6)
        A0m = np.where(interior[:, None], 0.0, A0[None, :])
        # interior rays have A0 = 0 analytically; mom1*A0 cross terms vanish
        P00 = np.einsum("n,na,nb->ab", w_ * mom0, A0m, A0m)
        P01 = np.einsum("n,na,nb->ab", w_ * mom1, A0m, A1)
        P11 = np.einsum("n,na,nb->ab", w_ * mom2, A1, A1)
        return P00 - (P01 + P01.T) + P11

    total = np.zeros((6, 6))
    for a, b in panels:
        v1 = panel_value(a, b, n_theta)
        v2 = panel_value(a, b, 2 * n_theta)
        # one refinement if the panel is not settled
        if np.max(np.abs(v2 - v1)) > 1e-11 * max(np.max(np.abs(v2)), 1e-30):
            m = 0.5 * (a + b)
            v2 = panel_value(a, m, 2 * n_theta) + panel_value(m, b, 2 * n_theta)
        total += v2
    return total


def bf_pair_local_matrix(ta, tb, s, tol=1e-6, max_cells=6000):
    """6x6 slot matrix of the pair functional by the polar-reduction oracle.

    Slots: 0-2 hats of ta, 3-5 hats of tb (duplicates on shared vertices).
    """
    ta = np.asarray(ta, float)
    tb = np.asarray(tb, float)
    cb_b, gb_b = _hat_coeffs(tb)
    ca_a, ga_a = _hat_coeffs(ta)
    cb = np.zeros(6)
    gb = np.zeros((6, 2))
    cb[3:] = cb_b
    gb[3:] = gb_b
    # shared hats: a slot of ta that coincides with a vertex of tb is the
    # same global hat, so it is affine on tb as well
    for i in range(3):
        for j in range(3):
            if np.all(ta[i] == tb[j]):
                cb[i] = cb_b[j]
                gb[i] = gb_b[j]

    def phi_slots(x):
        lam = np.linalg.solve(
            np.column_stack([ta[1] - ta[0], ta[2] - ta[0]]), x - ta[0]
        )
        vals = np.zeros(6)
        vals[:3] = (1 - lam.sum(), lam[0], lam[1])
        for i in range(3):
            for j in range(3):
                if np.all(ta[i] == tb[j]):
                    vals[3 + j] = vals[i]
        return vals

    rule_lo = _tri_rule_bary(2)
    rule_hi = _tri_rule_bary(5)

    def cell_values(cell):
        v = np.asarray(cell)
        area = _tri_area(v)

        def integrate(rule):
            bc, w = rule
            out = np.zeros((6, 6))
            for lam, w_ in zip(bc, w):
                x = lam @ v
                out += w_ * _inner_radial(x, phi_slots(x), cb, gb, tb, s)
            return out * area

        lo = integrate(rule_lo)
        hi = integrate(rule_hi)
        return hi, float(np.max(np.abs(hi - lo)))

    heap = []
    counter = itertools.count()
    total = np.zeros((6, 6))
    cells = {}
    val, err = cell_values(ta)
    cells[0] = (ta, val, err)
    heapq.heappush(heap, (-err, next(counter), 0))
    total = val.copy()
    global_err = err
    next_id = 1
    while global_err > tol * max(np.max(np.abs(total)), 1e-30) and len(cells) < max_cells:
        _, _, cid = heapq.heappop(heap)
        if cid not in cells:
            continue
        v, val, err = cells.pop(cid)
        total -= val
        global_err -= err
        m01, m12, m20 = 0.5 * (v[0] + v[1]), 0.5 * (v[1] + v[2]), 0.5 * (v[2] + v[0])
        for child in (
            np.array([v[0], m01, m20]),
            np.array([m01, v[1], m12]),
            np.array([m20, m12, v[2]]),
            np.array([m01, m12, m20]),
        ):
            cval, cerr = cell_values(child)
            cells[next_id] = (child, cval, cerr)
            heapq.heappush(heap, (-cerr, next(counter), next_id))
            next_id += 1
            total += cval
            global_err += cerr
    return total


def _tri_rule_bary(deg):
    if deg == 2:
        bc = np.array([[2 / 3, 1 / 6, 1 / 6], [1 / 6, 2 / 3, 1 / 6], [1 / 6, 1 / 6, 2 / 3]])
        w = np.full(3, 1 / 3)
    else:
        bc = [[1 / 3, 1 / 3, 1 / 3]]
        w = [0.225]
        for a, b, ww in (
            (0.059715871789770, 0.470142064105115, 0.132394152788506),
            (0.797426985353087, 0.101286507323456, 0.125939180544827),
        ):
            bc += [[a, b, b], [b, a, b], [b, b, a]]
            w += [ww] * 3
        bc = np.array(bc)
        w = np.array(w)
    return bc, w


# ---------------------------------------------------------------------------
# complement-weight oracle: 2D quadrature over an annulus plus analytic tail


def _polygon_ray_distance(x, verts, theta):
    """Distance from interior point x to the polygon boundary along each
    direction theta (vectorized over theta); convexity gives one crossing."""
    e = np.roll(verts, -1, axis=0) - verts
    n = np.column_stack([e[:, 1], -e[:, 0]])
    n /= np.linalg.norm(n, axis=1)[:, None]
    d = np.einsum("kd,kd->k", n, verts - x)  # positive for interior x
    u = np.column_stack([np.cos(theta), np.sin(theta)])
    den = u @ n.T
    with np.errstate(divide="ignore"):
        t = d[None, :] / den
    t = np.where(den > 1e-300, t, np.inf)
    return t.min(axis=1)


def bf_omega(x, polygon, s, R_factor=8.0, n_ang=128, n_gauss=6):
    """omega(x) by brute-force quadrature over the annulus between the
    polygon and B_R(x), plus the analytic tail pi R^(-2s) / s.

    Polar product cells around x; the single layer of cells straddling the
    polygon boundary keeps 2D quadrature in the angle but integrates the
    radial power exactly from the boundary crossing.  Doubling R must leave
    the value unchanged (the tail is exact), which callers can use as the
    R-independence check."""
    x = np.asarray(x, float)
    verts = polygon.vertices
    R = R_factor * float(np.max(np.linalg.norm(verts - x, axis=1)))
    delta = float(polygon.boundary_distance(x[None, :])[0])
    r0 = max(0.45 * delta, 1e-12)

    gx, gw = _gl(n_gauss)

    # angular panels split at the corner directions
    corner_th = np.sort(np.mod(np.arctan2(verts[:, 1] - x[1], verts[:, 0] - x[0]), 2 * np.pi))
    edges_th = [corner_th[0]]
    for k in range(len(corner_th)):
        a = corner_th[k]
        b = corner_th[(k + 1) % len(corner_th)]
        if k == len(corner_th) - 1:
            b += 2 * np.pi
        m = max(1, int(np.ceil((b - a) / (2 * np.pi / n_ang))))
        edges_th.extend(a + (b - a) * np.arange(1, m + 1) / m)
    edges_th = np.array(edges_th)

    # geometric radial edges from inside the polygon out to R
    r_edges = [r0]
    while r_edges[-1] < R:
        r_edges.append(min(r_edges[-1] * 1.35, R))
    r_edges = np.array(r_edges)

    total = 0.0
    rlo_all = r_edges[:-1]
    rhi_all = r_edges[1:]
    for k in range(len(edges_th) - 1):
        t0, t1 = edges_th[k], edges_th[k + 1]
        th = t0 + (t1 - t0) * gx
        wth = gw * (t1 - t0)
        rb = _polygon_ray_distance(x, verts, th)  # boundary crossing per node
        for j in range(len(th)):
            beyond = rlo_all >= rb[j]
            if beyond.any():
                # genuine 2D product quadrature on the fully exterior cells
                rl = rlo_all[beyond][:, None]
                rh = rhi_all[beyond][:, None]
                rr = rl + (rh - rl) * gx[None, :]
                vals = rr ** (-1.0 - 2.0 * s)
                total += float(wth[j] * (((rh - rl) * vals * gw[None, :]).sum()))
            # the single straddled cell: exact radial piece from the crossing
            cross = (~beyond) & (rhi_all > rb[j])
            if cross.any():
                i = np.flatnonzero(cross)[-1]
                mom = (rhi_all[i] ** (-2.0 * s) - rb[j] ** (-2.0 * s)) / (-2.0 * s)
                total += float(wth[j] * mom)
    return total + np.pi * R ** (-2.0 * s) / s


def bf_full_matrix(mesh, s, rules_cns, tol=2e-5):
    """Full stiffness matrix oracle on a tiny mesh: pair sums via the polar
    oracle plus the complement term via bf_omega on a refined x-rule."""
    from fracfem.mesh import boundary_polygon

    tris = mesh.triangles
    nt = len(tris)
    dof = np.full(mesh.nverts, -1, dtype=int)
    interior = np.flatnonzero(~mesh.boundary_vertex)
    dof[interior] = np.arange(len(interior))
    ndof = len(interior)
    A = np.zeros((ndof, ndof))
    pts = mesh.vertices
    swap = np.array([3, 4, 5, 0, 1, 2])
    for ta in range(nt):
        for tb in range(ta, nt):
            M = bf_pair_local_matrix(pts[tris[ta]], pts[tris[tb]], s, tol=tol)
            orderings = [(ta, tb, M)]
            if tb != ta:
                orderings.append((tb, ta, M[np.ix_(swap, swap)]))
            for t1, t2, MM in orderings:
                slot_dofs = np.concatenate([dof[tris[t1]], dof[tris[t2]]])
                # union de-duplication: slots of t2 coinciding with t1's
                dup = np.zeros(6, dtype=bool)
                for j in range(3):
                    for i in range(3):
                        if tris[t1][i] == tris[t2][j]:
                            dup[3 + j] = True
                for a in range(6):
                    if dup[a] or slot_dofs[a] < 0:
                        continue
                    for b in range(6):
                        if dup[b] or slot_dofs[b] < 0:
                            continue
                        A[slot_dofs[a], slot_dofs[b]] += MM[a, b]
    poly = boundary_polygon(mesh)
    # complement: refined symmetric rule with the annulus-oracle omega
    bc, w = _tri_rule_bary(5)
    for t in range(nt):
        v = pts[tris[t]]
        m01, m12, m20 = 0.5 * (v[0] + v[1]), 0.5 * (v[1] + v[2]), 0.5 * (v[2] + v[0])
        for sub in (
            np.array([v[0], m01, m20]),
            np.array([m01, v[1], m12]),
            np.array([m20, m12, v[2]]),
            np.array([m01, m12, m20]),
        ):
            area = _tri_area(sub)
            for lam, w_ in zip(bc, w):
                xq = lam @ sub
                om = bf_omega(xq, poly, s)
                lam_parent = np.linalg.solve(
                    np.column_stack([v[1] - v[0], v[2] - v[0]]), xq - v[0]
                )
                bary = np.array([1 - lam_parent.sum(), lam_parent[0], lam_parent[1]])
                for i in range(3):
                    di = dof[tris[t][i]]
                    if di < 0:
                        continue
                    for j in range(3):
                        dj = dof[tris[t][j]]
                        if dj >= 0:
                            A[di, dj] += 2.0 * w_ * area * om * bary[i] * bary[j]
    return 0.5 * rules_cns * A
