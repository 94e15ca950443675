"""Stiffness matrix and load vectors for the fractional bilinear form.

The matrix entries are

    A_ij = (C(2,s)/2) * [ sum over triangle pairs of the regularized double
           integral over T x T' ] + C(2,s) * int_Omega phi_i phi_j omega dx,

where omega(x) = int over the complement of |x-y|^(-2-2s) dy is reduced
exactly to a 1D angular integral.  Touching triangle pairs use the
regularizing product rules from :mod:`fracfem.quadrature`; disjoint pairs are
tiered by the separation ratio eta = dist(centroids) / (h_T + h_T'):
a quadratic-moment kernel expansion far out, fixed symmetric rules in a
middle band, and adaptive subdivision for nearly touching pairs.  All loops
are deterministic; the assembled matrix is exactly symmetrized.
"""

import numpy as np
from numba import njit
from scipy.special import gamma as _gamma

from fracfem.mesh import boundary_polygon
from fracfem.quadrature import QuadratureRules, duffy_rule, triangle_rule

__all__ = [
    "normalization_constant",
    "complement_weight",
    "pair_integral",
    "assemble_stiffness",
    "assemble_load",
    "FractionalSystem",
    "save_stiffness",
    "load_stiffness",
]

# depth cap of the near-pair subdivision (leaves evaluated regardless)
MAX_SUBDIV_DEPTH = 10


def normalization_constant(n, s):
    """C(n, s) = 2^(2s) s Gamma(s + n/2) / (pi^(n/2) Gamma(1 - s))."""
    if not 0.0 < s < 1.0:
        raise ValueError(f"fractional order s={s} outside (0, 1)")
    if n not in (1, 2):
        raise ValueError("only dimensions 1 and 2 are supported")
    return float(
        2.0 ** (2 * s) * s * _gamma(s + 0.5 * n) / (np.pi ** (0.5 * n) * _gamma(1.0 - s))
    )


# ---------------------------------------------------------------------------
# complement weight


def complement_weight(x, polygon, s, q_ang=16):
    """omega(x) = integral of |x-y|^(-2-2s) over the complement of the polygon.

    Exact angular reduction for convex polygons: along direction theta the
    radial integral gives r(x,theta)^(-2s)/(2s) with r the distance to the
    boundary; the angular integral is split at the corner directions and
    each smooth arc is integrated by composite Gauss rules.
    """
    x = np.asarray(x, dtype=np.float64).reshape(2)
    v = polygon.vertices
    if not polygon.contains(x[None, :], tol=-1e-14)[0]:
        raise ValueError("complement weight requires a point strictly inside")
    gx, gw = _cached_gauss(q_ang)
    return float(_omega_polygon(x, v, s, gx, gw))


def _cached_gauss(n, _cache={}):
    if n not in _cache:
        x, w = np.polynomial.legendre.leggauss(n)
        _cache[n] = (0.5 * (x + 1.0), 0.5 * w)
    return _cache[n]


@njit(cache=True)
def _omega_polygon(x, verts, s, gx, gw):
    m = len(verts)
    total = 0.0
    for k in range(m):
        ax, ay = verts[k, 0], verts[k, 1]
        bx, by = verts[(k + 1) % m, 0], verts[(k + 1) % m, 1]
        th_a = np.arctan2(ay - x[1], ax - x[0])
        th_b = np.arctan2(by - x[1], bx - x[0])
        # each edge of a convex polygon subtends less than pi from inside;
        # collinear loop vertices give zero-width arcs that are skipped
        width = th_b - th_a
        width -= 2.0 * np.pi * np.floor((width + np.pi) / (2.0 * np.pi))
        if width <= 1e-15:
            continue
        # outward edge normal and offset
        ex, ey = bx - ax, by - ay
        el = np.hypot(ex, ey)
        nx_, ny_ = ey / el, -ex / el
        d = nx_ * (ax - x[0]) + ny_ * (ay - x[1])
        npanel = int(width / (np.pi / 16.0)) + 1
        dtheta = width / npanel
        for p in range(npanel):
            t0 = th_a + p * dtheta
            for q in range(len(gx)):
                th = t0 + dtheta * gx[q]
                c = nx_ * np.cos(th) + ny_ * np.sin(th)
                r = d / c
                total += gw[q] * dtheta * r ** (-2.0 * s)
    return total / (2.0 * s)


@njit(cache=True)
def _omega_disk(rad, dist_c, s, gx, gw):
    """Angular reduction for the circle of radius rad around a point at
    distance dist_c < rad from the center, on graded panels."""
    r2 = dist_c * dist_c
    total = 0.0
    w0 = max(rad - dist_c, 1e-4 * rad)
    lo = 0.0
    hi = min(w0, np.pi)
    while lo < np.pi:
        dt = hi - lo
        for q in range(len(gx)):
            phi = lo + dt * gx[q]
            cphi = np.cos(phi)
            R = -dist_c * cphi + np.sqrt(rad * rad - r2 + r2 * cphi * cphi)
            total += gw[q] * dt * R ** (-2.0 * s)
        lo = hi
        hi = min(2.0 * hi, np.pi)
    return 2.0 * total / (2.0 * s)


@njit(cache=True)
def _omega_disk_corrected(x, cx, cy, rad, s, bseg, bang, lmax, gx, gw):
    """omega for an inscribed polygon of the circle: circle reduction plus
    exact corrections over boundary segments near x (sorted by angle)."""
    dx, dy = x[0] - cx, x[1] - cy
    dist_c = np.hypot(dx, dy)
    total = _omega_disk(rad, dist_c, s, gx, gw) * 2.0 * s
    delta = rad - dist_c
    win = 64.0 * lmax
    if delta < win:
        alpha = np.arctan2(dy, dx)
        halfwin = (2.0 * delta + 256.0 * lmax) / rad
        nseg = len(bang)
        # binary search for the angular window start
        lo_a = alpha - halfwin
        lo = 0
        hi = nseg
        while lo < hi:
            mid = (lo + hi) // 2
            da = bang[mid] - lo_a
            da -= 2.0 * np.pi * np.floor(da / (2.0 * np.pi) + 0.5)
            if da < 0:
                lo = mid + 1
            else:
                hi = mid
        k = lo % nseg
        count = 0
        while count < nseg:
            da = bang[k] - alpha
            da -= 2.0 * np.pi * np.floor(da / (2.0 * np.pi) + 0.5)
            if da > halfwin:
                break
            ax, ay = bseg[k, 0], bseg[k, 1]
            bx, by = bseg[k, 2], bseg[k, 3]
            th_a = np.arctan2(ay - x[1], ax - x[0])
            th_b = np.arctan2(by - x[1], bx - x[0])
            width = th_b - th_a
            width -= 2.0 * np.pi * np.floor((width + np.pi) / (2.0 * np.pi))
            if width <= 1e-15:
                k = (k + 1) % nseg
                count += 1
                continue
            ex, ey = bx - ax, by - ay
            el = np.hypot(ex, ey)
            nx_, ny_ = ey / el, -ex / el
            d = nx_ * (ax - x[0]) + ny_ * (ay - x[1])
            npanel = int(width / (np.pi / 16.0)) + 1
            dtheta = width / npanel
            for p in range(npanel):
                t0 = th_a + p * dtheta
                for q in range(len(gx)):
                    th = t0 + dtheta * gx[q]
                    ct, st = np.cos(th), np.sin(th)
                    c = nx_ * ct + ny_ * st
                    r_seg = d / c
                    # chord length to the circle along the same direction
                    b_ = (x[0] - cx) * ct + (x[1] - cy) * st
                    r_circ = -b_ + np.sqrt(b_ * b_ - dist_c * dist_c + rad * rad)
                    total += gw[q] * dtheta * (
                        r_seg ** (-2.0 * s) - r_circ ** (-2.0 * s)
                    )
            k = (k + 1) % nseg
            count += 1
    return total / (2.0 * s)


@njit(cache=True)
def _omega_many(points, verts, s, gx, gw, use_disk, cx, cy, rad, bseg, bang, lmax):
    out = np.empty(len(points))
    for i in range(len(points)):
        if use_disk:
            out[i] = _omega_disk_corrected(
                points[i], cx, cy, rad, s, bseg, bang, lmax, gx, gw
            )
        else:
            out[i] = _omega_polygon(points[i], verts, s, gx, gw)
    return out


# ---------------------------------------------------------------------------
# single pair integrals (reference implementation, also used by tests)


def _tri_area(t):
    return 0.5 * abs(
        (t[1, 0] - t[0, 0]) * (t[2, 1] - t[0, 1])
        - (t[1, 1] - t[0, 1]) * (t[2, 0] - t[0, 0])
    )


def _match_vertices(ta, tb):
    """Pairs (i, j) of local indices with identical coordinates."""
    shared = []
    for i in range(3):
        for j in range(3):
            if ta[i, 0] == tb[j, 0] and ta[i, 1] == tb[j, 1]:
                shared.append((i, j))
    return shared


def _bary_inside(ta, tb, tol=1e-12):
    """True if any vertex of tb lies strictly inside ta."""
    B = np.array([ta[1] - ta[0], ta[2] - ta[0]]).T
    lam = np.linalg.solve(B, (tb - ta[0]).T).T
    full = np.column_stack([1 - lam.sum(1), lam])
    return bool(np.any(np.all(full > tol, axis=1)))


def _pair_local_matrix(ta, tb, s, rules):
    """6x6 local matrix of int_Ta int_Tb K (phi_a(x)-phi_a(y)) (phi_b(x)-phi_b(y))
    over the slot basis [Ta0, Ta1, Ta2, Tb0, Tb1, Tb2]."""
    ta = np.asarray(ta, dtype=np.float64)
    tb = np.asarray(tb, dtype=np.float64)
    shared = _match_vertices(ta, tb)
    if len(shared) == 3:
        M3 = _eval_pair_rule(ta, rules.co_x, rules.co_y, rules.co_w, s)
        # slots 3-5 duplicate Ta's hats through the vertex matching
        b_to_a = {j: i for i, j in shared}
        slot_of = [0, 1, 2] + [b_to_a[j] for j in range(3)]
        M = np.empty((6, 6))
        for i in range(6):
            for j in range(6):
                M[i, j] = M3[slot_of[i], slot_of[j]]
        return M, "identical"
    if len(shared) == 2:
        (ia1, ib1), (ia2, ib2) = shared
        pa = [ia1, ia2, 3 - ia1 - ia2]
        pb = [ib1, ib2, 3 - ib1 - ib2]
        px, py, w = rules.ed_x, rules.ed_y, rules.ed_w
        case = "edge"
    elif len(shared) == 1:
        ((ia1, ib1),) = shared
        pa = [ia1] + [i for i in range(3) if i != ia1]
        pb = [ib1] + [i for i in range(3) if i != ib1]
        px, py, w = rules.vx_x, rules.vx_y, rules.vx_w
        case = "vertex"
    else:
        if _bary_inside(ta, tb) or _bary_inside(tb, ta):
            raise ValueError(
                "overlapping non-identical triangles: non-conforming input"
            )
        return _disjoint_local_matrix(ta, tb, s, rules), "disjoint"
    M6 = _eval_pair_rule_general(ta[pa], tb[pb], px, py, w, s, shared=len(shared))
    # undo the permutations back to slot order
    M = np.zeros((6, 6))
    idx = np.concatenate([np.argsort(pa), 3 + np.argsort(pb)])
    M = M6[np.ix_(idx, idx)]
    return M, case


def _eval_pair_rule(t, px, py, w, s):
    """3x3 matrix for the identical pair on triangle t."""
    B = np.array([t[1] - t[0], t[2] - t[0]])
    X = t[0] + px @ B
    Y = t[0] + py @ B
    bx = np.column_stack([1 - px.sum(1), px[:, 0], px[:, 1]])
    by = np.column_stack([1 - py.sum(1), py[:, 0], py[:, 1]])
    d = X - Y
    K = (d[:, 0] ** 2 + d[:, 1] ** 2) ** (-1.0 - s)
    dphi = bx - by
    scale = 4.0 * _tri_area(t) ** 2
    return scale * np.einsum("q,qa,qb->ab", w * K, dphi, dphi)


def _eval_pair_rule_general(ta, tb, px, py, w, s, shared):
    """6x6 slot matrix (permuted triangles) for edge/vertex touching pairs.

    Slots 0-2 are ta's hats, 3-5 tb's; shared hats are handled through a
    union basis so they are not double counted, then mirrored back so that
    both duplicate slots carry the full union value."""
    Ba = np.array([ta[1] - ta[0], ta[2] - ta[0]])
    Bb = np.array([tb[1] - tb[0], tb[2] - tb[0]])
    X = ta[0] + px @ Ba
    Y = tb[0] + py @ Bb
    bx = np.column_stack([1 - px.sum(1), px[:, 0], px[:, 1]])
    by = np.column_stack([1 - py.sum(1), py[:, 0], py[:, 1]])
    d = X - Y
    K = (d[:, 0] ** 2 + d[:, 1] ** 2) ** (-1.0 - s)
    # union basis: shared slots are the first `shared` of both triangles
    nu = 6 - shared
    phix = np.zeros((len(w), nu))
    phiy = np.zeros((len(w), nu))
    phix[:, :3] = bx
    phiy[:, :shared] = by[:, :shared]
    phiy[:, 3 : 3 + 3 - shared] = by[:, shared:]
    dphi = phix - phiy
    scale = 4.0 * _tri_area(ta) * _tri_area(tb)
    Mu = scale * np.einsum("q,qa,qb->ab", w * K, dphi, dphi)
    # expand the union matrix to the 6 slots (duplicates replicate rows/cols)
    slot_of = list(range(3)) + list(range(shared)) + list(range(3, nu))
    M = np.zeros((6, 6))
    for i in range(6):
        for j in range(6):
            M[i, j] = Mu[slot_of[i], slot_of[j]]
    return M


def _disjoint_local_matrix(ta, tb, s, rules):
    """Slot matrix for a disjoint pair: separation-banded rules with
    adaptive subdivision for nearly touching pairs."""
    ca, cb = ta.mean(0), tb.mean(0)
    ha = max(np.linalg.norm(ta[1] - ta[0]), np.linalg.norm(ta[2] - ta[1]), np.linalg.norm(ta[0] - ta[2]))
    hb = max(np.linalg.norm(tb[1] - tb[0]), np.linalg.norm(tb[2] - tb[1]), np.linalg.norm(tb[0] - tb[2]))
    d = np.linalg.norm(cb - ca)
    if d <= 0.0 and _tri_area(ta) > 0:
        raise ValueError("overlapping non-identical triangles: non-conforming input")
    eta = d / (ha + hb)
    e_hi, e_mid, e_lo, e_leaf = rules.eta_bands
    if eta >= e_hi:
        rule = (rules.band_hi_pts, rules.band_hi_w)
    elif eta >= e_mid:
        rule = (rules.band_mid_pts, rules.band_mid_w)
    else:
        rule = (rules.band_lo_pts, rules.band_lo_w)
    pts, w = rule
    stack = [(ta, tb, 0)]
    M = np.zeros((6, 6))
    Ba_inv = np.linalg.inv(np.array([ta[1] - ta[0], ta[2] - ta[0]]).T)
    Bb_inv = np.linalg.inv(np.array([tb[1] - tb[0], tb[2] - tb[0]]).T)
    while stack:
        sa, sb, depth = stack.pop()
        ca_, cb_ = sa.mean(0), sb.mean(0)
        ha_ = max(np.linalg.norm(sa[1] - sa[0]), np.linalg.norm(sa[2] - sa[1]), np.linalg.norm(sa[0] - sa[2]))
        hb_ = max(np.linalg.norm(sb[1] - sb[0]), np.linalg.norm(sb[2] - sb[1]), np.linalg.norm(sb[0] - sb[2]))
        d_ = np.linalg.norm(cb_ - ca_)
        if d_ < e_leaf * (ha_ + hb_) and depth < MAX_SUBDIV_DEPTH:
            if ha_ >= hb_:
                m01, m12, m20 = 0.5 * (sa[0] + sa[1]), 0.5 * (sa[1] + sa[2]), 0.5 * (sa[2] + sa[0])
                for child in (
                    np.array([sa[0], m01, m20]),
                    np.array([m01, sa[1], m12]),
                    np.array([m20, m12, sa[2]]),
                    np.array([m01, m12, m20]),
                ):
                    stack.append((child, sb, depth + 1))
            else:
                m01, m12, m20 = 0.5 * (sb[0] + sb[1]), 0.5 * (sb[1] + sb[2]), 0.5 * (sb[2] + sb[0])
                for child in (
                    np.array([sb[0], m01, m20]),
                    np.array([m01, sb[1], m12]),
                    np.array([m20, m12, sb[2]]),
                    np.array([m01, m12, m20]),
                ):
                    stack.append((sa, child, depth + 1))
            continue
        Xa = sa[0] + pts @ np.array([sa[1] - sa[0], sa[2] - sa[0]])
        Xb = sb[0] + pts @ np.array([sb[1] - sb[0], sb[2] - sb[0]])
        ra = (Ba_inv @ (Xa - ta[0]).T).T
        rb = (Bb_inv @ (Xb - tb[0]).T).T
        bxa = np.column_stack([1 - ra.sum(1), ra[:, 0], ra[:, 1]])
        bxb = np.column_stack([1 - rb.sum(1), rb[:, 0], rb[:, 1]])
        dd = Xa[:, None, :] - Xb[None, :, :]
        K = (dd[..., 0] ** 2 + dd[..., 1] ** 2) ** (-1.0 - s)
        WK = (w[:, None] * w[None, :]) * K
        scale = 4.0 * _tri_area(sa) * _tri_area(sb)
        colsum = WK.sum(axis=1)
        rowsum = WK.sum(axis=0)
        M[:3, :3] += scale * np.einsum("q,qa,qb->ab", colsum, bxa, bxa)
        M[3:, 3:] += scale * np.einsum("r,ra,rb->ab", rowsum, bxb, bxb)
        C = scale * np.einsum("qr,qa,rb->ab", WK, bxa, bxb)
        M[:3, 3:] -= C
        M[3:, :3] -= C.T
    return M


def pair_integral(ta, tb, a, b, s, rules=None):
    """Double integral of K(x-y) (phi_a(x)-phi_a(y)) (phi_b(x)-phi_b(y)) over
    the pair (Ta, Tb), for slot bases a, b in 0..5 (0-2 hats of Ta, 3-5 of Tb).

    The rule class is chosen by the contact type of the pair (identical,
    shared edge, shared vertex, or disjoint), which is detected by exact
    coordinate matching as in a conforming mesh.
    """
    if rules is None:
        rules = QuadratureRules(s)
    if rules.s != s:
        raise ValueError("rules were built for a different fractional order")
    M, _ = _pair_local_matrix(np.asarray(ta, float), np.asarray(tb, float), s, rules)
    return float(M[a, b])


# ---------------------------------------------------------------------------
# fast assembly kernels


@njit(cache=True)
def _triangle_moment_arrays(tri_pts, areas):
    """Per-triangle basis moments about the centroid, by exact quadrature of
    the polynomial integrands (degree <= 4)."""
    # degree-4-exact interior rule (6 points) is enough for deg-4 moments?
    # use a degree-5 rule (7 pts) to be safe for the quartic phi*phi*u*u
    nt = len(tri_pts)
    # hardcoded 7-point degree-5 rule (barycentric, weights sum to 1)
    bc = np.empty((7, 3))
    wt = np.empty(7)
    bc[0, 0] = 1.0 / 3.0; bc[0, 1] = 1.0 / 3.0; bc[0, 2] = 1.0 / 3.0
    wt[0] = 0.225
    a1 = 0.059715871789770; b1 = 0.470142064105115
    a2 = 0.797426985353087; b2 = 0.101286507323456
    idx = 1
    for (aa, bb, ww) in ((a1, b1, 0.132394152788506), (a2, b2, 0.125939180544827)):
        bc[idx, 0] = aa; bc[idx, 1] = bb; bc[idx, 2] = bb; wt[idx] = ww; idx += 1
        bc[idx, 0] = bb; bc[idx, 1] = aa; bc[idx, 2] = bb; wt[idx] = ww; idx += 1
        bc[idx, 0] = bb; bc[idx, 1] = bb; bc[idx, 2] = aa; wt[idx] = ww; idx += 1
    P0 = np.empty((nt, 3))
    P1 = np.empty((nt, 3, 2))
    P2 = np.empty((nt, 3, 3))      # (xx, xy, yy) per basis
    m0 = np.empty((nt, 6))         # pair index (i<=j): 00,01,02,11,12,22
    m1 = np.empty((nt, 6, 2))
    M2 = np.empty((nt, 6, 3))
    S2 = np.empty((nt, 3))         # plain second moments (xx, xy, yy)
    pair_i = np.array([0, 0, 0, 1, 1, 2])
    pair_j = np.array([0, 1, 2, 1, 2, 2])
    for t in range(nt):
        ax, ay = tri_pts[t, 0, 0], tri_pts[t, 0, 1]
        bx, by = tri_pts[t, 1, 0], tri_pts[t, 1, 1]
        cx, cy = tri_pts[t, 2, 0], tri_pts[t, 2, 1]
        gx = (ax + bx + cx) / 3.0
        gy = (ay + by + cy) / 3.0
        A = areas[t]
        for k in range(3):
            P0[t, k] = 0.0
            P1[t, k, 0] = 0.0; P1[t, k, 1] = 0.0
            P2[t, k, 0] = 0.0; P2[t, k, 1] = 0.0; P2[t, k, 2] = 0.0
        for p in range(6):
            m0[t, p] = 0.0
            m1[t, p, 0] = 0.0; m1[t, p, 1] = 0.0
            M2[t, p, 0] = 0.0; M2[t, p, 1] = 0.0; M2[t, p, 2] = 0.0
        S2[t, 0] = 0.0; S2[t, 1] = 0.0; S2[t, 2] = 0.0
        for q in range(7):
            l0, l1, l2 = bc[q, 0], bc[q, 1], bc[q, 2]
            x = l0 * ax + l1 * bx + l2 * cx
            y = l0 * ay + l1 * by + l2 * cy
            ux = x - gx
            uy = y - gy
            w = wt[q] * A
            phis = (l0, l1, l2)
            for k in range(3):
                P0[t, k] += w * phis[k]
                P1[t, k, 0] += w * phis[k] * ux
                P1[t, k, 1] += w * phis[k] * uy
                P2[t, k, 0] += w * phis[k] * ux * ux
                P2[t, k, 1] += w * phis[k] * ux * uy
                P2[t, k, 2] += w * phis[k] * uy * uy
            for p in range(6):
                ph = phis[pair_i[p]] * phis[pair_j[p]]
                m0[t, p] += w * ph
                m1[t, p, 0] += w * ph * ux
                m1[t, p, 1] += w * ph * uy
                M2[t, p, 0] += w * ph * ux * ux
                M2[t, p, 1] += w * ph * ux * uy
                M2[t, p, 2] += w * ph * uy * uy
            S2[t, 0] += w * ux * ux
            S2[t, 1] += w * ux * uy
            S2[t, 2] += w * uy * uy
    return P0, P1, P2, m0, m1, M2, S2


@njit(cache=True, inline="always")
def _kernel_derivs(dx, dy, e):
    """K, grad K, Hessian K at z = (dx, dy) for K(z) = |z|^(2e)."""
    r2 = dx * dx + dy * dy
    p0 = r2**e
    p1 = p0 / r2
    p2 = p1 / r2
    g0 = 2.0 * e * p1 * dx
    g1 = 2.0 * e * p1 * dy
    c4 = 4.0 * e * (e - 1.0) * p2
    hxx = 2.0 * e * p1 + c4 * dx * dx
    hxy = c4 * dx * dy
    hyy = 2.0 * e * p1 + c4 * dy * dy
    return p0, g0, g1, hxx, hxy, hyy


@njit(cache=True, inline="always")
def _rule_rule(A, dofs, ta, tb, physA, baryA, wA, physB, baryB, wB, scale, e, loc, cross):
    """Asymmetric product rule on both panels (full point arrays, indexed
    by the pair to avoid per-call views)."""
    nqa = len(wA)
    nqb = len(wB)
    for p in range(6):
        loc[p] = 0.0
    for i in range(3):
        for j in range(3):
            cross[i, j] = 0.0
    for q in range(nqa):
        xq = physA[ta, q, 0]
        yq = physA[ta, q, 1]
        colsum = 0.0
        k0 = 0.0
        k1 = 0.0
        k2 = 0.0
        for r in range(nqb):
            ddx = physB[tb, r, 0] - xq
            ddy = physB[tb, r, 1] - yq
            K = wB[r] * (ddx * ddx + ddy * ddy) ** e
            colsum += K
            k0 += K * baryB[r, 0]
            k1 += K * baryB[r, 1]
            k2 += K * baryB[r, 2]
        wq = wA[q]
        b0 = baryA[q, 0]
        b1 = baryA[q, 1]
        b2 = baryA[q, 2]
        loc[0] += wq * b0 * b0 * colsum
        loc[1] += wq * b0 * b1 * colsum
        loc[2] += wq * b0 * b2 * colsum
        loc[3] += wq * b1 * b1 * colsum
        loc[4] += wq * b1 * b2 * colsum
        loc[5] += wq * b2 * b2 * colsum
        cross[0, 0] += wq * b0 * k0
        cross[0, 1] += wq * b0 * k1
        cross[0, 2] += wq * b0 * k2
        cross[1, 0] += wq * b1 * k0
        cross[1, 1] += wq * b1 * k1
        cross[1, 2] += wq * b1 * k2
        cross[2, 0] += wq * b2 * k0
        cross[2, 1] += wq * b2 * k1
        cross[2, 2] += wq * b2 * k2
    for p in range(6):
        loc[p] *= scale
    for i in range(3):
        for j in range(3):
            cross[i, j] *= scale
    _scatter_rows(A, dofs, ta, tb, loc, cross, 2.0)


@njit(cache=True, inline="always")
def _rule_moment(
    A, dofs, ta, tb, physA, baryA, wA, areaA2, cents, P0, P1, P2, S2, e, loc, cross
):
    """Product rule on panel a, centroid quadratic-moment expansion on b.

    areaA2 = 2 |ta| (the rule weights sum to 1/2); the b moments carry the
    measure of tb already.
    """
    nqa = len(wA)
    for p in range(6):
        loc[p] = 0.0
    for i in range(3):
        for j in range(3):
            cross[i, j] = 0.0
    Ab = P0[tb, 0] + P0[tb, 1] + P0[tb, 2]  # total area of tb
    for q in range(nqa):
        dx = cents[tb, 0] - physA[ta, q, 0]
        dy = cents[tb, 1] - physA[ta, q, 1]
        p0, g0, g1, hxx, hxy, hyy = _kernel_derivs(dx, dy, e)
        # omega_b(x_q) with the second-moment correction
        om = Ab * p0 + 0.5 * (hxx * S2[tb, 0] + 2.0 * hxy * S2[tb, 1] + hyy * S2[tb, 2])
        wq = wA[q]
        b0 = baryA[q, 0]
        b1 = baryA[q, 1]
        b2 = baryA[q, 2]
        wom = wq * om
        loc[0] += wom * b0 * b0
        loc[1] += wom * b0 * b1
        loc[2] += wom * b0 * b2
        loc[3] += wom * b1 * b1
        loc[4] += wom * b1 * b2
        loc[5] += wom * b2 * b2
        # cross: K expanded around cb in the y variable
        for j in range(3):
            kj = (
                p0 * P0[tb, j]
                + g0 * P1[tb, j, 0]
                + g1 * P1[tb, j, 1]
                + 0.5 * (hxx * P2[tb, j, 0] + 2.0 * hxy * P2[tb, j, 1] + hyy * P2[tb, j, 2])
            )
            cross[0, j] += wq * b0 * kj
            cross[1, j] += wq * b1 * kj
            cross[2, j] += wq * b2 * kj
    for p in range(6):
        loc[p] *= areaA2
    for i in range(3):
        for j in range(3):
            cross[i, j] *= areaA2
    _scatter_rows(A, dofs, ta, tb, loc, cross, 2.0)


@njit(cache=True, inline="always")
def _moment_rule(
    A, dofs, ta, tb, cents, m0, m1, M2, P0, P1, P2, physB, baryB, wB, areaB2, e, loc, cross
):
    """Centroid quadratic-moment expansion on panel a, product rule on b."""
    nqb = len(wB)
    for p in range(6):
        loc[p] = 0.0
    for i in range(3):
        for j in range(3):
            cross[i, j] = 0.0
    for r in range(nqb):
        dx = physB[tb, r, 0] - cents[ta, 0]
        dy = physB[tb, r, 1] - cents[ta, 1]
        p0, g0, g1, hxx, hxy, hyy = _kernel_derivs(dx, dy, e)
        wr = wB[r]
        for p in range(6):
            loc[p] += wr * (
                p0 * m0[ta, p]
                - (g0 * m1[ta, p, 0] + g1 * m1[ta, p, 1])
                + 0.5 * (hxx * M2[ta, p, 0] + 2.0 * hxy * M2[ta, p, 1] + hyy * M2[ta, p, 2])
            )
        for i in range(3):
            ki = (
                p0 * P0[ta, i]
                - (g0 * P1[ta, i, 0] + g1 * P1[ta, i, 1])
                + 0.5 * (hxx * P2[ta, i, 0] + 2.0 * hxy * P2[ta, i, 1] + hyy * P2[ta, i, 2])
            )
            wk = wr * ki
            cross[i, 0] += wk * baryB[r, 0]
            cross[i, 1] += wk * baryB[r, 1]
            cross[i, 2] += wk * baryB[r, 2]
    for p in range(6):
        loc[p] *= areaB2
    for i in range(3):
        for j in range(3):
            cross[i, j] *= areaB2
    _scatter_rows(A, dofs, ta, tb, loc, cross, 2.0)


@njit(cache=True, fastmath=False)
def _far_pass(
    A,
    cents,
    hts,
    areas,
    dofs,
    phys4,
    w4,
    bary4,
    phys5,
    w5,
    bary5,
    phys8,
    w8,
    bary8,
    P0,
    P1,
    P2,
    m0,
    m1,
    M2,
    S2,
    tri_pts,
    s,
    r_mom,
    r_4,
    r_5,
    r_8,
    ref4,
    ref5,
    ref8,
    max_depth,
):
    """Row-attributed sweep over ordered disjoint pairs.

    Visiting (ta, tb) adds, to the rows of ta's interior vertices, twice the
    one-sided pair integral; the (tb, ta) visit fills tb's rows, and exact
    symmetrization happens outside.  The rule on each panel is chosen from
    its own separation ratio d / h_T: a centroid expansion with quadratic
    moments beyond r_mom, fixed rules of increasing degree below, and
    one-sided subdivision when a panel is closer than r_8 diameters.
    """
    nt = len(cents)
    e = -1.0 - s
    loc = np.empty(6)
    cross = np.empty((3, 3))
    for ta in range(nt):
        d0, d1, d2_ = dofs[ta, 0], dofs[ta, 1], dofs[ta, 2]
        if d0 < 0 and d1 < 0 and d2_ < 0:
            continue
        cxa, cya = cents[ta, 0], cents[ta, 1]
        ha = hts[ta]
        for tb in range(nt):
            if tb == ta:
                continue
            dx = cents[tb, 0] - cxa
            dy = cents[tb, 1] - cya
            r2 = dx * dx + dy * dy
            hb = hts[tb]
            hmax = max(ha, hb)
            if r2 < 9.0 * (ha + hb) * (ha + hb):
                # possibly touching: handled by the singular passes
                touching = False
                for i in range(3):
                    for j in range(3):
                        if (
                            tri_pts[ta, i, 0] == tri_pts[tb, j, 0]
                            and tri_pts[ta, i, 1] == tri_pts[tb, j, 1]
                        ):
                            touching = True
                if touching:
                    continue
            if r2 >= (r_mom * hmax) * (r_mom * hmax):
                # both panels far relative to their size: pure expansion
                p0, g0, g1, hxx, hxy, hyy = _kernel_derivs(dx, dy, e)
                Ab = areas[tb]
                trHSb = hxx * S2[tb, 0] + 2.0 * hxy * S2[tb, 1] + hyy * S2[tb, 2]
                for p in range(6):
                    loc[p] = (
                        Ab * (p0 * m0[ta, p] - (g0 * m1[ta, p, 0] + g1 * m1[ta, p, 1]))
                        + 0.5
                        * (
                            Ab * (hxx * M2[ta, p, 0] + 2.0 * hxy * M2[ta, p, 1] + hyy * M2[ta, p, 2])
                            + trHSb * m0[ta, p]
                        )
                    )
                for i in range(3):
                    p0i = P0[ta, i]
                    p1x = P1[ta, i, 0]
                    p1y = P1[ta, i, 1]
                    trHP = hxx * P2[ta, i, 0] + 2.0 * hxy * P2[ta, i, 1] + hyy * P2[ta, i, 2]
                    for j in range(3):
                        q0 = P0[tb, j]
                        q1x = P1[tb, j, 0]
                        q1y = P1[tb, j, 1]
                        trHQ = hxx * P2[tb, j, 0] + 2.0 * hxy * P2[tb, j, 1] + hyy * P2[tb, j, 2]
                        cross[i, j] = (
                            p0 * p0i * q0
                            + g0 * (p0i * q1x - p1x * q0)
                            + g1 * (p0i * q1y - p1y * q0)
                            + 0.5 * (p0i * trHQ + q0 * trHP)
                            - (hxx * p1x * q1x + hxy * (p1x * q1y + p1y * q1x) + hyy * p1y * q1y)
                        )
                _scatter_rows(A, dofs, ta, tb, loc, cross, 2.0)
                continue
            d = np.sqrt(r2)
            ra = d / ha
            rb = d / hb
            if ra < r_8 or rb < r_8:
                _subdiv_pair(
                    A, dofs, tri_pts, ta, tb, s,
                    ref4, w4, ref5, w5, ref8, w8, r_4, r_5, r_8, max_depth,
                )
                continue
            scale = 4.0 * areas[ta] * areas[tb]
            if ra >= r_mom:
                # moment side a, rule side b
                if rb >= r_4:
                    _moment_rule(A, dofs, ta, tb, cents, m0, m1, M2, P0, P1, P2, phys4, bary4, w4, 2.0 * areas[tb], e, loc, cross)
                elif rb >= r_5:
                    _moment_rule(A, dofs, ta, tb, cents, m0, m1, M2, P0, P1, P2, phys5, bary5, w5, 2.0 * areas[tb], e, loc, cross)
                else:
                    _moment_rule(A, dofs, ta, tb, cents, m0, m1, M2, P0, P1, P2, phys8, bary8, w8, 2.0 * areas[tb], e, loc, cross)
            elif rb >= r_mom:
                if ra >= r_4:
                    _rule_moment(A, dofs, ta, tb, phys4, bary4, w4, 2.0 * areas[ta], cents, P0, P1, P2, S2, e, loc, cross)
                elif ra >= r_5:
                    _rule_moment(A, dofs, ta, tb, phys5, bary5, w5, 2.0 * areas[ta], cents, P0, P1, P2, S2, e, loc, cross)
                else:
                    _rule_moment(A, dofs, ta, tb, phys8, bary8, w8, 2.0 * areas[ta], cents, P0, P1, P2, S2, e, loc, cross)
            else:
                if ra >= r_4:
                    if rb >= r_4:
                        _rule_rule(A, dofs, ta, tb, phys4, bary4, w4, phys4, bary4, w4, scale, e, loc, cross)
                    elif rb >= r_5:
                        _rule_rule(A, dofs, ta, tb, phys4, bary4, w4, phys5, bary5, w5, scale, e, loc, cross)
                    else:
                        _rule_rule(A, dofs, ta, tb, phys4, bary4, w4, phys8, bary8, w8, scale, e, loc, cross)
                elif ra >= r_5:
                    if rb >= r_4:
                        _rule_rule(A, dofs, ta, tb, phys5, bary5, w5, phys4, bary4, w4, scale, e, loc, cross)
                    elif rb >= r_5:
                        _rule_rule(A, dofs, ta, tb, phys5, bary5, w5, phys5, bary5, w5, scale, e, loc, cross)
                    else:
                        _rule_rule(A, dofs, ta, tb, phys5, bary5, w5, phys8, bary8, w8, scale, e, loc, cross)
                else:
                    if rb >= r_4:
                        _rule_rule(A, dofs, ta, tb, phys8, bary8, w8, phys4, bary4, w4, scale, e, loc, cross)
                    elif rb >= r_5:
                        _rule_rule(A, dofs, ta, tb, phys8, bary8, w8, phys5, bary5, w5, scale, e, loc, cross)
                    else:
                        _rule_rule(A, dofs, ta, tb, phys8, bary8, w8, phys8, bary8, w8, scale, e, loc, cross)


@njit(cache=True, inline="always")
def _scatter_rows(A, dofs, ta, tb, loc, cross, factor):
    # loc is the packed symmetric 3x3 over ta's hats (00,01,02,11,12,22);
    # cross the 3x3 over (ta hats, tb hats); the cross contribution enters
    # with a minus sign.
    for i in range(3):
        di = dofs[ta, i]
        if di < 0:
            continue
        if i == 0:
            l0, l1, l2 = loc[0], loc[1], loc[2]
        elif i == 1:
            l0, l1, l2 = loc[1], loc[3], loc[4]
        else:
            l0, l1, l2 = loc[2], loc[4], loc[5]
        if dofs[ta, 0] >= 0:
            A[di, dofs[ta, 0]] += factor * l0
        if dofs[ta, 1] >= 0:
            A[di, dofs[ta, 1]] += factor * l1
        if dofs[ta, 2] >= 0:
            A[di, dofs[ta, 2]] += factor * l2
        if dofs[tb, 0] >= 0:
            A[di, dofs[tb, 0]] -= factor * cross[i, 0]
        if dofs[tb, 1] >= 0:
            A[di, dofs[tb, 1]] -= factor * cross[i, 1]
        if dofs[tb, 2] >= 0:
            A[di, dofs[tb, 2]] -= factor * cross[i, 2]


@njit(cache=True)
def _subdiv_pair(
    A, dofs, tri_pts, ta, tb, s,
    pts4, w4, pts5, w5, pts8, w8, r_4, r_5, r_8, max_depth
):
    """Nearly touching disjoint pair: recursively split whichever panel is
    within r_8 of its own diameter from the other; leaves use per-side rules
    chosen by each sub-panel's separation ratio.  Carries reference
    coordinates so parent hats can be evaluated on children."""
    e = -1.0 - s
    # stack entries: 12 ref coords (a0x a0y a1x ... b2y) + depth
    stack = np.empty((4 * (max_depth + 2) + 8, 13))
    stack[0, 0] = 0.0; stack[0, 1] = 0.0
    stack[0, 2] = 1.0; stack[0, 3] = 0.0
    stack[0, 4] = 0.0; stack[0, 5] = 1.0
    stack[0, 6:12] = stack[0, 0:6]
    stack[0, 12] = 0.0
    top = 1
    a0x, a0y = tri_pts[ta, 0, 0], tri_pts[ta, 0, 1]
    Bax0 = tri_pts[ta, 1, 0] - a0x
    Bay0 = tri_pts[ta, 1, 1] - a0y
    Bax1 = tri_pts[ta, 2, 0] - a0x
    Bay1 = tri_pts[ta, 2, 1] - a0y
    b0x, b0y = tri_pts[tb, 0, 0], tri_pts[tb, 0, 1]
    Bbx0 = tri_pts[tb, 1, 0] - b0x
    Bby0 = tri_pts[tb, 1, 1] - b0y
    Bbx1 = tri_pts[tb, 2, 0] - b0x
    Bby1 = tri_pts[tb, 2, 1] - b0y
    area_a = 0.5 * abs(Bax0 * Bay1 - Bay0 * Bax1)
    area_b = 0.5 * abs(Bbx0 * Bby1 - Bby0 * Bbx1)
    loc = np.zeros(6)
    cross = np.zeros((3, 3))
    pa = np.empty((3, 2))
    pb = np.empty((3, 2))
    while top > 0:
        top -= 1
        ent = stack[top].copy()
        depth = ent[12]
        for k in range(3):
            rx, ry = ent[2 * k], ent[2 * k + 1]
            pa[k, 0] = a0x + Bax0 * rx + Bax1 * ry
            pa[k, 1] = a0y + Bay0 * rx + Bay1 * ry
            rx, ry = ent[6 + 2 * k], ent[6 + 2 * k + 1]
            pb[k, 0] = b0x + Bbx0 * rx + Bbx1 * ry
            pb[k, 1] = b0y + Bby0 * rx + Bby1 * ry
        cax = (pa[0, 0] + pa[1, 0] + pa[2, 0]) / 3.0
        cay = (pa[0, 1] + pa[1, 1] + pa[2, 1]) / 3.0
        cbx = (pb[0, 0] + pb[1, 0] + pb[2, 0]) / 3.0
        cby = (pb[0, 1] + pb[1, 1] + pb[2, 1]) / 3.0
        ha = max(
            np.hypot(pa[1, 0] - pa[0, 0], pa[1, 1] - pa[0, 1]),
            max(
                np.hypot(pa[2, 0] - pa[1, 0], pa[2, 1] - pa[1, 1]),
                np.hypot(pa[0, 0] - pa[2, 0], pa[0, 1] - pa[2, 1]),
            ),
        )
        hb = max(
            np.hypot(pb[1, 0] - pb[0, 0], pb[1, 1] - pb[0, 1]),
            max(
                np.hypot(pb[2, 0] - pb[1, 0], pb[2, 1] - pb[1, 1]),
                np.hypot(pb[0, 0] - pb[2, 0], pb[0, 1] - pb[2, 1]),
            ),
        )
        dd = np.hypot(cbx - cax, cby - cay)
        viol_a = dd < r_8 * ha
        viol_b = dd < r_8 * hb
        if (viol_a or viol_b) and depth < max_depth:
            if viol_a and (not viol_b or ha >= hb):
                off = 0
            else:
                off = 6
            x0, y0 = ent[off + 0], ent[off + 1]
            x1, y1 = ent[off + 2], ent[off + 3]
            x2, y2 = ent[off + 4], ent[off + 5]
            mx01, my01 = 0.5 * (x0 + x1), 0.5 * (y0 + y1)
            mx12, my12 = 0.5 * (x1 + x2), 0.5 * (y1 + y2)
            mx20, my20 = 0.5 * (x2 + x0), 0.5 * (y2 + y0)
            childs = (
                (x0, y0, mx01, my01, mx20, my20),
                (mx01, my01, x1, y1, mx12, my12),
                (mx20, my20, mx12, my12, x2, y2),
                (mx01, my01, mx12, my12, mx20, my20),
            )
            for c in range(4):
                stack[top] = ent
                for k in range(6):
                    stack[top, off + k] = childs[c][k]
                stack[top, 12] = depth + 1.0
                top += 1
            continue
        # evaluate on the sub-pair with per-side rules; hats are the
        # parents' (affine in the reference coordinates on the stack)
        # in-tree thresholds are laxer than the top-level ladder: leaf
        # contributions are small relative to the entries they feed
        rat_a = dd / ha
        rat_b = dd / hb
        if rat_a >= 12.0:
            pts_a, w_a = pts4, w4
        elif rat_a >= 5.0:
            pts_a, w_a = pts5, w5
        else:
            pts_a, w_a = pts8, w8
        if rat_b >= 12.0:
            pts_b, w_b = pts4, w4
        elif rat_b >= 5.0:
            pts_b, w_b = pts5, w5
        else:
            pts_b, w_b = pts8, w8
        # sub-triangle reference areas give the Jacobian relative to parents
        refa = 0.5 * abs(
            (ent[2] - ent[0]) * (ent[5] - ent[1]) - (ent[3] - ent[1]) * (ent[4] - ent[0])
        )
        refb = 0.5 * abs(
            (ent[8] - ent[6]) * (ent[11] - ent[7]) - (ent[9] - ent[7]) * (ent[10] - ent[6])
        )
        scale = 4.0 * (area_a * 2.0 * refa) * (area_b * 2.0 * refb)
        for q in range(len(w_a)):
            # reference point of the sub-triangle within the parent
            uq = ent[0] + (ent[2] - ent[0]) * pts_a[q, 0] + (ent[4] - ent[0]) * pts_a[q, 1]
            vq = ent[1] + (ent[3] - ent[1]) * pts_a[q, 0] + (ent[5] - ent[1]) * pts_a[q, 1]
            xq = a0x + Bax0 * uq + Bax1 * vq
            yq = a0y + Bay0 * uq + Bay1 * vq
            ba0 = 1.0 - uq - vq
            ba1 = uq
            ba2 = vq
            colsum = 0.0
            k0 = 0.0
            k1 = 0.0
            k2 = 0.0
            for r in range(len(w_b)):
                ur = ent[6] + (ent[8] - ent[6]) * pts_b[r, 0] + (ent[10] - ent[6]) * pts_b[r, 1]
                vr = ent[7] + (ent[9] - ent[7]) * pts_b[r, 0] + (ent[11] - ent[7]) * pts_b[r, 1]
                xr = b0x + Bbx0 * ur + Bbx1 * vr
                yr = b0y + Bby0 * ur + Bby1 * vr
                ddx = xr - xq
                ddy = yr - yq
                K = w_b[r] * (ddx * ddx + ddy * ddy) ** e
                colsum += K
                k0 += K * (1.0 - ur - vr)
                k1 += K * ur
                k2 += K * vr
            wq = w_a[q]
            loc[0] += scale * wq * ba0 * ba0 * colsum
            loc[1] += scale * wq * ba0 * ba1 * colsum
            loc[2] += scale * wq * ba0 * ba2 * colsum
            loc[3] += scale * wq * ba1 * ba1 * colsum
            loc[4] += scale * wq * ba1 * ba2 * colsum
            loc[5] += scale * wq * ba2 * ba2 * colsum
            cross[0, 0] += scale * wq * ba0 * k0
            cross[0, 1] += scale * wq * ba0 * k1
            cross[0, 2] += scale * wq * ba0 * k2
            cross[1, 0] += scale * wq * ba1 * k0
            cross[1, 1] += scale * wq * ba1 * k1
            cross[1, 2] += scale * wq * ba1 * k2
            cross[2, 0] += scale * wq * ba2 * k0
            cross[2, 1] += scale * wq * ba2 * k1
            cross[2, 2] += scale * wq * ba2 * k2
    _scatter_rows(A, dofs, ta, tb, loc, cross, 2.0)


@njit(cache=True)
def _near_pass(
    A,
    tri_pts,
    areas,
    dofs,
    pair_a,
    pair_b,
    perm_a,
    perm_b,
    case_id,
    co_x,
    co_y,
    co_w,
    ed_x,
    ed_y,
    ed_w,
    vx_x,
    vx_y,
    vx_w,
    s,
):
    """Touching unordered pairs via the regularizing product rules.  Each
    pair is assembled once; the factor 2 accounts for both orderings."""
    e = -1.0 - s
    npair = len(pair_a)
    for p in range(npair):
        ta = pair_a[p]
        tb = pair_b[p]
        if case_id[p] == 1:
            px, py, w = ed_x, ed_y, ed_w
            nsh = 2
        else:
            px, py, w = vx_x, vx_y, vx_w
            nsh = 1
        # permuted physical vertices and dof slots
        ax0 = tri_pts[ta, perm_a[p, 0], 0]; ay0 = tri_pts[ta, perm_a[p, 0], 1]
        ax1 = tri_pts[ta, perm_a[p, 1], 0]; ay1 = tri_pts[ta, perm_a[p, 1], 1]
        ax2 = tri_pts[ta, perm_a[p, 2], 0]; ay2 = tri_pts[ta, perm_a[p, 2], 1]
        bx0 = tri_pts[tb, perm_b[p, 0], 0]; by0 = tri_pts[tb, perm_b[p, 0], 1]
        bx1 = tri_pts[tb, perm_b[p, 1], 0]; by1 = tri_pts[tb, perm_b[p, 1], 1]
        bx2 = tri_pts[tb, perm_b[p, 2], 0]; by2 = tri_pts[tb, perm_b[p, 2], 1]
        da0 = dofs[ta, perm_a[p, 0]]
        da1 = dofs[ta, perm_a[p, 1]]
        da2 = dofs[ta, perm_a[p, 2]]
        db0 = dofs[tb, perm_b[p, 0]]
        db1 = dofs[tb, perm_b[p, 1]]
        db2 = dofs[tb, perm_b[p, 2]]
        # union slots: shared first (from a), then a's rest, then b's rest
        nu = 6 - nsh
        ud = np.empty(6, dtype=np.int32)
        if nsh == 2:
            ud[0] = da0; ud[1] = da1; ud[2] = da2; ud[3] = db2
        else:
            ud[0] = da0; ud[1] = da1; ud[2] = da2; ud[3] = db1; ud[4] = db2
        Mu = np.zeros((5, 5))
        scale = 4.0 * areas[ta] * areas[tb]
        nq = len(w)
        dphi = np.empty(5)
        for q in range(nq):
            pxa = px[q, 0]
            pya = px[q, 1]
            pxb = py[q, 0]
            pyb = py[q, 1]
            X0 = ax0 + (ax1 - ax0) * pxa + (ax2 - ax0) * pya
            X1 = ay0 + (ay1 - ay0) * pxa + (ay2 - ay0) * pya
            Y0 = bx0 + (bx1 - bx0) * pxb + (bx2 - bx0) * pyb
            Y1 = by0 + (by1 - by0) * pxb + (by2 - by0) * pyb
            ddx = X0 - Y0
            ddy = X1 - Y1
            K = w[q] * (ddx * ddx + ddy * ddy) ** e
            bxa0 = 1.0 - pxa - pya
            bxb0 = 1.0 - pxb - pyb
            if nsh == 2:
                dphi[0] = bxa0 - bxb0
                dphi[1] = pxa - pxb
                dphi[2] = pya
                dphi[3] = -pyb
                m = 4
            else:
                dphi[0] = bxa0 - bxb0
                dphi[1] = pxa
                dphi[2] = pya
                dphi[3] = -pxb
                dphi[4] = -pyb
                m = 5
            for i in range(m):
                di = dphi[i]
                if di == 0.0:
                    continue
                for j in range(m):
                    Mu[i, j] += K * di * dphi[j]
        for i in range(nu):
            gi = ud[i]
            if gi < 0:
                continue
            for j in range(nu):
                gj = ud[j]
                if gj >= 0:
                    A[gi, gj] += 2.0 * scale * Mu[i, j]


@njit(cache=True)
def _identical_pass(A, tri_pts, areas, dofs, co_x, co_y, co_w, s):
    e = -1.0 - s
    nt = len(tri_pts)
    nq = len(co_w)
    for t in range(nt):
        d0, d1, d2_ = dofs[t, 0], dofs[t, 1], dofs[t, 2]
        if d0 < 0 and d1 < 0 and d2_ < 0:
            continue
        ax0, ay0 = tri_pts[t, 0, 0], tri_pts[t, 0, 1]
        e1x = tri_pts[t, 1, 0] - ax0
        e1y = tri_pts[t, 1, 1] - ay0
        e2x = tri_pts[t, 2, 0] - ax0
        e2y = tri_pts[t, 2, 1] - ay0
        m00 = 0.0; m01 = 0.0; m02 = 0.0
        m11 = 0.0; m12 = 0.0; m22 = 0.0
        for q in range(nq):
            du = co_x[q, 0] - co_y[q, 0]
            dv = co_x[q, 1] - co_y[q, 1]
            ddx = e1x * du + e2x * dv
            ddy = e1y * du + e2y * dv
            K = co_w[q] * (ddx * ddx + ddy * ddy) ** e
            f0 = -du - dv
            f1 = du
            f2 = dv
            m00 += K * f0 * f0
            m01 += K * f0 * f1
            m02 += K * f0 * f2
            m11 += K * f1 * f1
            m12 += K * f1 * f2
            m22 += K * f2 * f2
        scale = 4.0 * areas[t] * areas[t]
        vals = ((m00, m01, m02), (m01, m11, m12), (m02, m12, m22))
        for i in range(3):
            gi = dofs[t, i]
            if gi < 0:
                continue
            for j in range(3):
                gj = dofs[t, j]
                if gj >= 0:
                    A[gi, gj] += scale * vals[i][j]


@njit(cache=True)
def _scale_and_symmetrize(A, half_c):
    n = len(A)
    for i in range(n):
        A[i, i] *= half_c
        for j in range(i + 1, n):
            v = 0.5 * half_c * (A[i, j] + A[j, i])
            A[i, j] = v
            A[j, i] = v


# ---------------------------------------------------------------------------
# assembly orchestration


class FractionalSystem:
    """Stiffness matrix of the fractional form over interior vertices."""

    def __init__(self, s, cns, matrix, dof_of_vertex, vertex_of_dof, mesh, rules):
        self.s = s
        self.cns = cns
        self.matrix = matrix
        self.dof_of_vertex = dof_of_vertex
        self.vertex_of_dof = vertex_of_dof
        self.mesh = mesh
        self.rules = rules

    @property
    def ndof(self):
        return len(self.vertex_of_dof)


def _dof_maps(mesh):
    nv = mesh.nverts
    dof_of_vertex = np.full(nv, -1, dtype=np.int32)
    interior = mesh.interior_vertices()
    dof_of_vertex[interior] = np.arange(len(interior), dtype=np.int32)
    return dof_of_vertex, interior.astype(np.int32)


def _touching_pair_arrays(mesh, star):
    """Unordered touching pairs with canonical permutations for the
    edge/vertex product rules."""
    tris = mesh.triangles
    seen = set()
    pa, pb, ca, cb, cid = [], [], [], [], []
    for v in range(mesh.nverts):
        inc = star.vertex_star(v)
        for ii in range(len(inc)):
            for jj in range(ii + 1, len(inc)):
                t1, t2 = int(inc[ii]), int(inc[jj])
                if t1 > t2:
                    t1, t2 = t2, t1
                if (t1, t2) in seen:
                    continue
                seen.add((t1, t2))
                v1 = tris[t1]
                v2 = tris[t2]
                shared = [
                    (i, j) for i in range(3) for j in range(3) if v1[i] == v2[j]
                ]
                if len(shared) == 2:
                    (ia1, ib1), (ia2, ib2) = shared
                    perm_a = [ia1, ia2, 3 - ia1 - ia2]
                    perm_b = [ib1, ib2, 3 - ib1 - ib2]
                    case = 1
                else:
                    ((ia1, ib1),) = shared
                    rest_a = [i for i in range(3) if i != ia1]
                    rest_b = [j for j in range(3) if j != ib1]
                    perm_a = [ia1] + rest_a
                    perm_b = [ib1] + rest_b
                    case = 2
                pa.append(t1)
                pb.append(t2)
                ca.append(perm_a)
                cb.append(perm_b)
                cid.append(case)
    if not pa:
        empty = np.empty(0, dtype=np.int64)
        return empty, empty, np.empty((0, 3), np.int64), np.empty((0, 3), np.int64), empty
    return (
        np.array(pa, dtype=np.int64),
        np.array(pb, dtype=np.int64),
        np.array(ca, dtype=np.int64),
        np.array(cb, dtype=np.int64),
        np.array(cid, dtype=np.int64),
    )


def _boundary_segment_arrays(mesh):
    """Boundary segments oriented counterclockwise around the circle center
    and sorted by midpoint angle."""
    cx, cy, rad = mesh.circle
    be = mesh.boundary_edges()
    a = mesh.vertices[be[:, 0]].copy()
    b = mesh.vertices[be[:, 1]].copy()
    # orient each segment CCW as seen from the center
    cross = (a[:, 0] - cx) * (b[:, 1] - cy) - (a[:, 1] - cy) * (b[:, 0] - cx)
    flip = cross < 0
    a[flip], b[flip] = b[flip].copy(), a[flip].copy()
    mid = 0.5 * (a + b)
    ang = np.arctan2(mid[:, 1] - cy, mid[:, 0] - cx)
    order = np.argsort(ang, kind="stable")
    seg = np.column_stack([a[order], b[order]])
    lmax = float(np.linalg.norm(b - a, axis=1).max())
    return np.ascontiguousarray(seg), np.ascontiguousarray(ang[order]), lmax


def _complement_scatter(A, mesh, star, s, rules, cns):
    """Add C * int phi_i phi_j omega dx to A (local in (i, j))."""
    dof_of_vertex, _ = _dof_maps(mesh)
    gx, gw = _cached_gauss(rules.q_ang)
    use_disk = mesh.circle is not None
    if use_disk:
        bseg, bang, lmax = _boundary_segment_arrays(mesh)
        poly_verts = np.zeros((3, 2))
        cx, cy, rad = mesh.circle
    else:
        poly = boundary_polygon(mesh)
        poly_verts = poly.vertices
        bseg = np.zeros((1, 4))
        bang = np.zeros(1)
        lmax = 0.0
        cx = cy = rad = 0.0
    for elevated in (False, True):
        mask = star.is_boundary_elem if elevated else ~star.is_boundary_elem
        tsel = np.flatnonzero(mask)
        if len(tsel) == 0:
            continue
        q = rules.q_load + (2 if elevated else 0)
        pts_ref, w = duffy_rule(q)
        bary = np.column_stack([1 - pts_ref.sum(1), pts_ref[:, 0], pts_ref[:, 1]])
        p = mesh.vertices[mesh.triangles[tsel]]
        phys = p[:, 0, None, :] + np.einsum(
            "qk,tkd->tqd", pts_ref, np.stack([p[:, 1] - p[:, 0], p[:, 2] - p[:, 0]], axis=1)
        )
        flat = phys.reshape(-1, 2)
        om = _omega_many(
            flat, poly_verts, s, gx, gw, use_disk, cx, cy, rad, bseg, bang, lmax
        ).reshape(len(tsel), -1)
        areas = mesh.areas[tsel]
        wloc = np.einsum("tq,q,qi,qj->tij", om, w, bary, bary) * (2.0 * areas)[:, None, None]
        dofs = dof_of_vertex[mesh.triangles[tsel]]
        ii = np.repeat(dofs[:, :, None], 3, axis=2)
        jj = np.repeat(dofs[:, None, :], 3, axis=1)
        keep = (ii >= 0) & (jj >= 0)
        np.add.at(A, (ii[keep], jj[keep]), cns * wloc[keep])


def assemble_stiffness(mesh, star, s, rules=None):
    """Assemble the full fractional stiffness matrix over interior vertices.

    Returns a :class:`FractionalSystem` whose matrix includes both the
    domain-domain pair integrals and the complement (omega) term, scaled by
    the normalization constant.
    """
    if rules is None:
        rules = QuadratureRules(s)
    if rules.s != s:
        raise ValueError("rules were built for a different fractional order")
    cns = normalization_constant(2, s)
    dof_of_vertex, vertex_of_dof = _dof_maps(mesh)
    ndof = len(vertex_of_dof)
    if ndof == 0:
        raise ValueError("mesh has no interior vertices")
    tri_pts = np.ascontiguousarray(mesh.vertices[mesh.triangles])
    areas = np.ascontiguousarray(mesh.areas)
    hts = np.ascontiguousarray(mesh.h_T)
    cents = np.ascontiguousarray(mesh.centroids)
    dofs = np.ascontiguousarray(dof_of_vertex[mesh.triangles])

    edge_vecs = np.stack([tri_pts[:, 1] - tri_pts[:, 0], tri_pts[:, 2] - tri_pts[:, 0]], axis=1)

    def _phys(pts_ref):
        p = tri_pts[:, 0, None, :] + np.einsum("qk,tkd->tqd", pts_ref, edge_vecs)
        return np.ascontiguousarray(p)

    def _bary(pts_ref):
        return np.ascontiguousarray(
            np.column_stack([1 - pts_ref.sum(1), pts_ref[:, 0], pts_ref[:, 1]])
        )

    P0, P1, P2, m0, m1, M2, S2 = _triangle_moment_arrays(tri_pts, areas)

    r_mom, r_4, r_5, r_8 = rules.r_side
    A = np.zeros((ndof, ndof))
    _far_pass(
        A, cents, hts, areas, dofs,
        _phys(rules.band_hi_pts), rules.band_hi_w, _bary(rules.band_hi_pts),
        _phys(rules.band_mid_pts), rules.band_mid_w, _bary(rules.band_mid_pts),
        _phys(rules.band_lo_pts), rules.band_lo_w, _bary(rules.band_lo_pts),
        P0, P1, P2, m0, m1, M2, S2, tri_pts, s,
        r_mom, r_4, r_5, r_8,
        rules.band_hi_pts, rules.band_mid_pts, rules.band_lo_pts, MAX_SUBDIV_DEPTH,
    )
    _identical_pass(A, tri_pts, areas, dofs, rules.co_x, rules.co_y, rules.co_w, s)
    pa, pb, ca, cb, cid = _touching_pair_arrays(mesh, star)
    if len(pa):
        _near_pass(
            A, tri_pts, areas, dofs, pa, pb, ca, cb, cid,
            rules.co_x, rules.co_y, rules.co_w,
            rules.ed_x, rules.ed_y, rules.ed_w,
            rules.vx_x, rules.vx_y, rules.vx_w, s,
        )
    if not np.all(np.isfinite(A)):
        raise FloatingPointError("non-finite pair integral (singular rule failure)")
    _scale_and_symmetrize(A, 0.5 * cns)
    _complement_scatter(A, mesh, star, s, rules, cns)
    _scale_and_symmetrize(A, 1.0)  # exact symmetry after the local scatter
    return FractionalSystem(s, cns, A, dof_of_vertex, vertex_of_dof, mesh, rules)


def assemble_load(mesh, f, q_load=6):
    """Load vector F_i = int f phi_i over interior vertices.

    ``f`` takes an (n, 2) array of points and returns n values.
    """
    dof_of_vertex, vertex_of_dof = _dof_maps(mesh)
    pts_ref, w = duffy_rule(q_load)
    bary = np.column_stack([1 - pts_ref.sum(1), pts_ref[:, 0], pts_ref[:, 1]])
    p = mesh.vertices[mesh.triangles]
    edge_vecs = np.stack([p[:, 1] - p[:, 0], p[:, 2] - p[:, 0]], axis=1)
    phys = p[:, 0, None, :] + np.einsum("qk,tkd->tqd", pts_ref, edge_vecs)
    vals = np.asarray(f(phys.reshape(-1, 2)), dtype=np.float64).reshape(mesh.ntris, -1)
    contrib = np.einsum("tq,q,qi->ti", vals, w, bary) * (2.0 * mesh.areas)[:, None]
    F = np.zeros(len(vertex_of_dof))
    dofs = dof_of_vertex[mesh.triangles]
    keep = dofs >= 0
    np.add.at(F, dofs[keep], contrib[keep])
    return F


def save_stiffness(system, path):
    """Binary dump: 'FRACSTIF' + u32 ndof + u32 reserved, then the row-major
    lower triangle as little-endian float64."""
    A = system.matrix
    n = len(A)
    with open(path, "wb") as fh:
        fh.write(b"FRACSTIF")
        fh.write(np.array([n, 0], dtype="<u4").tobytes())
        for i in range(n):
            fh.write(A[i, : i + 1].astype("<f8", copy=False).tobytes())


def load_stiffness(path):
    """Read a stiffness dump back into a full symmetric matrix."""
    with open(path, "rb") as fh:
        magic = fh.read(8)
        if magic != b"FRACSTIF":
            raise ValueError(f"{path}: bad magic {magic!r}")
        n, _ = np.frombuffer(fh.read(8), dtype="<u4")
        A = np.zeros((n, n))
        for i in range(n):
            row = np.frombuffer(fh.read(8 * (i + 1)), dtype="<f8")
            A[i, : i + 1] = row
            A[: i + 1, i] = row
    return A
