"""Discrete obstacle problem: primal-dual active-set solution of the nodal
complementarity system

    u >= chi,   lambda = A u - F >= 0,   lambda_i (u_i - chi_i) = 0.

The iteration guesses the active set from the KKT violation
lambda + c (chi - u) > 0, solves the reduced linear system with u = chi on
the active set, and stops when the active set repeats; for symmetric
positive definite A this terminates finitely.
"""

from dataclasses import dataclass, field

import numpy as np
import scipy.linalg as sla

__all__ = [
    "ObstacleProblem",
    "SolveReport",
    "solve_obstacle",
    "solve_linear",
    "discrete_contact_set",
]


@dataclass
class ObstacleProblem:
    matrix: np.ndarray   # SPD stiffness over interior vertices
    load: np.ndarray
    chi: np.ndarray      # nodal obstacle (quasi-interpolated)

    def __post_init__(self):
        n = len(self.load)
        if self.matrix.shape != (n, n) or len(self.chi) != n:
            raise ValueError("dimension mismatch in obstacle problem")


@dataclass
class SolveReport:
    u: np.ndarray
    lam: np.ndarray
    active: np.ndarray       # sorted indices with u_i = chi_i enforced
    iterations: int
    comp_residual: float


def solve_linear(A, F):
    """Direct SPD solve with a residual guard."""
    c, low = sla.cho_factor(A, lower=True, check_finite=False)
    u = sla.cho_solve((c, low), F, check_finite=False)
    nrm = np.linalg.norm(F)
    if nrm > 0:
        res = np.linalg.norm(A @ u - F) / nrm
        if not res <= 1e-10:
            raise FloatingPointError(f"linear solve residual {res:.2e}")
    return u


def solve_obstacle(problem, tol=1e-12, max_iter=100, c=1.0):
    """Primal-dual active-set iteration for the nodal obstacle problem."""
    A, F, chi = problem.matrix, problem.load, problem.chi
    n = len(F)
    u = np.maximum(solve_linear(A, F), chi)
    lam = np.zeros(n)
    active_prev = None
    for it in range(1, max_iter + 1):
        active = lam + c * (chi - u) > 0
        if active_prev is not None and np.array_equal(active, active_prev):
            break
        active_prev = active
        inact = ~active
        u = np.empty(n)
        u[active] = chi[active]
        idx_i = np.flatnonzero(inact)
        if len(idx_i):
            rhs = F[idx_i] - A[np.ix_(idx_i, np.flatnonzero(active))] @ chi[active]
            u[idx_i] = _reduced_solve(A, idx_i, rhs)
        lam = A @ u - F
        lam[idx_i] = 0.0
    else:
        raise RuntimeError(f"active set did not settle in {max_iter} iterations")
    comp = float(np.max(np.abs(np.minimum(lam, u - chi)))) if n else 0.0
    if comp > tol:
        raise RuntimeError(
            f"complementarity residual {comp:.3e} above tolerance {tol:.1e}"
        )
    return SolveReport(
        u=u,
        lam=lam,
        active=np.flatnonzero(active),
        iterations=it,
        comp_residual=comp,
    )


def _reduced_solve(A, idx, rhs):
    sub = A[np.ix_(idx, idx)]
    cf = sla.cho_factor(sub, lower=True, overwrite_a=True, check_finite=False)
    return sla.cho_solve(cf, rhs, check_finite=False)


def discrete_contact_set(mesh, dof_of_vertex, report, chi, tol_c=1e-8):
    """Vertex and triangle contact sets of a solve report.

    A vertex is in contact when u_i - chi_i <= tol_c * max(1, |chi_i|);
    boundary vertices are never in contact.  A triangle is in contact when
    all three of its vertices are.
    """
    gap = report.u - chi
    thr = tol_c * np.maximum(1.0, np.abs(chi))
    contact_dof = gap <= thr
    contact_vertex = np.zeros(mesh.nverts, dtype=bool)
    contact_vertex[np.flatnonzero(dof_of_vertex >= 0)] = contact_dof[
        dof_of_vertex[dof_of_vertex >= 0]
    ]
    tri_contact = contact_vertex[mesh.triangles].all(axis=1)
    return contact_vertex, np.flatnonzero(tri_contact)
