"""Explicit radial benchmark solution on the unit disk.

Built from the degree-two Jacobi polynomial with parameters (s, 0):

    P(z)   = (4(s+1)(s+2) + 4(s+2)(s+3)(z-1) + (s+3)(s+4)(z-1)^2) / 8
    u(x)   = (1 - |x|^2)_+^s  P(2|x|^2 - 1)
    f0(x)  = 2^(2(s-1)) Gamma(3-s)^2 P(2|x|^2 - 1)

for which the fractional Laplacian of u equals f0 on the disk.  The obstacle
coincides with u on |x| <= 1/5 and continues outward with the second-order
radial Taylor polynomial at r = 1/5; the forcing is lowered inside the
contact disk by a cone 100 (1/5 - |x|)_+, with a C^1 quadratic cap of radius
r_c at the apex so the forcing stays Lipschitz.
"""

from dataclasses import dataclass

import numpy as np
from scipy.special import gamma as _gamma, roots_jacobi

__all__ = [
    "jacobi_p2",
    "ExplicitSolution",
    "energy_error",
]

R_CONTACT = 0.2


def jacobi_p2(s, z):
    """Degree-two Jacobi polynomial with parameters (s, 0)."""
    z = np.asarray(z, dtype=np.float64)
    zm = z - 1.0
    return (
        4.0 * (s + 1.0) * (s + 2.0)
        + 4.0 * (s + 2.0) * (s + 3.0) * zm
        + (s + 3.0) * (s + 4.0) * zm * zm
    ) / 8.0


def _jacobi_p2_d1(s, z):
    return (4.0 * (s + 2.0) * (s + 3.0) + 2.0 * (s + 3.0) * (s + 4.0) * (z - 1.0)) / 8.0


def _jacobi_p2_d2(s):
    return (s + 3.0) * (s + 4.0) / 4.0


@dataclass
class ExplicitSolution:
    """Radial exact solution, obstacle, and forcing for one value of s."""

    s: float
    r_c: float = 0.02

    def __post_init__(self):
        if not 0.0 < self.s < 1.0:
            raise ValueError(f"fractional order s={self.s} outside (0, 1)")
        s = self.s
        self._f_scale = 2.0 ** (2.0 * (s - 1.0)) * _gamma(3.0 - s) ** 2
        # radial Taylor data of u at the contact radius
        r0 = R_CONTACT
        self._u0 = self.u_radial(r0)
        self._u1 = self.du_radial(r0)
        self._u2 = self.d2u_radial(r0)
        self.energy_exact = self._energy_norm_sq()

    # radial profiles ------------------------------------------------------
    def u_radial(self, r):
        r = np.asarray(r, dtype=np.float64)
        w = np.maximum(1.0 - r * r, 0.0)
        return w**self.s * jacobi_p2(self.s, 2.0 * r * r - 1.0)

    def du_radial(self, r):
        """d/dr of the solution profile (inside the disk)."""
        s = self.s
        r = np.asarray(r, dtype=np.float64)
        w = 1.0 - r * r
        z = 2.0 * r * r - 1.0
        P = jacobi_p2(s, z)
        dP = _jacobi_p2_d1(s, z)
        return 2.0 * r * w ** (s - 1.0) * (-s * P + 2.0 * w * dP)

    def d2u_radial(self, r):
        s = self.s
        r = np.asarray(r, dtype=np.float64)
        w = 1.0 - r * r
        z = 2.0 * r * r - 1.0
        P = jacobi_p2(s, z)
        dP = _jacobi_p2_d1(s, z)
        ddP = _jacobi_p2_d2(s)
        g = -s * P + 2.0 * w * dP
        dg = -s * dP * 4.0 * r - 2.0 * r * 2.0 * dP + 2.0 * w * ddP * 4.0 * r
        return (
            2.0 * w ** (s - 1.0) * g
            + 2.0 * r * (s - 1.0) * w ** (s - 2.0) * (-2.0 * r) * g
            + 2.0 * r * w ** (s - 1.0) * dg
        )

    # fields on the plane --------------------------------------------------
    def solution(self, x):
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        return self.u_radial(np.hypot(x[:, 0], x[:, 1]))

    def rhs_linear(self, x):
        """Forcing whose fractional Laplacian identity defines u."""
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        r = np.hypot(x[:, 0], x[:, 1])
        return self._f_scale * jacobi_p2(self.s, 2.0 * r * r - 1.0)

    def obstacle(self, x):
        """u inside the contact radius, its radial Taylor extension outside."""
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        r = np.hypot(x[:, 0], x[:, 1])
        dr = r - R_CONTACT
        taylor = self._u0 + self._u1 * dr + 0.5 * self._u2 * dr * dr
        return np.where(r <= R_CONTACT, self.u_radial(r), taylor)

    def forcing(self, x):
        """Modified forcing: strictly below rhs_linear inside the contact
        disk (smoothed cone), equal to it outside."""
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        r = np.hypot(x[:, 0], x[:, 1])
        m = np.where(r >= self.r_c, r, (r * r + self.r_c**2) / (2.0 * self.r_c))
        return self.rhs_linear(x) - 100.0 * np.maximum(R_CONTACT - m, 0.0)

    # energy ----------------------------------------------------------------
    def _energy_norm_sq(self, q_rad=20):
        """|u|_s^2 = int f0 u over the disk, by Gauss-Jacobi in t = r^2 with
        the (1-t)^s endpoint weight factored out; doubled order must agree."""
        val = self._energy_quad(q_rad)
        check = self._energy_quad(2 * q_rad)
        if abs(val - check) > 1e-12 * max(abs(val), 1.0):
            raise FloatingPointError("energy quadrature did not converge")
        return check

    def _energy_quad(self, n):
        s = self.s
        z, w = roots_jacobi(n, s, 0.0)  # weight (1-z)^s on [-1, 1]
        t = 0.5 * (z + 1.0)
        P2 = jacobi_p2(s, 2.0 * t - 1.0) ** 2
        # int_0^1 P^2 (1-t)^s dt, then scale by the plane factors
        integral = (w @ P2) / 2.0 ** (s + 1.0)
        return float(2.0 * np.pi * self._f_scale * 0.5 * integral)


def energy_error(u_coeffs, A, load_linear, energy_exact_sq):
    """Energy-norm distance |u - u_h| from the Galerkin identity
    E0 - 2 F~ . u_h + u_h . A u_h, with F~ assembled for the unmodified
    forcing on the same mesh as u_h."""
    u = np.asarray(u_coeffs, dtype=np.float64)
    val = energy_exact_sq - 2.0 * float(load_linear @ u) + float(u @ (A @ u))
    if val < -1e-10 * max(energy_exact_sq, 1.0):
        raise FloatingPointError(
            f"negative squared error {val:.3e}: inconsistent inputs"
        )
    return float(np.sqrt(max(val, 0.0)))
