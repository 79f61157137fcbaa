# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Hot per-bond loops: site energies and assembled gradients for both potentials.

Bond tables are CSR-like: site i owns bonds ptr[i]:ptr[i+1]; nbr[j] and ctr[i]
are row indices into the displacement array u; base[j] is the per-bond offset
(homogeneous deformation plus predictor difference) added to u[nbr]-u[ctr].
"""

import numpy as np

cimport numpy as cnp
from libc.math cimport exp, sqrt, sin

cnp.import_array()

BOND_COLLAPSE_TOL = 1e-8

cdef double _PI = 3.141592653589793238462643383279502884


def eam_site_energies(long[::1] ptr, long[::1] nbr, long[::1] ctr,
                      double[:, ::1] base, double[:, ::1] u,
                      double a, double b, double c, double rho0):
    """Raw (unrenormalized) EAM site energies V_i for every site in the table."""
    cdef Py_ssize_t ns = ctr.shape[0]
    cdef cnp.ndarray[double, ndim=1] out = np.empty(ns, dtype=np.float64)
    cdef double[::1] v = out
    cdef Py_ssize_t i, j, k0, k1
    cdef long ic
    cdef double gx, gy, r, pair, dens, d
    cdef int bad = 0
    with nogil:
        for i in range(ns):
            ic = ctr[i]
            pair = 0.0
            dens = 0.0
            k0 = ptr[i]
            k1 = ptr[i + 1]
            for j in range(k0, k1):
                gx = base[j, 0] + u[nbr[j], 0] - u[ic, 0]
                gy = base[j, 1] + u[nbr[j], 1] - u[ic, 1]
                r = sqrt(gx * gx + gy * gy)
                if r < 1e-8:
                    bad = 1
                    break
                pair += exp(-2.0 * a * (r - 1.0)) - 2.0 * exp(-a * (r - 1.0))
                dens += exp(-b * r)
            if bad:
                break
            d = dens - rho0
            v[i] = pair + c * (d * d + d * d * d * d)
    if bad:
        raise FloatingPointError("bond length collapsed below %g" % BOND_COLLAPSE_TOL)
    return out


def eam_energy_gradient(long[::1] ptr, long[::1] nbr, long[::1] ctr,
                        double[:, ::1] base, double[:, ::1] u,
                        double[::1] w, double[::1] v0,
                        double a, double b, double c, double rho0,
                        double[:, ::1] grad):
    """Accumulate w_i * dV_i into grad and return sum_i w_i (V_i - v0_i)."""
    cdef Py_ssize_t ns = ctr.shape[0]
    cdef Py_ssize_t i, j, k0, k1
    cdef long ic, jn
    cdef double gx, gy, r, pair, dens, d, fp, coef, px, py, wi
    cdef double energy = 0.0
    cdef int bad = 0
    with nogil:
        for i in range(ns):
            ic = ctr[i]
            wi = w[i]
            pair = 0.0
            dens = 0.0
            k0 = ptr[i]
            k1 = ptr[i + 1]
            for j in range(k0, k1):
                gx = base[j, 0] + u[nbr[j], 0] - u[ic, 0]
                gy = base[j, 1] + u[nbr[j], 1] - u[ic, 1]
                r = sqrt(gx * gx + gy * gy)
                if r < 1e-8:
                    bad = 1
                    break
                pair += exp(-2.0 * a * (r - 1.0)) - 2.0 * exp(-a * (r - 1.0))
                dens += exp(-b * r)
            if bad:
                break
            d = dens - rho0
            energy += wi * (pair + c * (d * d + d * d * d * d) - v0[i])
            fp = c * (2.0 * d + 4.0 * d * d * d)
            for j in range(k0, k1):
                jn = nbr[j]
                gx = base[j, 0] + u[jn, 0] - u[ic, 0]
                gy = base[j, 1] + u[jn, 1] - u[ic, 1]
                r = sqrt(gx * gx + gy * gy)
                coef = (-2.0 * a * exp(-2.0 * a * (r - 1.0))
                        + 2.0 * a * exp(-a * (r - 1.0))
                        - fp * b * exp(-b * r)) / r
                px = wi * coef * gx
                py = wi * coef * gy
                grad[jn, 0] += px
                grad[jn, 1] += py
                grad[ic, 0] -= px
                grad[ic, 1] -= py
    if bad:
        raise FloatingPointError("bond length collapsed below %g" % BOND_COLLAPSE_TOL)
    return energy


def antiplane_site_energies(long[::1] ptr, long[::1] nbr, long[::1] ctr,
                            double[:, ::1] base, double[:, ::1] u):
    """Raw anti-plane site energies G(sum_rho phi) with G(s)=1+s^2/2, phi=sin^2(pi r)."""
    cdef Py_ssize_t ns = ctr.shape[0]
    cdef cnp.ndarray[double, ndim=1] out = np.empty(ns, dtype=np.float64)
    cdef double[::1] v = out
    cdef Py_ssize_t i, j
    cdef long ic
    cdef double g, s, sp
    with nogil:
        for i in range(ns):
            ic = ctr[i]
            s = 0.0
            for j in range(ptr[i], ptr[i + 1]):
                g = base[j, 0] + u[nbr[j], 0] - u[ic, 0]
                sp = sin(_PI * g)
                s += sp * sp
            v[i] = 1.0 + 0.5 * s * s
    return out


def antiplane_energy_gradient(long[::1] ptr, long[::1] nbr, long[::1] ctr,
                              double[:, ::1] base, double[:, ::1] u,
                              double[::1] w, double[::1] v0,
                              double[:, ::1] grad):
    cdef Py_ssize_t ns = ctr.shape[0]
    cdef Py_ssize_t i, j, k0, k1
    cdef long ic, jn
    cdef double g, s, sp, p, wi
    cdef double energy = 0.0
    with nogil:
        for i in range(ns):
            ic = ctr[i]
            wi = w[i]
            s = 0.0
            k0 = ptr[i]
            k1 = ptr[i + 1]
            for j in range(k0, k1):
                g = base[j, 0] + u[nbr[j], 0] - u[ic, 0]
                sp = sin(_PI * g)
                s += sp * sp
            energy += wi * (1.0 + 0.5 * s * s - v0[i])
            for j in range(k0, k1):
                jn = nbr[j]
                g = base[j, 0] + u[jn, 0] - u[ic, 0]
                p = wi * s * _PI * sin(2.0 * _PI * g)
                grad[jn, 0] += p
                grad[ic, 0] -= p
    return energy
