"""Pure-NumPy fallback for the compiled bond kernels.

Mirrors the signatures in _kernels.pyx exactly; used when the extension is
unavailable or when QCADAPT_PURE_PYTHON=1 is set.
"""

import numpy as np

BOND_COLLAPSE_TOL = 1e-8


def _bond_vectors(ptr, nbr, ctr, base, u):
    reps = np.diff(ptr)
    site_of_bond = np.repeat(np.arange(len(ctr)), reps)
    g = base + u[nbr] - u[ctr[site_of_bond]]
    return g, site_of_bond


def eam_site_energies(ptr, nbr, ctr, base, u, a, b, c, rho0):
    g, sob = _bond_vectors(ptr, nbr, ctr, base, u)
    r = np.hypot(g[:, 0], g[:, 1])
    if r.size and r.min() < BOND_COLLAPSE_TOL:
        raise FloatingPointError("bond length collapsed below %g" % BOND_COLLAPSE_TOL)
    ns = len(ctr)
    pair = np.bincount(sob, weights=np.exp(-2.0 * a * (r - 1.0)) - 2.0 * np.exp(-a * (r - 1.0)), minlength=ns)
    dens = np.bincount(sob, weights=np.exp(-b * r), minlength=ns)
    d = dens - rho0
    return pair + c * (d ** 2 + d ** 4)


def eam_energy_gradient(ptr, nbr, ctr, base, u, w, v0, a, b, c, rho0, grad):
    g, sob = _bond_vectors(ptr, nbr, ctr, base, u)
    r = np.hypot(g[:, 0], g[:, 1])
    if r.size and r.min() < BOND_COLLAPSE_TOL:
        raise FloatingPointError("bond length collapsed below %g" % BOND_COLLAPSE_TOL)
    ns = len(ctr)
    pair = np.bincount(sob, weights=np.exp(-2.0 * a * (r - 1.0)) - 2.0 * np.exp(-a * (r - 1.0)), minlength=ns)
    dens = np.bincount(sob, weights=np.exp(-b * r), minlength=ns)
    d = dens - rho0
    energy = float(np.dot(w, pair + c * (d ** 2 + d ** 4) - v0))
    fprime = c * (2.0 * d + 4.0 * d ** 3)
    coef = (-2.0 * a * np.exp(-2.0 * a * (r - 1.0)) + 2.0 * a * np.exp(-a * (r - 1.0))
            - fprime[sob] * b * np.exp(-b * r)) / r
    p = (w[sob] * coef)[:, None] * g
    nu = grad.shape[0]
    for k in range(2):
        grad[:, k] += np.bincount(nbr, weights=p[:, k], minlength=nu)
        grad[:, k] -= np.bincount(ctr[sob], weights=p[:, k], minlength=nu)
    return energy


def antiplane_site_energies(ptr, nbr, ctr, base, u):
    g, sob = _bond_vectors(ptr, nbr, ctr, base, u)
    s = np.bincount(sob, weights=np.sin(np.pi * g[:, 0]) ** 2, minlength=len(ctr))
    return 1.0 + 0.5 * s * s


def antiplane_energy_gradient(ptr, nbr, ctr, base, u, w, v0, grad):
    g, sob = _bond_vectors(ptr, nbr, ctr, base, u)
    s = np.bincount(sob, weights=np.sin(np.pi * g[:, 0]) ** 2, minlength=len(ctr))
    energy = float(np.dot(w, 1.0 + 0.5 * s * s - v0))
    p = (w * s)[sob] * np.pi * np.sin(2.0 * np.pi * g[:, 0])
    nu = grad.shape[0]
    grad[:, 0] += np.bincount(nbr, weights=p, minlength=nu)
    grad[:, 0] -= np.bincount(ctr[sob], weights=p, minlength=nu)
    return energy
