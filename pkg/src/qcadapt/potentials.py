"""Site potentials (EAM and simplified anti-plane EAM-type), first
renormalizations, analytic derivatives, and the Cauchy-Born energy density.

These are the reference implementations; the assembled solvers call the
compiled kernels in `kernels`, which are tested against these.
"""

from dataclasses import dataclass, field

import numpy as np

from .errors import SingularConfigurationError

BOND_GUARD = 1e-8


@dataclass(frozen=True)
class EamPotential:
    """EAM with Morse-type pair term, exponential density and quartic embedding.

    phi(1) = -1 and F(rho0) = 0 by construction.
    """

    a: float = 4.0
    b: float = 3.0
    c: float = 10.0
    rho0: float = 6.0 * np.exp(-0.9 * 3.0)

    kind = "eam"

    def phi(self, r):
        return np.exp(-2 * self.a * (r - 1)) - 2 * np.exp(-self.a * (r - 1))

    def dphi(self, r):
        return -2 * self.a * np.exp(-2 * self.a * (r - 1)) + 2 * self.a * np.exp(-self.a * (r - 1))

    def ddphi(self, r):
        return 4 * self.a ** 2 * np.exp(-2 * self.a * (r - 1)) - 2 * self.a ** 2 * np.exp(-self.a * (r - 1))

    def psi(self, r):
        return np.exp(-self.b * r)

    def dpsi(self, r):
        return -self.b * np.exp(-self.b * r)

    def ddpsi(self, r):
        return self.b ** 2 * np.exp(-self.b * r)

    def embed(self, d):
        t = d - self.rho0
        return self.c * (t ** 2 + t ** 4)

    def dembed(self, d):
        t = d - self.rho0
        return self.c * (2 * t + 4 * t ** 3)

    def ddembed(self, d):
        t = d - self.rho0
        return self.c * (2 + 12 * t ** 2)


@dataclass(frozen=True)
class AntiplanePotential:
    """V = G(sum_rho phi(Dy)) with G(s) = 1 + s^2/2 and phi(r) = sin^2(pi r)."""

    kind = "antiplane"

    def G(self, s):
        return 1.0 + 0.5 * s * s

    def dG(self, s):
        return s

    def ddG(self, s):
        return np.ones_like(np.asarray(s, dtype=float))

    def phi(self, r):
        return np.sin(np.pi * r) ** 2

    def dphi(self, r):
        return np.pi * np.sin(2 * np.pi * r)

    def ddphi(self, r):
        return 2 * np.pi ** 2 * np.cos(2 * np.pi * r)


def default_potential(kind, **params):
    if kind == "eam":
        return EamPotential(**params)
    if kind == "antiplane":
        return AntiplanePotential()
    raise ValueError(f"unknown potential kind {kind!r}")


@dataclass
class SiteEnergyModel:
    """Site potential together with the applied macroscopic gradient F (m x 2)."""

    potential: object
    F: np.ndarray = field(default_factory=lambda: np.zeros((1, 2)))

    def __post_init__(self):
        self.F = np.atleast_2d(np.asarray(self.F, dtype=float))

    @property
    def m(self):
        return self.F.shape[0]

    def bond_args(self, offsets, du, du0=None):
        """Total per-bond arguments F@rho + du0 + du, shape (k, m)."""
        offsets = np.asarray(offsets, dtype=float)
        g = offsets @ self.F.T
        if du0 is not None:
            g = g + np.atleast_2d(du0).reshape(len(offsets), self.m)
        if du is not None:
            g = g + np.atleast_2d(du).reshape(len(offsets), self.m)
        return g

    def _raw(self, g):
        p = self.potential
        if p.kind == "eam":
            r = np.hypot(g[:, 0], g[:, 1])
            if len(r) and r.min() < BOND_GUARD:
                raise SingularConfigurationError("bond length below guard")
            return float(np.sum(p.phi(r)) + p.embed(np.sum(p.psi(r))))
        s = np.sum(p.phi(g[:, 0]))
        return float(p.G(s))

    def site_energy(self, offsets, du, du0=None):
        """First-renormalized site energy V'(du) = V(du0+du) - V(du0)."""
        return self._raw(self.bond_args(offsets, du, du0)) - self._raw(self.bond_args(offsets, None, du0))

    def site_gradient(self, offsets, du, du0=None):
        """Analytic d site_energy / d du, shape (k, m)."""
        g = self.bond_args(offsets, du, du0)
        p = self.potential
        if p.kind == "eam":
            r = np.hypot(g[:, 0], g[:, 1])
            if len(r) and r.min() < BOND_GUARD:
                raise SingularConfigurationError("bond length below guard")
            coef = p.dphi(r) + p.dembed(np.sum(p.psi(r))) * p.dpsi(r)
            return (coef / r)[:, None] * g
        s = np.sum(p.phi(g[:, 0]))
        return (p.dG(s) * p.dphi(g[:, 0]))[:, None]

    def site_hessian(self, offsets, du, du0=None):
        """Analytic second derivative, shape (k, m, k, m)."""
        g = self.bond_args(offsets, du, du0)
        k, m = g.shape
        p = self.potential
        H = np.zeros((k, m, k, m))
        if p.kind == "eam":
            r = np.hypot(g[:, 0], g[:, 1])
            if len(r) and r.min() < BOND_GUARD:
                raise SingularConfigurationError("bond length below guard")
            ghat = g / r[:, None]
            dens = np.sum(p.psi(r))
            fp, fpp = p.dembed(dens), p.ddembed(dens)
            radial = p.ddphi(r) + fp * p.ddpsi(r)
            tang = (p.dphi(r) + fp * p.dpsi(r)) / r
            for i in range(k):
                proj = np.outer(ghat[i], ghat[i])
                H[i, :, i, :] += radial[i] * proj + tang[i] * (np.eye(2) - proj)
            v = p.dpsi(r)[:, None] * ghat
            H += fpp * np.einsum("im,jn->imjn", v, v)
            return H
        s = np.sum(p.phi(g[:, 0]))
        dphi = p.dphi(g[:, 0])
        H[:, 0, :, 0] = float(p.ddG(s)) * np.outer(dphi, dphi) + np.diag(float(p.dG(s)) * p.ddphi(g[:, 0]))
        return H


@dataclass
class CauchyBornDensity:
    """Energy per unit volume W(F) = det(A)^-1 V(F R) over the homogeneous stencil."""

    model: SiteEnergyModel
    offsets: np.ndarray      # (k,2) homogeneous stencil vectors A@d
    det_cell: float

    def __post_init__(self):
        self.offsets = np.asarray(self.offsets, dtype=float)

    def _bond_matrix(self, G, base):
        total = self.model.F.copy()
        if base is not None:
            total = total + np.atleast_2d(base)
        if G is not None:
            total = total + np.atleast_2d(G)
        return self.offsets @ total.T     # (k, m)

    def density(self, G, base=None):
        """W'(F+base+G) - W'(F+base); the renormalization constants cancel."""
        e1 = self.model._raw(self._bond_matrix(G, base))
        e0 = self.model._raw(self._bond_matrix(None, base))
        return (e1 - e0) / self.det_cell

    def stress(self, G, base=None):
        """Analytic dW/dG at F+base+G, shape (m,2)."""
        g = self._bond_matrix(G, base)
        p = self.model.potential
        if p.kind == "eam":
            r = np.hypot(g[:, 0], g[:, 1])
            if len(r) and r.min() < BOND_GUARD:
                raise SingularConfigurationError("bond length below guard")
            coef = p.dphi(r) + p.dembed(np.sum(p.psi(r))) * p.dpsi(r)
            pb = (coef / r)[:, None] * g
        else:
            s = np.sum(p.phi(g[:, 0]))
            pb = (p.dG(s) * p.dphi(g[:, 0]))[:, None]
        return np.einsum("km,kd->md", pb, self.offsets) / self.det_cell

    def hessian(self, G, base=None):
        """Analytic d2W/dG2, shape (m,2,m,2)."""
        du = (self.offsets @ np.atleast_2d(G).T) if G is not None else None
        base_du = (self.offsets @ np.atleast_2d(base).T) if base is not None else None
        H = self.model.site_hessian(self.offsets, du, base_du)
        return np.einsum("imjn,id,je->mdne", H, self.offsets, self.offsets) / self.det_cell

    # -- batched versions used by assembly ------------------------------------

    def density_batch(self, G, base=None):
        """W at (F+base+G) minus at (F+base), vectorized; G shape (t,m,2)."""
        g1 = self._bond_batch(G, base)
        g0 = self._bond_batch(None, base, like=G)
        return (self._raw_batch(g1) - self._raw_batch(g0)) / self.det_cell

    def stress_batch(self, G, base=None):
        g = self._bond_batch(G, base)
        p = self.model.potential
        if p.kind == "eam":
            r = np.sqrt(np.sum(g * g, axis=2))
            if r.size and r.min() < BOND_GUARD:
                raise SingularConfigurationError("bond length below guard")
            coef = p.dphi(r) + p.dembed(np.sum(p.psi(r), axis=1))[:, None] * p.dpsi(r)
            pb = (coef / r)[:, :, None] * g
        else:
            s = np.sum(p.phi(g[:, :, 0]), axis=1)
            pb = (s[:, None] * p.dphi(g[:, :, 0]))[:, :, None]
        return np.einsum("tkm,kd->tmd", pb, self.offsets) / self.det_cell

    def _bond_batch(self, G, base, like=None):
        total = np.zeros_like(like if G is None else G) + self.model.F[None]
        if base is not None:
            total = total + base
        if G is not None:
            total = total + G
        return np.einsum("kd,tmd->tkm", self.offsets, total)

    def _raw_batch(self, g):
        p = self.model.potential
        if p.kind == "eam":
            r = np.sqrt(np.sum(g * g, axis=2))
            if r.size and r.min() < BOND_GUARD:
                raise SingularConfigurationError("bond length below guard")
            return np.sum(p.phi(r), axis=1) + p.embed(np.sum(p.psi(r), axis=1))
        s = np.sum(p.phi(g[:, :, 0]), axis=1)
        return p.G(s)


def cauchy_born(model, lattice_model):
    """Cauchy-Born density for a site model over a lattice's homogeneous stencil."""
    tpl = lattice_model.offset_template()
    return CauchyBornDensity(model=model, offsets=(tpl @ lattice_model.cell.T),
                             det_cell=lattice_model.det_cell)
