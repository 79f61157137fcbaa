"""Assembly of the five coupling schemes over a hybrid mesh.

Energy-based: GRAC (geometric reconstruction interface), BQCE (blended
energy), BGFC (BQCE minus its homogeneous ghost-force correction).
Force-based: QCF (sharp characteristic function), BQCF (blended force).

All schemes combine three ingredients:
  * site sums evaluated by the bond kernels over a CSR subset of sites,
  * a Cauchy-Born P1 element sum with one-point (barycenter) quadrature,
  * nodal weights (characteristic or blending function) tying them together.
"""

import numpy as np

from . import kernels
from .errors import UnsupportedSchemeError
from .lattice import hop_reach
from .mesh import build_blending
from .potentials import cauchy_born
from .predictors import bond_differences_u0, grad_u0

ENERGY_KINDS = ("grac", "bqce", "bgfc")
FORCE_KINDS = ("qcf", "bqcf")
ALL_KINDS = ENERGY_KINDS + FORCE_KINDS


# ---------------------------------------------------------------------- GRAC

def hexagonal_order(template, cell):
    """Indices of the 6 nearest-neighbor offsets in cyclic (hexagonal) order."""
    rho = template @ cell.T
    ang = np.arctan2(rho[:, 1], rho[:, 0])
    return np.argsort(np.where(ang < -1e-12, ang + 2 * np.pi, ang))


def grac_coefficients(mesh):
    """Geometric reconstruction data per interface site.

    Returns {site: (C, cyc_neighbor_ids, offsets, bond_slice)} with offsets in
    cyclic hexagonal order. Diagonals are 1 toward atomistic/interface
    neighbors and 2/3 toward continuum neighbors; each row's two cyclic
    neighbors carry 1 - C[j,j], which reproduces affine fields exactly.
    Nearest-neighbor interactions only.
    """
    model = mesh.model
    if len(model.offset_template()) != 6:
        raise UnsupportedSchemeError("GRAC is implemented for nearest-neighbor interactions only")
    st = model.stencils()
    order = hexagonal_order(st.template, model.cell)
    iface = mesh.interface_sites()
    in_core = mesh.in_a
    rho_cyc = (st.template[order] @ model.cell.T).astype(float)
    out = {}
    for s in np.flatnonzero(iface):
        lo, hi = st.ptr[s], st.ptr[s + 1]
        if hi - lo != 6:
            raise UnsupportedSchemeError("interface site with incomplete stencil")
        offs = st.offs[lo:hi]
        pos_of = {int(o): lo + k for k, o in enumerate(offs)}
        bond_idx = np.array([pos_of[int(o)] for o in order], dtype=np.int64)
        cyc_nbr = st.nbr[bond_idx]
        C = np.zeros((6, 6))
        for j in range(6):
            n = cyc_nbr[j]
            diag = 1.0 if (in_core[n] or iface[n]) else 2.0 / 3.0
            C[j, j] = diag
            C[j, (j - 1) % 6] = 1.0 - diag
            C[j, (j + 1) % 6] = 1.0 - diag
        out[int(s)] = (C, cyc_nbr.copy(), rho_cyc, bond_idx)
    return out


def effective_volumes(mesh):
    """GRAC effective volumes: |T ∩ Ω_c| where Ω_c excludes the Voronoi cells
    of atomistic/interface sites. Canonical triangles lose |T|/3 per such
    vertex; everything else keeps |T|."""
    ids, tris = mesh.alive_tris()
    areas = mesh.areas(ids)
    core = mesh.in_a | mesh.interface_sites()
    w = areas.copy()
    ns = mesh.node_site
    for k, t in enumerate(ids):
        if mesh._tri_canonical[t]:
            n_ai = int(core[ns[tris[k]]].sum())
            w[k] = areas[k] * (1.0 - n_ai / 3.0)
    return ids, w, areas


# ------------------------------------------------------------------ assembly

class _SiteBlock:
    """CSR bond table for a subset of sites, in node indexing."""

    def __init__(self, mesh, site_model, predictor, sites, weights):
        model = mesh.model
        st = model.stencils()
        du0 = bond_differences_u0(predictor, model, st)
        base_all = st.rho @ site_model.F.T + du0
        sel_ptr = [0]
        nbr = []
        base = []
        ctr = []
        self.sites = np.asarray(sites, dtype=np.int64)
        for s in self.sites:
            lo, hi = st.ptr[s], st.ptr[s + 1]
            nodes = mesh.site_node[st.nbr[lo:hi]]
            if (nodes < 0).any():
                raise AssertionError("stencil neighbor outside the canonical patch")
            nbr.extend(nodes.tolist())
            base.append(base_all[lo:hi])
            ctr.append(mesh.site_node[s])
            sel_ptr.append(sel_ptr[-1] + (hi - lo))
        self.ptr = np.asarray(sel_ptr, dtype=np.int64)
        self.nbr = np.asarray(nbr, dtype=np.int64)
        self.ctr = np.asarray(ctr, dtype=np.int64)
        m = site_model.m
        self.base = np.ascontiguousarray(np.concatenate(base) if base else np.empty((0, m)))
        self.w = np.ascontiguousarray(np.asarray(weights, dtype=float))
        self.site_model = site_model
        if site_model.potential.kind == "eam":
            p = site_model.potential
            self._args = (p.a, p.b, p.c, p.rho0)
            self._energies = kernels.eam_site_energies
            self._grad = kernels.eam_energy_gradient
        else:
            self._args = ()
            self._energies = kernels.antiplane_site_energies
            self._grad = kernels.antiplane_energy_gradient
        zero = np.zeros((mesh.n_nodes, m))
        self.v0 = np.ascontiguousarray(
            self._energies(self.ptr, self.nbr, self.ctr, self.base, zero, *self._args))

    def energy_gradient(self, u_nodes, grad_out):
        return self._grad(self.ptr, self.nbr, self.ctr, self.base, u_nodes,
                          self.w, self.v0, *self._args, grad_out)

    def site_values(self, u_nodes):
        """Per-site renormalized energies (diagnostics)."""
        return self._energies(self.ptr, self.nbr, self.ctr, self.base, u_nodes, *self._args) - self.v0


class _CbBlock:
    """Vectorized Cauchy-Born element sum with one-point quadrature."""

    def __init__(self, mesh, cb, predictor, tri_ids, weights):
        self.cb = cb
        self.tri_ids = np.asarray(tri_ids, dtype=np.int64)
        self.w = np.asarray(weights, dtype=float)
        self.m = cb.model.m
        if not len(self.tri_ids):
            self.verts = np.empty((0, 3), np.int64)
            self.shape_grads = np.empty((0, 3, 2))
            self.base = np.empty((0, self.m, 2))
            return
        tris = mesh._tri_array(self.tri_ids)
        self.verts = tris
        p = mesh.positions
        a, b, c = p[tris[:, 0]], p[tris[:, 1]], p[tris[:, 2]]
        e1 = b - a
        e2 = c - a
        det = e1[:, 0] * e2[:, 1] - e1[:, 1] * e2[:, 0]
        g1 = np.stack([e2[:, 1], -e2[:, 0]], axis=1) / det[:, None]
        g2 = np.stack([-e1[:, 1], e1[:, 0]], axis=1) / det[:, None]
        self.shape_grads = np.stack([-(g1 + g2), g1, g2], axis=1)   # (t,3,2)
        self.base = grad_u0(predictor, (a + b + c) / 3.0)           # (t,m,2)

    def grad_field(self, u_nodes):
        return np.einsum("tvm,tvd->tmd", u_nodes[self.verts], self.shape_grads)

    def energy(self, u_nodes):
        if not len(self.tri_ids):
            return 0.0
        G = self.grad_field(u_nodes)
        return float(np.dot(self.w, self.cb.density_batch(G, base=self.base)))

    def add_gradient(self, u_nodes, grad_out):
        if not len(self.tri_ids):
            return
        sig = self.cb.stress_batch(self.grad_field(u_nodes), base=self.base)
        contrib = np.einsum("t,tmd,tvd->tvm", self.w, sig, self.shape_grads)
        np.add.at(grad_out, self.verts.ravel(), contrib.reshape(-1, self.m))


class _GracInterface:
    """Interface-site energies under geometric reconstruction."""

    def __init__(self, mesh, site_model, predictor, coeffs):
        self.site_model = site_model
        model = mesh.model
        st = model.stencils()
        du0_all = bond_differences_u0(predictor, model, st)
        self.entries = []
        for s, (C, cyc_nbr, offsets, bond_idx) in sorted(coeffs.items()):
            nodes = mesh.site_node[cyc_nbr]
            if (nodes < 0).any() or mesh.site_node[s] < 0:
                raise AssertionError("interface stencil outside the canonical patch")
            self.entries.append({
                "C": C,
                "nodes": nodes,
                "center": int(mesh.site_node[s]),
                "offsets": offsets,
                "du0": du0_all[bond_idx],
            })

    def energy(self, u_nodes):
        total = 0.0
        sm = self.site_model
        for e in self.entries:
            du = e["du0"] + u_nodes[e["nodes"]] - u_nodes[e["center"]]
            total += sm.site_energy(e["offsets"], e["C"] @ du) \
                - sm.site_energy(e["offsets"], e["C"] @ e["du0"])
        return total

    def add_gradient(self, u_nodes, grad_out):
        sm = self.site_model
        for e in self.entries:
            du = e["du0"] + u_nodes[e["nodes"]] - u_nodes[e["center"]]
            p = sm.site_gradient(e["offsets"], e["C"] @ du)     # (6,m)
            chain = e["C"].T @ p                                 # (6,m)
            np.add.at(grad_out, e["nodes"], chain)
            grad_out[e["center"]] -= chain.sum(axis=0)


class CoupledScheme:
    """Assembled energy/force functional of one coupling scheme.

    Energy kinds expose energy/gradient (and an exact sparse Hessian for
    diagnostics); force kinds expose the residual operator. All act on the
    flat vector of free nodal values.
    """

    def __init__(self, kind, mesh, site_model, predictor, blending=None):
        if kind not in ALL_KINDS:
            raise UnsupportedSchemeError(f"unknown scheme kind {kind!r}")
        self.kind = kind
        self.mesh = mesh
        self.site_model = site_model
        self.predictor = predictor
        self.m = site_model.m
        model = mesh.model

        self.free = mesh.free_nodes
        self.n_nodes = mesh.n_nodes
        self.N = len(self.free)
        self.ndof = self.N * self.m

        if blending is None and kind in ("bqce", "bqcf", "bgfc"):
            blending = build_blending(mesh)
        self.beta = blending

        cb = cauchy_born(site_model, model)
        self.cb = cb
        ids, tris = mesh.alive_tris()
        areas = mesh.areas(ids)

        self.interface = None
        if kind == "grac":
            if mesh.style != "sharp":
                raise UnsupportedSchemeError("GRAC requires the sharp mesh style")
            sites = np.flatnonzero(mesh.in_a)
            self.site_block = _SiteBlock(mesh, site_model, predictor, sites, np.ones(len(sites)))
            self.interface = _GracInterface(mesh, site_model, predictor, grac_coefficients(mesh))
            vol_ids, w, _ = effective_volumes(mesh)
            keep = w > 1e-14
            self.cb_block = _CbBlock(mesh, cb, predictor, vol_ids[keep], w[keep])
        elif kind in ("bqce", "bgfc"):
            sites = np.flatnonzero(mesh.in_a | mesh.in_b)
            wsite = 1.0 - self.beta.site_values[sites]
            self.site_block = _SiteBlock(mesh, site_model, predictor, sites, wsite)
            beta_T = self.beta.node_values[tris].mean(axis=1)
            keep = beta_T > 1e-14
            self.cb_block = _CbBlock(mesh, cb, predictor, ids[keep], (beta_T * areas)[keep])
            if kind == "bgfc":
                self._corr = self._bgfc_correction(cb)
        elif kind == "qcf":
            if mesh.style != "sharp":
                raise UnsupportedSchemeError("QCF requires the sharp mesh style")
            wnode = np.zeros(self.n_nodes)
            wnode[mesh.site_node[np.flatnonzero(mesh.in_a)]] = 1.0
            self._wnode = wnode
            reach = hop_reach(model.offset_template())
            eval_sites = np.flatnonzero(mesh.grow_mask(mesh.in_a, reach))
            self.site_block = _SiteBlock(mesh, site_model, predictor, eval_sites, np.ones(len(eval_sites)))
            self.cb_block = _CbBlock(mesh, cb, predictor, ids, areas)
        elif kind == "bqcf":
            self._wnode = 1.0 - self.beta.node_values
            core = mesh.in_a | mesh.in_b
            eval_sites = np.flatnonzero(mesh.grow_mask(core, hop_reach(model.offset_template())))
            self.site_block = _SiteBlock(mesh, site_model, predictor, eval_sites, np.ones(len(eval_sites)))
            beta_T = self.beta.node_values[tris].mean(axis=1)
            keep = beta_T > 1e-14
            self.cb_block = _CbBlock(mesh, cb, predictor, ids[keep], areas[keep])

    # -- helpers ---------------------------------------------------------------

    @property
    def is_energy_based(self):
        return self.kind in ENERGY_KINDS

    def node_field(self, u_free_flat):
        u = np.zeros((self.n_nodes, self.m))
        if u_free_flat is not None:
            u[self.free] = np.asarray(u_free_flat, dtype=float).reshape(self.N, self.m)
        return np.ascontiguousarray(u)

    def _restrict(self, g_nodes):
        return g_nodes[self.free].ravel()

    def _bgfc_correction(self, cb):
        """Nodal correction: BQCE gradient at zero of the defect-free
        homogeneous twin (full stencils, predictor suppressed).

        Site rows follow row(n) = sum_rho (w(n-rho) - w(n)) f0_rho with twin
        weights w = 1 on the atomistic core (vacancies restored), 1-beta on
        the blend annulus, 0 outside; rows vanish identically wherever w is
        locally constant, so only annulus-adjacent nodes are touched. Whenever
        the homogeneous per-bond force f0 vanishes (anti-plane artefact) the
        correction is identically zero and BGFC coincides with BQCE.
        """
        mesh = self.mesh
        model = mesh.model
        sm = self.site_model
        tpl = model.offset_template()
        tpl_rho = tpl @ model.cell.T
        f0 = sm.site_gradient(tpl_rho, np.zeros((len(tpl_rho), self.m)))   # (k,m)
        g = np.zeros((self.n_nodes, self.m))
        if np.abs(f0).max() > 1e-14:
            w_t = np.where(mesh.in_a, 1.0,
                           np.where(mesh.in_b, 1.0 - self.beta.site_values, 0.0))
            w_t[model.removed_sites] = 1.0
            reach = hop_reach(model.offset_template()) + 1
            zone = np.flatnonzero(mesh.grow_mask(mesh.in_b, reach) & model.live)
            zc = model.zcoords

            def w_at(ids):
                out = np.zeros(len(ids))
                ok = ids >= 0
                out[ok] = w_t[ids[ok]]
                return out

            rows = np.zeros((len(zone), self.m))
            wn = w_t[zone]
            for k, d in enumerate(tpl):
                ids = model.site_ids(zc[zone] - d)
                rows += (w_at(ids) - wn)[:, None] * f0[k][None, :]
            nodes = mesh.site_node[zone]
            if (nodes[np.abs(rows).max(axis=1) > 1e-14] < 0).any():
                raise AssertionError("twin correction row at a site without a node")
            ok = nodes >= 0
            g[nodes[ok]] += rows[ok]
            sig0 = cb.stress(np.zeros((self.m, 2)))
            blk = self.cb_block
            contrib = np.einsum("t,md,tvd->tvm", blk.w, sig0, blk.shape_grads)
            np.add.at(g, blk.verts.ravel(), contrib.reshape(-1, self.m))
        return g

    # -- energy interface --------------------------------------------------------

    def energy(self, u_free_flat):
        return self.energy_and_gradient(u_free_flat)[0]

    def gradient(self, u_free_flat):
        return self.energy_and_gradient(u_free_flat)[1]

    def energy_and_gradient(self, u_free_flat):
        if self.kind not in ENERGY_KINDS:
            raise UnsupportedSchemeError(f"{self.kind} is force-based; use residual")
        u = self.node_field(u_free_flat)
        g = np.zeros_like(u)
        e = self.site_block.energy_gradient(u, g)
        e += self.cb_block.energy(u)
        self.cb_block.add_gradient(u, g)
        if self.interface is not None:
            e += self.interface.energy(u)
            self.interface.add_gradient(u, g)
        if self.kind == "bgfc":
            e -= float(np.sum(self._corr * u))
            g = g - self._corr
        return float(e), self._restrict(g)

    # -- force interface ---------------------------------------------------------

    def residual(self, u_free_flat):
        if self.kind not in FORCE_KINDS:
            raise UnsupportedSchemeError(f"{self.kind} is energy-based; use gradient")
        u = self.node_field(u_free_flat)
        g_at = np.zeros_like(u)
        self.site_block.energy_gradient(u, g_at)
        g_cb = np.zeros_like(u)
        self.cb_block.add_gradient(u, g_cb)
        w = self._wnode[:, None]
        return self._restrict(w * g_at + (1.0 - w) * g_cb)

    # -- optional exact second derivatives (diagnostics/tests) -------------------

    def hessian(self, u_free_flat):
        import scipy.sparse as sp
        if self.kind not in ENERGY_KINDS:
            raise UnsupportedSchemeError("hessian is defined for energy kinds")
        u = self.node_field(u_free_flat)
        m = self.m
        nd = self.n_nodes * m
        rows, cols, vals = [], [], []

        def add_block(ni, nj, B):
            for p in range(m):
                for q in range(m):
                    rows.append(ni * m + p)
                    cols.append(nj * m + q)
                    vals.append(float(B[p, q]))

        def scatter_site(H, nodes, ctr, weight):
            k = len(nodes)
            for i in range(k):
                for j in range(k):
                    add_block(nodes[i], nodes[j], weight * H[i, :, j, :])
                add_block(nodes[i], ctr, -weight * H[i].sum(axis=1))
            for j in range(k):
                add_block(ctr, nodes[j], -weight * H[:, :, j, :].sum(axis=0))
            add_block(ctr, ctr, weight * H.sum(axis=(0, 2)))

        sm = self.site_model
        sb = self.site_block
        for i in range(len(sb.sites)):
            wgt = float(sb.w[i])
            if wgt == 0.0:
                continue
            lo, hi = sb.ptr[i], sb.ptr[i + 1]
            nodes = sb.nbr[lo:hi]
            ctr = int(sb.ctr[i])
            args = sb.base[lo:hi] + u[nodes] - u[ctr]
            H = sm.site_hessian(np.zeros((hi - lo, 2)), args)
            scatter_site(H, nodes, ctr, wgt)
        if self.interface is not None:
            for e in self.interface.entries:
                du = e["du0"] + u[e["nodes"]] - u[e["center"]]
                rec = e["C"] @ du
                base_args = rec + e["offsets"] @ sm.F.T
                H = sm.site_hessian(np.zeros((6, 2)), base_args)
                Hc = np.einsum("aj,ambn,bk->jmkn", e["C"], H, e["C"])
                scatter_site(Hc, e["nodes"], int(e["center"]), 1.0)
        blk = self.cb_block
        if len(blk.tri_ids):
            G = blk.grad_field(u)
            for t in range(len(blk.tri_ids)):
                HW = blk.cb.hessian(G[t], base=blk.base[t])     # (m,2,m,2)
                for vi in range(3):
                    for vj in range(3):
                        B = blk.w[t] * np.einsum("pdqe,d,e->pq", HW,
                                                 blk.shape_grads[t, vi], blk.shape_grads[t, vj])
                        add_block(int(blk.verts[t, vi]), int(blk.verts[t, vj]), B)
        H = sp.coo_matrix((vals, (rows, cols)), shape=(nd, nd)).tocsr()
        idx = (self.free[:, None] * m + np.arange(m)[None, :]).ravel()
        return H[np.ix_(idx, idx)]
