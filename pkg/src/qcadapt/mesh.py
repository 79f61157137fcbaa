"""Hybrid mesh T_h = T_a (canonical lattice triangles) + glue + graded rings.

The atomistic/blend core is always made of canonical lattice triangles whose
nodes are lattice sites. Outside it, graded rings are radial offset curves of
the core boundary chain (they round off toward circles with distance), each
stitched to the previous one by an angular merge walk, so band thickness
stays comparable to the local node spacing for any star-shaped core.

Refinement is recursive longest-edge bisection with a deterministic total
order on edges; region expansion replaces continuum triangles near the grown
core with canonical triangles and re-stitches; domain enlargement appends
rings beyond the old boundary.

For the anti-plane crack the slit (one removed lattice row) is carried out to
the domain boundary: ring chains are open, with endpoint nodes pinned to the
two crack-face rows.
"""

from dataclasses import dataclass

import numpy as np

from .errors import (CoverageError, DomainLimitReached, DomainTooSmallError,
                     TooThinBlendError)
from .lattice import canonical_triangulation, hop_reach, neighbor_stencils, _tris_cross_cut

REGION_A, REGION_B, REGION_C = 0, 1, 2
_REGION_NAMES = {REGION_A: "atomistic", REGION_B: "blend", REGION_C: "continuum"}


@dataclass
class BlendingFunction:
    """Nodal blending values: 0 in the atomistic core, 1 in the continuum."""

    node_values: np.ndarray    # per mesh node
    site_values: np.ndarray    # per lattice site (1.0 outside the core region)


class HybridMesh:
    """Mutable hybrid triangulation with region bookkeeping.

    Nodes are never re-indexed and triangles are append-only with an alive
    mask, so node ids stay stable across refinement and expansion (solution
    transfer relies on this).
    """

    def __init__(self, model, style, center, R_omega, grading, h0=1.25, buffer_layers=None):
        self.model = model
        self.style = style                     # 'sharp' | 'blended'
        self.center = np.asarray(center, dtype=float)
        self.R_omega = float(R_omega)
        self.grading = float(grading)
        self.h0 = float(h0)
        if buffer_layers is None:
            buffer_layers = 2 * hop_reach(model.offset_template())
        self.buffer_layers = buffer_layers

        self._pos = []                         # list of [x, y]
        self._node_site = []                   # lattice site id or -1
        self._clamped = []
        self.site_node = np.full(model.n_sites, -1, dtype=np.int64)

        self._tris = []                        # vertex triples (CCW)
        self._tri_region = []
        self._tri_canonical = []
        self._alive = []
        self._edge_tris = {}                   # (u,v) -> set of alive tri ids
        self._edge_mid = {}                    # (u,v) -> midpoint node id
        self._canon_keys = {}                  # sorted site triple -> tri id

        n = model.n_sites
        self.in_a = np.zeros(n, dtype=bool)
        self.in_b = np.zeros(n, dtype=bool)    # blend (blended style) only
        self.R_a = 0.0
        self.R_b = 0.0

        self._nn = neighbor_stencils(model, cutoff=1.01)
        self._finder = None

    # ------------------------------------------------------------------ nodes

    @property
    def n_nodes(self):
        return len(self._pos)

    @property
    def positions(self):
        return np.asarray(self._pos, dtype=float)

    @property
    def node_site(self):
        return np.asarray(self._node_site, dtype=np.int64)

    @property
    def clamped(self):
        return np.asarray(self._clamped, dtype=bool)

    @property
    def free_nodes(self):
        return np.flatnonzero(~self.clamped)

    def _add_node(self, xy, site=-1, clamped=False):
        self._pos.append([float(xy[0]), float(xy[1])])
        self._node_site.append(int(site))
        self._clamped.append(bool(clamped))
        nid = len(self._pos) - 1
        if site >= 0:
            self.site_node[site] = nid
        return nid

    def _site_node(self, site):
        nid = self.site_node[site]
        if nid < 0:
            nid = self._add_node(self.model.positions[site], site=site)
        return nid

    # -------------------------------------------------------------- triangles

    @property
    def n_triangles_alive(self):
        return int(np.sum(self._alive))

    def alive_tris(self):
        """(ids, (t,3) vertex array) of alive triangles."""
        ids = np.flatnonzero(np.asarray(self._alive, dtype=bool))
        tris = np.asarray(self._tris, dtype=np.int64)[ids] if len(ids) else np.empty((0, 3), np.int64)
        return ids, tris

    def _edge_key(self, a, b):
        return (a, b) if a < b else (b, a)

    def _add_tri(self, verts, region, canonical=False):
        a, b, c = (int(v) for v in verts)
        pa, pb, pc = (self._pos[v] for v in (a, b, c))
        area2 = (pb[0] - pa[0]) * (pc[1] - pa[1]) - (pb[1] - pa[1]) * (pc[0] - pa[0])
        if area2 < 0:
            b, c = c, b
        self._tris.append((a, b, c))
        self._tri_region.append(region)
        self._tri_canonical.append(canonical)
        self._alive.append(True)
        tid = len(self._tris) - 1
        for u, v in ((a, b), (b, c), (c, a)):
            self._edge_tris.setdefault(self._edge_key(u, v), set()).add(tid)
        self._finder = None
        return tid

    def _kill_tri(self, t):
        if not self._alive[t]:
            return
        self._alive[t] = False
        a, b, c = self._tris[t]
        for u, v in ((a, b), (b, c), (c, a)):
            k = self._edge_key(u, v)
            s = self._edge_tris.get(k)
            if s is not None:
                s.discard(t)
                if not s:
                    del self._edge_tris[k]
        self._finder = None

    def neighbor_across(self, t, edge):
        s = self._edge_tris.get(self._edge_key(*edge), ())
        for o in s:
            if o != t:
                return o
        return None

    def boundary_edges(self):
        return [k for k, s in self._edge_tris.items() if len(s) == 1]

    # geometric helpers -------------------------------------------------------

    def _tri_array(self, tri_ids):
        return np.asarray(self._tris, np.int64)[np.asarray(tri_ids, np.int64)]

    def areas(self, tri_ids=None):
        tris = self.alive_tris()[1] if tri_ids is None else self._tri_array(tri_ids)
        p = self.positions
        a, b, c = p[tris[:, 0]], p[tris[:, 1]], p[tris[:, 2]]
        return 0.5 * np.abs(np.cross(b - a, c - a))

    def barycenters(self, tri_ids=None):
        tris = self.alive_tris()[1] if tri_ids is None else self._tri_array(tri_ids)
        p = self.positions
        return (p[tris[:, 0]] + p[tris[:, 1]] + p[tris[:, 2]]) / 3.0

    def min_angle(self, include_canonical=False):
        """Smallest angle (degrees) over refinable triangles.

        Canonical triangles are excluded by default: the vacancy-hole fans
        are thin by construction and are never bisected.
        """
        ids, tris = self.alive_tris()
        if not include_canonical:
            keep = ~np.array([self._tri_canonical[t] for t in ids])
            tris = tris[keep]
        p = self.positions
        best = np.pi
        a, b, c = p[tris[:, 0]], p[tris[:, 1]], p[tris[:, 2]]
        for x, y, z in ((a, b, c), (b, c, a), (c, a, b)):
            u = y - x
            v = z - x
            cosang = np.sum(u * v, axis=1) / (np.linalg.norm(u, axis=1) * np.linalg.norm(v, axis=1))
            best = min(best, float(np.arccos(np.clip(cosang, -1, 1)).min()))
        return np.degrees(best)

    # ---------------------------------------------------------- point location

    def _trifinder(self):
        if self._finder is None:
            import matplotlib.tri as mtri
            ids, tris = self.alive_tris()
            p = self.positions
            self._finder_ids = ids
            self._triang = mtri.Triangulation(p[:, 0], p[:, 1], tris)
            self._finder = self._triang.get_trifinder()
        return self._finder

    def locate(self, points):
        """Alive-triangle id per point (-1 outside), vectorized."""
        points = np.atleast_2d(points)
        f = self._trifinder()
        loc = f(points[:, 0], points[:, 1])
        return np.where(loc >= 0, self._finder_ids[np.clip(loc, 0, None)], -1)

    def interpolate(self, node_values, points, outside=0.0, require_inside=False):
        """P1 evaluation of a nodal field at arbitrary points."""
        points = np.atleast_2d(points)
        vals = np.asarray(node_values, dtype=float)
        if vals.ndim == 1:
            vals = vals[:, None]
        out = np.full((len(points), vals.shape[1]), float(outside))
        tid = self.locate(points)
        ok = tid >= 0
        if require_inside and not ok.all():
            raise CoverageError("points outside mesh coverage")
        if ok.any():
            tris = self._tri_array(tid[ok])
            p = self.positions
            a, b, c = p[tris[:, 0]], p[tris[:, 1]], p[tris[:, 2]]
            d = points[ok]
            det = np.cross(b - a, c - a)
            w1 = np.cross(d - a, c - a) / det
            w2 = np.cross(b - a, d - a) / det
            w0 = 1.0 - w1 - w2
            out[ok] = (w0[:, None] * vals[tris[:, 0]] + w1[:, None] * vals[tris[:, 1]]
                       + w2[:, None] * vals[tris[:, 2]])
        return out

    def snapshot_interpolator(self, node_values):
        """Freeze current topology+values as callable(points)->values (0 outside).

        Used for solution transfer across mesh edits.
        """
        import matplotlib.tri as mtri
        _, tris = self.alive_tris()
        p = self.positions.copy()
        vals = np.asarray(node_values, dtype=float)
        vals = vals[:, None] if vals.ndim == 1 else vals.copy()
        triang = mtri.Triangulation(p[:, 0], p[:, 1], tris)
        finder = triang.get_trifinder()
        tris = tris.copy()

        def interp(points):
            points = np.atleast_2d(points)
            out = np.zeros((len(points), vals.shape[1]))
            loc = finder(points[:, 0], points[:, 1])
            ok = loc >= 0
            if ok.any():
                tt = tris[loc[ok]]
                a, b, c = p[tt[:, 0]], p[tt[:, 1]], p[tt[:, 2]]
                d = points[ok]
                det = np.cross(b - a, c - a)
                w1 = np.cross(d - a, c - a) / det
                w2 = np.cross(b - a, d - a) / det
                w0 = 1.0 - w1 - w2
                out[ok] = (w0[:, None] * vals[tt[:, 0]] + w1[:, None] * vals[tt[:, 1]]
                           + w2[:, None] * vals[tt[:, 2]])
            return out

        return interp

    # ------------------------------------------------------------ region logic

    def grow_mask(self, mask, layers):
        """Expand a site mask by nearest-neighbor lattice hops."""
        mask = mask.copy()
        ptr, nbr = self._nn.ptr, self._nn.nbr
        reps = np.diff(ptr)
        ctr = np.repeat(np.arange(self.model.n_sites), reps)
        for _ in range(layers):
            add = np.zeros_like(mask)
            sel = mask[ctr]
            add[nbr[sel]] = True
            mask |= add & self.model.live
        return mask

    def interface_sites(self):
        """One nearest-neighbor ring around the atomistic region (sharp schemes)."""
        return self.grow_mask(self.in_a, 1) & ~self.in_a

    def site_region(self):
        """Per-site region code (continuum for everything beyond a and b)."""
        r = np.full(self.model.n_sites, REGION_C, dtype=np.int8)
        r[self.in_b] = REGION_B
        r[self.in_a] = REGION_A
        return r

    # ------------------------------------------------------------------ audits

    def check_conformity(self):
        for k, s in self._edge_tris.items():
            if len(s) > 2:
                raise AssertionError(f"edge {k} shared by {len(s)} triangles")
        return True

    def dump(self, path):
        """`# qc-mesh v1` text dump: node lines `n id x y region`, triangle
        lines `t id a b c region`."""
        p = self.positions
        ns = self.node_site
        with open(path, "w") as fh:
            fh.write("# qc-mesh v1\n")
            for i in range(self.n_nodes):
                fh.write(f"n {i} {p[i,0]:.12g} {p[i,1]:.12g} {'site' if ns[i] >= 0 else 'aux'}\n")
            ids, tris = self.alive_tris()
            for t, (a, b, c) in zip(ids, tris):
                fh.write(f"t {t} {a} {b} {c} {_REGION_NAMES[self._tri_region[t]]}\n")


# ------------------------------------------------------------------ stitching

def _angles(pos, center):
    d = pos - center
    return np.arctan2(d[:, 1], d[:, 0])


def _stitch(mesh, inner, outer, closed):
    """Merge-walk triangulation of the band between two angle-ordered chains."""
    p = mesh.positions
    ai = list(_angles(p[inner], mesh.center))
    ao = list(_angles(p[outer], mesh.center))
    inner = list(inner)
    outer = list(outer)
    if closed:
        inner.append(inner[0])
        outer.append(outer[0])
        ai.append(ai[0] + 2 * np.pi)
        ao.append(ao[0] + 2 * np.pi)
    tris = []
    i = j = 0
    while i < len(inner) - 1 or j < len(outer) - 1:
        can_i = i < len(inner) - 1
        can_j = j < len(outer) - 1
        if can_i and (not can_j or ai[i + 1] <= ao[j + 1]):
            tris.append((inner[i], outer[j], inner[i + 1]))
            i += 1
        else:
            tris.append((inner[i], outer[j], outer[j + 1]))
            j += 1
    ids = []
    for tri in tris:
        if len(set(tri)) < 3:
            continue
        ids.append(mesh._add_tri(tri, REGION_C, canonical=False))
    return ids


def _order_chain_by_angle(mesh, chain, closed):
    """Order a chain CCW by angle about the center; closed loops rotate to
    start at their minimum angle so merge walks stay aligned."""
    chain = list(chain)
    if closed:
        p = mesh.positions[chain] - mesh.center
        if 0.5 * float(np.sum(np.cross(p, np.roll(p, -1, axis=0)))) < 0:
            chain = chain[::-1]
        ang = _angles(mesh.positions[chain], mesh.center)
        k = int(np.argmin(ang))
        chain = chain[k:] + chain[:k]
        ang = np.concatenate([ang[k:], ang[:k]])
    else:
        ang = _angles(mesh.positions[chain], mesh.center)
        if ang[0] > ang[-1]:
            chain = chain[::-1]
            ang = ang[::-1]
    if np.any(np.diff(ang) < -1e-9):
        raise AssertionError("chain is not star-shaped about the center")
    return chain


def _walk_edges(edges):
    """Order an edge set into a simple chain or loop (node id list)."""
    adj = {}
    for a, b in edges:
        adj.setdefault(a, []).append(b)
        adj.setdefault(b, []).append(a)
    deg1 = sorted(n for n, v in adj.items() if len(v) == 1)
    closed = not deg1
    start = deg1[0] if deg1 else min(adj)
    chain = [start]
    prev = None
    cur = start
    while True:
        nxt = [v for v in adj[cur] if v != prev]
        if not nxt:
            break
        nxt = sorted(nxt)[0]
        prev, cur = cur, nxt
        if closed and cur == start:
            break
        chain.append(cur)
        if len(chain) > len(edges) + 2:
            raise AssertionError("edge walk failed to terminate")
    return chain, closed


# --------------------------------------------------------------- construction

def _canonical_patch(mesh, patch_mask):
    """Add canonical triangles over the patch sites (existing ones kept)."""
    model = mesh.model
    sites = np.flatnonzero(patch_mask)
    tri = canonical_triangulation(model, restrict=sites)
    for verts in tri.tris:
        key = tuple(sorted(int(v) for v in verts))
        if key in mesh._canon_keys:
            continue
        nodes = [mesh._site_node(v) for v in verts]
        tid = mesh._add_tri(nodes, REGION_C, canonical=True)
        mesh._canon_keys[key] = tid


def _retag_canonical(mesh):
    """Region tags for canonical triangles from the current site sets."""
    iface = mesh.interface_sites() if mesh.style == "sharp" else None
    for key, tid in mesh._canon_keys.items():
        if not mesh._alive[tid]:
            continue
        sites = np.array(key)
        if mesh.style == "blended":
            if mesh.in_a[sites].all():
                reg = REGION_A
            elif (mesh.in_a[sites] | mesh.in_b[sites]).all():
                reg = REGION_B
            else:
                reg = REGION_C
        else:
            reg = REGION_A if (mesh.in_a[sites] | iface[sites]).all() else REGION_C
        mesh._tri_region[tid] = reg


def _patch_chain(mesh, patch_mask):
    """Outer boundary chain of the canonical patch (site nodes, angle-ordered).

    A boundary edge belongs to the stitch chain iff the missing opposite
    canonical triangle exists in the full lattice (the edge was exposed by the
    patch restriction, not by the crack slit or the lattice edge).
    """
    model = mesh.model
    edges = []
    for key, tid in mesh._canon_keys.items():
        if not mesh._alive[tid]:
            continue
        a, b, c = mesh._tris[tid]
        for (u, v) in ((a, b), (b, c), (c, a)):
            k = mesh._edge_key(u, v)
            if len(mesh._edge_tris.get(k, ())) != 1:
                continue
            su, sv = mesh.node_site[u], mesh.node_site[v]
            w = ({a, b, c} - {u, v}).pop()
            sw = mesh.node_site[w]
            zd = model.zcoords[su] + model.zcoords[sv] - model.zcoords[sw]
            d = model.site_ids(zd[None])[0]
            if d < 0 or not model.live[d]:
                continue
            cutgeo = model.cut
            if cutgeo is not None:
                if _tris_cross_cut(np.array([[su, sv, d]]), model.positions, *cutgeo)[0]:
                    continue
            edges.append((u, v))
    chain, closed = _walk_edges(edges)
    return _order_chain_by_angle(mesh, chain, closed), closed


def _crack_faces(model):
    """(y_low, y_high) face-row ordinates bracketing the crack cut."""
    tip, _ = model.cut
    rowh = model.cell[1, 1]
    j = int(np.floor(tip[1] / rowh))
    return j * rowh, (j + 1) * rowh


def _offset_polyline(pts, c, closed):
    """Offset a polyline outward (CCW assumed) by c along averaged normals."""
    if closed:
        nxt = np.roll(pts, -1, axis=0)
        prv = np.roll(pts, 1, axis=0)
    else:
        nxt = np.vstack([pts[1:], pts[-1] + (pts[-1] - pts[-2])])
        prv = np.vstack([pts[0] - (pts[1] - pts[0]), pts[:-1]])
    t1 = nxt - pts
    t2 = pts - prv
    def norm(v):
        n = np.hypot(v[:, 0], v[:, 1])[:, None]
        return v / np.where(n > 0, n, 1.0)
    t1, t2 = norm(t1), norm(t2)
    tang = norm(t1 + t2)
    nrm = np.stack([tang[:, 1], -tang[:, 0]], axis=1)   # right normal of CCW = outward
    return pts + c * nrm


def _resample_polyline(pts, spacing, closed, frac_offset=0.0):
    """Resample by arclength; closed curves keep n>=12 samples."""
    if closed:
        pts = np.vstack([pts, pts[0]])
    seg = np.hypot(*(np.diff(pts, axis=0)).T)
    s = np.concatenate([[0.0], np.cumsum(seg)])
    L = s[-1]
    if closed:
        n = max(12, int(round(L / spacing)))
        samples = (np.arange(n) + frac_offset) * L / n
    else:
        n = max(10, int(round(L / spacing)))
        samples = np.linspace(0, L, n + 1)
    x = np.interp(samples, s, pts[:, 0])
    y = np.interp(samples, s, pts[:, 1])
    return np.stack([x, y], axis=1)


class _RingGenerator:
    """Marching offset-curve rings from a boundary chain.

    Each ring is a constant-thickness normal offset of the previous one,
    resampled to the local grading spacing h(r) = clip(h0 (r/r_base)^grading,
    h0, R/4); shapes round off toward circles with distance. Crack slits keep
    open chains with endpoints projected onto the face rows.
    """

    def __init__(self, mesh, chain, closed, r_base=None):
        self.mesh = mesh
        self.closed = closed
        pts = mesh.positions[chain]
        self._cur = pts
        self.r_base = float(np.mean(np.hypot(*(pts - mesh.center).T))) if r_base is None else float(r_base)

    def h(self, r):
        m = self.mesh
        return float(min(max(m.h0, m.h0 * (r / self.r_base) ** m.grading), m.R_omega / 4.0))

    def rings_to(self, c0, R_target, stagger0=0):
        """March rings outward until min radius reaches R_target; yields node
        id lists (the caller stitches successive rings)."""
        mesh = self.mesh
        cut = mesh.model.cut
        faces = _crack_faces(mesh.model) if cut is not None else None
        cur = self._cur
        step = c0
        k = stagger0
        out = []
        while True:
            r_now = np.hypot(*(cur - mesh.center).T)
            nxt = _offset_polyline(cur, step, self.closed)
            rbar = float(np.mean(np.hypot(*(nxt - mesh.center).T)))
            nxt = _resample_polyline(nxt, self.h(rbar), self.closed, frac_offset=0.5 * (k % 2))
            if self.closed:
                ang = np.arctan2(*(nxt - mesh.center).T[::-1])
                nxt = np.roll(nxt, -int(np.argmin(ang)), axis=0)
            if faces is not None:
                nxt[0, 1] = faces[0]
                nxt[-1, 1] = faces[1]
            ids = [mesh._add_node(xy) for xy in nxt]
            out.append(ids)
            cur = nxt
            rmin = float(np.hypot(*(cur - mesh.center).T).min())
            if rmin >= R_target:
                break
            step = self.h(rbar)
            k += 1
        return out


def build_initial_mesh(model, R_a, R_b, R_omega, grading=1.0, style=None, h0=1.25):
    """Initial hybrid mesh: canonical core + offset-curve graded rings.

    R_b = 0 selects the sharp style (GRAC/QCF); R_b >= 2 the blended style.
    """
    if R_a < 2:
        raise ValueError("R_a must be >= 2")
    if style is None:
        style = "sharp" if R_b == 0 else "blended"
    if R_omega < R_a + R_b + model.cutoff:
        raise DomainTooSmallError("R_omega too small for the requested core")
    if model.radius < R_omega + model.cutoff + 1:
        raise DomainTooSmallError("lattice model does not cover the estimator window")

    center, seeds = _defect_geometry(model)
    mesh = HybridMesh(model, style, center, R_omega, grading, h0=h0)
    d = _dist_to_seeds(model, seeds)
    mesh.in_a = model.live & (d <= R_a)
    if style == "blended":
        mesh.in_b = model.live & (d <= R_a + R_b) & ~mesh.in_a
    mesh.R_a = float(R_a)
    mesh.R_b = float(R_b)

    core = mesh.in_a | mesh.in_b
    if style == "sharp":
        core = core | mesh.interface_sites()
    patch = mesh.grow_mask(core, mesh.buffer_layers)
    _canonical_patch(mesh, patch)
    _retag_canonical(mesh)

    chain, closed = _patch_chain(mesh, patch)
    gen = _RingGenerator(mesh, chain, closed)
    mesh._grading_base = gen.r_base
    prev = chain
    for ring in gen.rings_to(0.8 * h0, R_omega):
        _stitch(mesh, prev, ring, closed)
        prev = ring
    for nid in prev:
        mesh._clamped[nid] = True
    mesh.check_conformity()
    return mesh


def _defect_geometry(model):
    """Defect center point and seed positions for the region metric."""
    from .lattice import AntiplaneCrack, MicroCrack, ScrewDislocation
    d = model.defect
    if isinstance(d, MicroCrack) and len(model.removed_sites):
        pts = model.positions[model.removed_sites]
        return pts.mean(axis=0), pts
    if isinstance(d, ScrewDislocation):
        c = np.asarray(d.core, float)
        return c, c[None]
    if isinstance(d, AntiplaneCrack):
        c = np.asarray(d.tip, float)
        return c, c[None]
    z = np.zeros(2)
    return z, z[None]


def _dist_to_seeds(model, seeds):
    d = np.full(model.n_sites, np.inf)
    for s in np.atleast_2d(seeds):
        d = np.minimum(d, np.hypot(*(model.positions - s).T))
    return d


# ------------------------------------------------------------------ bisection

def _edge_order_key(mesh, edge):
    p = mesh.positions
    L = float(np.hypot(*(p[edge[0]] - p[edge[1]])))
    return (round(L, 10), min(edge), max(edge))


def _refinement_edge(mesh, t):
    """Longest edge not shared with a canonical atomistic/blend triangle."""
    a, b, c = mesh._tris[t]
    best = None
    for e in ((a, b), (b, c), (c, a)):
        nb = mesh.neighbor_across(t, e)
        if nb is not None and mesh._tri_canonical[nb]:
            continue
        key = _edge_order_key(mesh, e)
        if best is None or key > best[0]:
            best = (key, mesh._edge_key(*e))
    if best is None:
        raise AssertionError("triangle locked between canonical triangles")
    return best[1]


def _bisect_at(mesh, t, edge):
    """Split triangle t at the given edge; midpoints shared via edge registry."""
    key = mesh._edge_key(*edge)
    mid = mesh._edge_mid.get(key)
    if mid is None:
        p = mesh.positions
        xy = 0.5 * (p[key[0]] + p[key[1]])
        clamp = bool(mesh._clamped[key[0]] and mesh._clamped[key[1]]
                     and len(mesh._edge_tris.get(key, ())) == 1)
        mid = mesh._add_node(xy, clamped=clamp)
        mesh._edge_mid[key] = mid
    a, b, c = mesh._tris[t]
    other = ({a, b, c} - set(key)).pop()
    region = mesh._tri_region[t]
    mesh._kill_tri(t)
    t1 = mesh._add_tri((key[0], mid, other), region, canonical=False)
    t2 = mesh._add_tri((mid, key[1], other), region, canonical=False)
    return t1, t2


def bisect(mesh, marked):
    """Conforming longest-edge bisection of the marked continuum triangles.

    Rivara-style propagation: a triangle splits at its refinement edge only
    when the neighbor across it shares that edge as its own refinement edge
    (or the edge is boundary); otherwise the neighbor refines first. The
    deterministic edge order strictly increases along the recursion, so the
    cascade terminates.
    """
    marked = [int(t) for t in marked]
    for t in marked:
        if mesh._tri_canonical[t]:
            raise ValueError("cannot bisect canonical (atomistic/blend) triangles")
    guard = 0
    for t0 in marked:
        stack = [t0]
        while stack:
            guard += 1
            if guard > 100 * (len(mesh._tris) + 100):
                raise AssertionError("bisection cascade failed to terminate")
            t = stack[-1]
            if not mesh._alive[t]:
                stack.pop()
                continue
            e = _refinement_edge(mesh, t)
            nb = mesh.neighbor_across(t, e)
            if nb is None or _refinement_edge(mesh, nb) == e:
                _bisect_at(mesh, t, e)
                if nb is not None:
                    _bisect_at(mesh, nb, e)
                stack.pop()
            else:
                stack.append(nb)
    mesh.check_conformity()
    return mesh


def _tri_min_angle(pa, pb, pc):
    best = np.inf
    pts = (pa, pb, pc)
    for i in range(3):
        u = pts[(i + 1) % 3] - pts[i]
        v = pts[(i + 2) % 3] - pts[i]
        c = np.dot(u, v) / (np.hypot(*u) * np.hypot(*v))
        best = min(best, float(np.arccos(np.clip(c, -1, 1))))
    return best


def _flip_zone(mesh, seed_tris, sweeps=3):
    """Lawson-style edge flips among non-canonical triangles near the seeds."""
    p = lambda v: np.asarray(mesh._pos[v])
    zone = set(t for t in seed_tris if 0 <= t < len(mesh._tris))
    for _ in range(sweeps):
        flipped = 0
        edges = set()
        for t in list(zone):
            if not mesh._alive[t]:
                continue
            a, b, c = mesh._tris[t]
            edges.update(mesh._edge_key(*e) for e in ((a, b), (b, c), (c, a)))
        for e in sorted(edges):
            s = mesh._edge_tris.get(e)
            if s is None or len(s) != 2:
                continue
            t1, t2 = sorted(s)
            if mesh._tri_canonical[t1] or mesh._tri_canonical[t2]:
                continue
            u, v = e
            a = ({*mesh._tris[t1]} - {u, v}).pop()
            b = ({*mesh._tris[t2]} - {u, v}).pop()
            # convexity of the quad and quality gain
            before = min(_tri_min_angle(p(u), p(v), p(a)), _tri_min_angle(p(u), p(v), p(b)))
            c1 = np.cross(p(b) - p(a), p(u) - p(a))
            c2 = np.cross(p(v) - p(a), p(b) - p(a))
            if c1 * c2 <= 0:
                continue
            after = min(_tri_min_angle(p(a), p(b), p(u)), _tri_min_angle(p(a), p(b), p(v)))
            if after > before + 1e-12:
                region = mesh._tri_region[t1]
                mesh._kill_tri(t1)
                mesh._kill_tri(t2)
                zone.add(mesh._add_tri((a, b, u), region, canonical=False))
                zone.add(mesh._add_tri((a, b, v), region, canonical=False))
                flipped += 1
        if not flipped:
            break
    return zone


def ensure_quality(mesh, target=10.0, max_rounds=6):
    """Drive the minimum angle of non-canonical triangles above `target` by
    flips, smoothing, and (as a last resort) bisecting remaining slivers."""
    for rnd in range(max_rounds):
        ids, tris = mesh.alive_tris()
        keep = [i for i, t in enumerate(ids) if not mesh._tri_canonical[t]]
        if not keep:
            return
        p = mesh.positions
        sub = tris[keep]
        a, b, c = p[sub[:, 0]], p[sub[:, 1]], p[sub[:, 2]]
        mina = np.full(len(sub), np.inf)
        for x, y, z in ((a, b, c), (b, c, a), (c, a, b)):
            u = y - x
            v = z - x
            cos = np.sum(u * v, axis=1) / (np.linalg.norm(u, axis=1) * np.linalg.norm(v, axis=1))
            mina = np.minimum(mina, np.degrees(np.arccos(np.clip(cos, -1, 1))))
        bad = [ids[keep[i]] for i in np.flatnonzero(mina < target)]
        if not bad:
            return
        zone = _flip_zone(mesh, bad)
        _smooth_zone(mesh, zone, sweeps=4)
        if rnd >= 2:
            # remaining slivers: split their long edges, then re-smooth
            still = [t for t in bad if mesh._alive[t]]
            if still:
                bisect(mesh, [t for t in still if not mesh._tri_canonical[t]])
    mesh.check_conformity()


def _smooth_zone(mesh, seed_tris, sweeps=4):
    """Laplacian-smooth non-site, non-clamped nodes around the given triangles.

    Crack-face nodes slide only along their face row; a move is rejected if it
    would invert an incident triangle or drop its quality.
    """
    zone = set()
    for t in seed_tris:
        if 0 <= t < len(mesh._tris) and mesh._alive[t]:
            zone.update(mesh._tris[t])
    zone = [v for v in sorted(zone) if mesh._node_site[v] == -1 and not mesh._clamped[v]]
    if not zone:
        return
    incident = {v: set() for v in zone}
    ids, tris = mesh.alive_tris()
    for t, verts in zip(ids, tris):
        for v in verts:
            if v in incident:
                incident[v].add(t)
    faces = _crack_faces(mesh.model) if mesh.model.cut is not None else None

    def tri_minang2(pos_of):
        # squared-sine proxy for the smallest angle (cheap, monotone)
        best = np.inf
        for (x, y, z) in ((0, 1, 2), (1, 2, 0), (2, 0, 1)):
            u = pos_of[y] - pos_of[x]
            v = pos_of[z] - pos_of[x]
            cr = u[0] * v[1] - u[1] * v[0]
            s = (cr / (np.hypot(*u) * np.hypot(*v))) ** 2 * np.sign(cr)
            best = min(best, s)
        return best

    for _ in range(sweeps):
        for v in zone:
            tids = [t for t in incident[v] if mesh._alive[t]]
            if not tids:
                continue
            nbrs = set()
            for t in tids:
                nbrs.update(mesh._tris[t])
            nbrs.discard(v)
            target = np.mean([mesh._pos[u] for u in sorted(nbrs)], axis=0)
            old = list(mesh._pos[v])
            if faces is not None and (abs(old[1] - faces[0]) < 1e-9 or abs(old[1] - faces[1]) < 1e-9):
                target[1] = old[1]
            before = min(tri_minang2(np.array([mesh._pos[u] for u in mesh._tris[t]])) for t in tids)
            mesh._pos[v][0], mesh._pos[v][1] = float(target[0]), float(target[1])
            after = min(tri_minang2(np.array([mesh._pos[u] for u in mesh._tris[t]])) for t in tids)
            if after < before and after < 0.22:   # sin^2(28deg): keep healthy moves
                mesh._pos[v][0], mesh._pos[v][1] = old
    mesh._finder = None


# ----------------------------------------------------------------- expansion

def expand_regions(mesh, layers_a, layers_b):
    """Expand the atomistic region by layers_a hops and the blend outer
    boundary by layers_a + layers_b hops (the blend width grows by layers_b).

    Continuum triangles near the grown canonical patch are replaced by
    canonical triangles and the gap is re-stitched. Returns ids of nodes
    created by the expansion (for solution transfer).
    """
    if layers_a == 0 and layers_b == 0:
        return []
    n_before = mesh.n_nodes
    total = layers_a + layers_b
    if mesh.style == "blended":
        outer = mesh.grow_mask(mesh.in_a | mesh.in_b, total)
        mesh.in_a = mesh.grow_mask(mesh.in_a, layers_a)
        mesh.in_b = outer & ~mesh.in_a
    else:
        mesh.in_a = mesh.grow_mask(mesh.in_a, total)
    mesh.R_a += layers_a
    mesh.R_b += layers_b

    core = mesh.in_a | mesh.in_b
    if mesh.style == "sharp":
        core = core | mesh.interface_sites()
    patch = mesh.grow_mask(core, mesh.buffer_layers)
    pr = np.hypot(*(mesh.model.positions[patch] - mesh.center).T)
    if pr.max() + mesh.model.cutoff + 2 * mesh.h0 > mesh.R_omega:
        raise DomainTooSmallError("region expansion would reach the domain boundary")

    _canonical_patch(mesh, patch)
    _retag_canonical(mesh)
    chain_in, closed_in = _patch_chain(mesh, patch)

    # delete non-canonical triangles covered by (or hugging) the new patch
    from scipy.spatial import cKDTree
    tree = cKDTree(mesh.model.positions[patch])
    ids, _ = mesh.alive_tris()
    margin = 0.95 * mesh.h0
    exposed = set()

    def delete_tri(t):
        verts = mesh._tris[t]
        edges_before = [(verts[0], verts[1]), (verts[1], verts[2]), (verts[2], verts[0])]
        mesh._kill_tri(t)
        for e in edges_before:
            k = mesh._edge_key(*e)
            s = mesh._edge_tris.get(k)
            if s is not None and len(s) == 1 and not mesh._tri_canonical[next(iter(s))]:
                exposed.add(k)

    for t in ids:
        if mesh._tri_canonical[t]:
            continue
        if tree.query(mesh.positions[list(mesh._tris[t])])[0].min() < margin:
            delete_tri(t)

    # erode until the frontier walks into a star-shaped chain
    chain_out = closed_out = None
    for _attempt in range(120):
        frontier = [k for k in exposed if len(mesh._edge_tris.get(k, ())) == 1
                    and not mesh._tri_canonical[next(iter(mesh._edge_tris[k]))]]
        adj = {}
        for a, b in frontier:
            adj.setdefault(a, []).append(b)
            adj.setdefault(b, []).append(a)
        bad_nodes = sorted(n for n, v in adj.items() if len(v) > 2)
        if not bad_nodes:
            chain, closed = _walk_edges(frontier)
            if len(chain) < (len(frontier) if closed else len(frontier) + 1):
                # disconnected frontier: erode around the unreached part
                bad_nodes = sorted(set(adj) - set(chain))[:3]
            else:
                if closed:
                    pp = mesh.positions[chain] - mesh.center
                    if 0.5 * float(np.sum(np.cross(pp, np.roll(pp, -1, axis=0)))) < 0:
                        chain = chain[::-1]
                    ang = _angles(mesh.positions[chain], mesh.center)
                    k0 = int(np.argmin(ang))
                    chain = chain[k0:] + chain[:k0]
                    ang = np.concatenate([ang[k0:], ang[:k0]])
                else:
                    ang = _angles(mesh.positions[chain], mesh.center)
                    if ang[0] > ang[-1]:
                        chain = chain[::-1]
                        ang = ang[::-1]
                d = np.diff(ang)
                if d.min() >= -1e-9:
                    chain_out, closed_out = chain, closed
                    break
                bad_nodes = [chain[int(np.argmin(d)) + 1]]
        killed = 0
        for v in bad_nodes:
            for t in sorted(set().union(*(mesh._edge_tris.get(mesh._edge_key(v, u), set())
                                          for u in adj.get(v, [v])))):
                if mesh._alive[t] and not mesh._tri_canonical[t] and v in mesh._tris[t]:
                    delete_tri(t)
                    killed += 1
        if killed == 0:
            # fall back to deleting every alive non-canonical triangle at v
            for v in bad_nodes:
                for t in range(len(mesh._tris)):
                    if mesh._alive[t] and not mesh._tri_canonical[t] and v in mesh._tris[t]:
                        delete_tri(t)
                        killed += 1
        if killed == 0:
            raise AssertionError("frontier erosion stalled")
    else:
        raise AssertionError("frontier erosion failed to converge")
    band = _stitch(mesh, chain_in, chain_out, closed_in and closed_out)
    zone = set(band)
    for _ in range(3):
        extra = []
        for t in list(zone):
            if not mesh._alive[t]:
                continue
            verts = mesh._tris[t]
            for e in ((verts[0], verts[1]), (verts[1], verts[2]), (verts[2], verts[0])):
                nb = mesh.neighbor_across(t, e)
                if nb is not None and not mesh._tri_canonical[nb]:
                    extra.append(nb)
        zone.update(extra)
    for _ in range(2):
        zone = _flip_zone(mesh, zone)
        _smooth_zone(mesh, zone, sweeps=5)
    ensure_quality(mesh)
    mesh.check_conformity()
    return list(range(n_before, mesh.n_nodes))


def enlarge_domain(mesh, factor, R_max=None):
    """Scale R_omega by `factor`, extending the graded rings outward.

    The interior is untouched; the old clamped boundary becomes free and the
    new outer ring is clamped. Raises DomainLimitReached past R_max.
    """
    if factor <= 1:
        raise ValueError("enlargement factor must exceed 1")
    new_R = mesh.R_omega * factor
    if R_max is not None and new_R > R_max + 1e-9:
        raise DomainLimitReached(f"R_omega {new_R:.1f} would exceed R_max {R_max:.1f}")
    n_before = mesh.n_nodes
    clamped = mesh.clamped
    old_boundary = [k for k in mesh.boundary_edges() if clamped[k[0]] and clamped[k[1]]]
    chain, closed = _walk_edges(old_boundary)
    chain = _order_chain_by_angle(mesh, chain, closed)
    mesh.R_omega = float(new_R)
    gen = _RingGenerator(mesh, chain, closed, r_base=getattr(mesh, "_grading_base", None))
    for nid in chain:
        mesh._clamped[nid] = False
    prev = chain
    r_now = float(np.mean(np.hypot(*(mesh.positions[chain] - mesh.center).T)))
    for ring in gen.rings_to(gen.h(r_now), new_R, stagger0=1):
        _stitch(mesh, prev, ring, closed)
        prev = ring
    for nid in prev:
        mesh._clamped[nid] = True
    ensure_quality(mesh)
    mesh.check_conformity()
    return list(range(n_before, mesh.n_nodes))


# ------------------------------------------------------------------ blending

def build_blending(mesh):
    """Blending function by minimizing the squared umbrella Laplacian over the
    annulus, clamped to 0 against the atomistic side and 1 against the
    continuum side; indicator function for the sharp style.
    """
    import scipy.sparse as sp
    import scipy.sparse.linalg as spla

    model = mesh.model
    n = model.n_sites
    site_beta = np.ones(n)
    site_beta[mesh.in_a] = 0.0
    if mesh.style == "sharp":
        site_beta[mesh.interface_sites()] = 0.0
        return _nodal_beta(mesh, site_beta)

    bsites = np.flatnonzero(mesh.in_b)
    if len(bsites) == 0:
        raise TooThinBlendError("empty blend annulus")
    ptr, nbr = mesh._nn.ptr, mesh._nn.nbr
    for s in bsites:
        nb = nbr[ptr[s]:ptr[s + 1]]
        if mesh.in_a[nb].any() and (~mesh.in_a[nb] & ~mesh.in_b[nb]).any():
            raise TooThinBlendError("blend annulus narrower than two layers")

    col = np.full(n, -1, dtype=np.int64)
    col[bsites] = np.arange(len(bsites))
    rows, cols, vals = [], [], []
    rhs = np.zeros(len(bsites))
    for i, s in enumerate(bsites):
        nb = nbr[ptr[s]:ptr[s + 1]]
        rows.append(i); cols.append(i); vals.append(-float(len(nb)))
        for j in nb:
            if col[j] >= 0:
                rows.append(i); cols.append(col[j]); vals.append(1.0)
            else:
                rhs[i] -= 0.0 if mesh.in_a[j] else 1.0
    L = sp.csr_matrix((vals, (rows, cols)), shape=(len(bsites), len(bsites)))
    A = (L.T @ L).tocsc()
    b = L.T @ rhs
    x = spla.spsolve(A, b)
    site_beta[bsites] = np.clip(x, 0.0, 1.0)
    return _nodal_beta(mesh, site_beta)


def _nodal_beta(mesh, site_beta):
    node_vals = np.ones(mesh.n_nodes)
    ns = mesh.node_site
    has_site = ns >= 0
    node_vals[has_site] = site_beta[ns[has_site]]
    return BlendingFunction(node_values=node_vals, site_values=site_beta)
