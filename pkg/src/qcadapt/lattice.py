"""Defected triangular lattice: sites, neighbor stencils, canonical triangulation,
P1 interpolation and discrete energy norms.

Positions are A@z for integer pairs z; site ids are assigned lexicographically
in z so that two builds with identical inputs are bit-identical.
"""

from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from .errors import DomainMismatchError

SQRT3 = np.sqrt(3.0)

#: Triangular lattice cell, columns are the generators (1,0) and (cos60, sin60).
TRIANGULAR_CELL = np.array([[1.0, 0.5], [0.0, SQRT3 / 2.0]])


@dataclass(frozen=True)
class MicroCrack:
    """Row of k vacancies along e1 (even/odd placement rule)."""
    k: int = 11


@dataclass(frozen=True)
class ScrewDislocation:
    """Anti-plane screw dislocation; removes no sites.

    The branch cut runs from the core in +e1. Bonds are kept; the predictor
    handles the multivaluedness.
    """
    core: tuple = (0.5, 0.5)
    burgers: float = 1.0


@dataclass(frozen=True)
class AntiplaneCrack:
    """Anti-plane crack: branch cut from the tip in -e1.

    Removes no sites, but bonds crossing the cut are dropped from stencils and
    the row of canonical triangles crossed by the cut is removed from every
    triangulation.
    """
    tip: tuple = (0.4, SQRT3 / 4.0)
    sif: float = 1.0


Defect = MicroCrack | ScrewDislocation | AntiplaneCrack


@dataclass
class LatticeModel:
    """Finite ball of a (possibly defected) 2D Bravais lattice."""

    cell: np.ndarray              # 2x2, columns are generators
    radius: float
    cutoff: float
    zcoords: np.ndarray           # (n,2) int64, lexicographically sorted
    positions: np.ndarray         # (n,2) float64, A @ z
    live: np.ndarray              # (n,) bool
    displacement_dim: int = 2
    defect: Optional[Defect] = None
    removed_sites: np.ndarray = field(default_factory=lambda: np.empty(0, dtype=np.int64))
    _grid: np.ndarray = field(default=None, repr=False)
    _gmin: np.ndarray = field(default=None, repr=False)

    @property
    def n_sites(self):
        return len(self.zcoords)

    @property
    def det_cell(self):
        return abs(float(np.linalg.det(self.cell)))

    def site_ids(self, z):
        """Map integer coordinates (k,2) to site ids; -1 where absent."""
        z = np.asarray(z, dtype=np.int64).reshape(-1, 2)
        g = z - self._gmin
        ok = (g >= 0).all(axis=1) & (g[:, 0] < self._grid.shape[0]) & (g[:, 1] < self._grid.shape[1])
        out = np.full(len(z), -1, dtype=np.int64)
        out[ok] = self._grid[g[ok, 0], g[ok, 1]]
        return out

    def offset_template(self):
        """Integer offsets d with 0 < |A d| <= cutoff, lexicographically sorted."""
        return _offset_template(self.cell, self.cutoff)

    @property
    def cut(self):
        """Crack branch-cut geometry as (tip, direction) or None."""
        if isinstance(self.defect, AntiplaneCrack):
            return np.asarray(self.defect.tip, dtype=float), np.array([-1.0, 0.0])
        return None

    def stencils(self, cutoff=None):
        """Memoized neighbor stencils (keyed by cutoff)."""
        if not hasattr(self, "_stencil_cache"):
            object.__setattr__(self, "_stencil_cache", {})
        key = float(cutoff) if cutoff is not None else float(self.cutoff)
        if key not in self._stencil_cache:
            self._stencil_cache[key] = neighbor_stencils(self, cutoff=key)
        return self._stencil_cache[key]


def hop_reach(template):
    """Largest nearest-neighbor hop count over the template offsets
    (hexagonal graph metric on the triangular lattice)."""
    d1, d2 = template[:, 0], template[:, 1]
    return int(np.max((np.abs(d1) + np.abs(d2) + np.abs(d1 + d2)) // 2))


def _offset_template(cell, cutoff):
    m = int(np.ceil(cutoff * np.linalg.norm(np.linalg.inv(cell), 2))) + 1
    r = np.arange(-m, m + 1)
    z1, z2 = np.meshgrid(r, r, indexing="ij")
    z = np.stack([z1.ravel(), z2.ravel()], axis=1)
    p = z @ cell.T
    d = np.hypot(p[:, 0], p[:, 1])
    keep = (d > 0) & (d <= cutoff)
    z = z[keep]
    order = np.lexsort((z[:, 1], z[:, 0]))
    return z[order]


def build_lattice(cell_matrix, radius, cutoff, displacement_dim=2):
    """All sites A@z with |A@z| <= radius, ids lexicographic in z.

    Raises ValueError for a singular cell matrix or radius <= cutoff <= 0.
    """
    cell = np.asarray(cell_matrix, dtype=float)
    if cell.shape != (2, 2) or abs(np.linalg.det(cell)) < 1e-14:
        raise ValueError("cell matrix must be a nonsingular 2x2 matrix")
    if not (radius >= cutoff > 0):
        raise ValueError("need radius >= cutoff > 0")
    bound = radius * np.linalg.norm(np.linalg.inv(cell), 2) + 1
    m = int(np.ceil(bound))
    r = np.arange(-m, m + 1)
    z1, z2 = np.meshgrid(r, r, indexing="ij")
    z = np.stack([z1.ravel(), z2.ravel()], axis=1).astype(np.int64)
    p = z @ cell.T
    keep = np.hypot(p[:, 0], p[:, 1]) <= radius + 1e-12
    z = z[keep]
    order = np.lexsort((z[:, 1], z[:, 0]))
    z = z[order]
    pos = z @ cell.T
    gmin = z.min(axis=0)
    shape = z.max(axis=0) - gmin + 1
    grid = np.full(shape, -1, dtype=np.int64)
    grid[z[:, 0] - gmin[0], z[:, 1] - gmin[1]] = np.arange(len(z))
    return LatticeModel(
        cell=cell, radius=float(radius), cutoff=float(cutoff),
        zcoords=z, positions=pos, live=np.ones(len(z), dtype=bool),
        displacement_dim=displacement_dim, _grid=grid, _gmin=gmin,
    )


def apply_defect(model, defect):
    """Return a copy of the model with the defect applied.

    Micro-crack removes the k sites along e1; screw/crack remove no sites but
    record core/tip geometry. Raises ValueError if a dislocation core or crack
    tip coincides with a lattice site or lattice row.
    """
    if isinstance(defect, MicroCrack):
        k = defect.k
        if k < 0:
            raise ValueError("micro-crack k must be >= 0")
        if k == 0:
            return replace(model, defect=defect)
        if k % 2 == 0:
            j = np.arange(-(k // 2), k // 2)
        else:
            j = np.arange(-((k - 1) // 2), (k - 1) // 2 + 1)
        z = np.stack([j, np.zeros_like(j)], axis=1)
        ids = model.site_ids(z)
        if (ids < 0).any():
            raise ValueError("micro-crack row exceeds the built lattice")
        live = model.live.copy()
        live[ids] = False
        return replace(model, live=live, removed_sites=np.sort(ids), defect=defect)
    if isinstance(defect, (ScrewDislocation, AntiplaneCrack)):
        point = np.asarray(defect.core if isinstance(defect, ScrewDislocation) else defect.tip, float)
        d = np.hypot(*(model.positions - point).T)
        if d.min() < 1e-9:
            raise ValueError("defect core coincides with a lattice site")
        row_y = point[1] / model.cell[1, 1]
        if abs(row_y - round(row_y)) < 1e-9:
            raise ValueError("branch cut would pass through a lattice row")
        return replace(model, defect=defect)
    raise ValueError(f"unknown defect descriptor {defect!r}")


def _segments_cross_cut(p0, p1, tip, direction):
    """Which segments p0->p1 cross the open ray tip + t*direction (t>0)?

    direction is axis-aligned (+-e1); the cut line is y = tip_y.
    """
    ty = tip[1]
    s0 = p0[:, 1] - ty
    s1 = p1[:, 1] - ty
    straddle = s0 * s1 < 0
    out = np.zeros(len(p0), dtype=bool)
    if not straddle.any():
        return out
    t = s0[straddle] / (s0[straddle] - s1[straddle])
    x = p0[straddle, 0] + t * (p1[straddle, 0] - p0[straddle, 0])
    if direction[0] < 0:
        out[straddle] = x < tip[0]
    else:
        out[straddle] = x > tip[0]
    return out


@dataclass
class Stencils:
    """CSR neighbor table over all sites (dead sites own zero bonds)."""

    ptr: np.ndarray        # (n+1,) int64
    nbr: np.ndarray        # (nb,) int64 site ids
    offs: np.ndarray       # (nb,) int16 index into template
    template: np.ndarray   # (nt,2) int64 integer offsets
    cell: np.ndarray

    @property
    def rho(self):
        """Per-bond lattice vectors A@d, shape (nb,2)."""
        return (self.template[self.offs] @ self.cell.T).astype(float)

    def counts(self):
        return np.diff(self.ptr)

    def stencil(self, site):
        """(offagainst vectors, neighbor ids) view for one site."""
        lo, hi = self.ptr[site], self.ptr[site + 1]
        vec = self.template[self.offs[lo:hi]] @ self.cell.T
        return NeighborStencil(center=int(site), offsets=vec.astype(float), neighbor_ids=self.nbr[lo:hi].copy())


@dataclass
class NeighborStencil:
    center: int
    offsets: np.ndarray
    neighbor_ids: np.ndarray


def neighbor_stencils(model, cutoff=None):
    """Neighbor stencils of every live site, reflecting vacancies and crack cuts.

    `cutoff` overrides the model cutoff (used for the nearest-neighbor hop
    graph that drives region layering).
    """
    tpl = _offset_template(model.cell, cutoff) if cutoff is not None else model.offset_template()
    n = model.n_sites
    nt = len(tpl)
    nbr_all = np.empty((n, nt), dtype=np.int64)
    for k, d in enumerate(tpl):
        nbr_all[:, k] = model.site_ids(model.zcoords + d)
    ok = nbr_all >= 0
    ok &= model.live[:, None]
    ok[ok] = model.live[nbr_all[ok]]
    cutgeo = model.cut
    if cutgeo is not None:
        tip, direction = cutgeo
        for k, d in enumerate(tpl):
            col = ok[:, k]
            if not col.any():
                continue
            p0 = model.positions[col]
            p1 = p0 + (d @ model.cell.T)
            cross = _segments_cross_cut(p0, p1, tip, direction)
            idx = np.flatnonzero(col)
            ok[idx[cross], k] = False
    counts = ok.sum(axis=1)
    ptr = np.zeros(n + 1, dtype=np.int64)
    np.cumsum(counts, out=ptr[1:])
    rows, cols = np.nonzero(ok)
    return Stencils(ptr=ptr, nbr=nbr_all[rows, cols], offs=cols.astype(np.int16),
                    template=tpl, cell=model.cell)


@dataclass
class CanonicalTriangulation:
    """Canonical triangulation of the lattice ball: site-id triples, CCW."""

    tris: np.ndarray       # (T,3) int64
    positions: np.ndarray  # model positions (shared)

    def __post_init__(self):
        p = self.positions
        a, b, c = (p[self.tris[:, i]] for i in range(3))
        self.areas = 0.5 * np.abs(np.cross(b - a, c - a))
        self._grads = _shape_gradients(a, b, c)

    @property
    def n_triangles(self):
        return len(self.tris)

    def shape_gradients(self):
        """Gradients of the three nodal hat functions, (T,3,2)."""
        return self._grads


def _shape_gradients(a, b, c):
    e1 = b - a
    e2 = c - a
    det = e1[:, 0] * e2[:, 1] - e1[:, 1] * e2[:, 0]
    # rows of inv([[e1],[e2]])^T give gradients of the barycentric coords on (b,c)
    g1 = np.stack([e2[:, 1], -e2[:, 0]], axis=1) / det[:, None]
    g2 = np.stack([-e1[:, 1], e1[:, 0]], axis=1) / det[:, None]
    g0 = -(g1 + g2)
    return np.stack([g0, g1, g2], axis=1)


def canonical_triangulation(model, restrict=None):
    """Delaunay-equivalent triangulation of the (defected) triangular lattice.

    Each unit rhombus splits along its short diagonal; triangles incident to
    removed sites are dropped and the hole is re-fanned from its lowest-id
    boundary vertex; for a crack, triangles crossed by the branch cut are
    removed (no fan). `restrict` optionally keeps only triangles whose
    vertices all belong to the given site-id set.
    """
    z = model.zcoords
    ids_e1 = model.site_ids(z + np.array([1, 0]))
    ids_e2 = model.site_ids(z + np.array([0, 1]))
    ids_dn = model.site_ids(z + np.array([-1, 1]))
    me = np.arange(model.n_sites)
    up = np.stack([me, ids_e1, ids_e2], axis=1)
    dn = np.stack([me, ids_e2, ids_dn], axis=1)
    tris = np.concatenate([up[(up >= 0).all(axis=1)], dn[(dn >= 0).all(axis=1)]])

    alive = model.live[tris].all(axis=1)
    dropped = tris[~alive]
    tris = tris[alive]

    cutgeo = model.cut
    if cutgeo is not None:
        tip, direction = cutgeo
        keep = ~_tris_cross_cut(tris, model.positions, tip, direction)
        tris = tris[keep]

    fans = _fan_holes(model, tris, dropped)
    if len(fans):
        tris = np.concatenate([tris, fans])

    if restrict is not None:
        mask = np.zeros(model.n_sites, dtype=bool)
        mask[np.asarray(restrict, dtype=np.int64)] = True
        tris = tris[mask[tris].all(axis=1)]

    # canonical order: by sorted vertex triple
    key = np.sort(tris, axis=1)
    order = np.lexsort((key[:, 2], key[:, 1], key[:, 0]))
    tris = tris[order]
    tris = _orient_ccw(tris, model.positions)
    return CanonicalTriangulation(tris=tris, positions=model.positions)


def _tris_cross_cut(tris, pos, tip, direction):
    ty = tip[1]
    y = pos[tris][:, :, 1] - ty
    straddle = (y.max(axis=1) > 0) & (y.min(axis=1) < 0)
    out = np.zeros(len(tris), dtype=bool)
    for i in np.flatnonzero(straddle):
        xs = []
        for a in range(3):
            p0, p1 = pos[tris[i, a]], pos[tris[i, (a + 1) % 3]]
            s0, s1 = p0[1] - ty, p1[1] - ty
            if s0 * s1 < 0:
                t = s0 / (s0 - s1)
                xs.append(p0[0] + t * (p1[0] - p0[0]))
        if xs:
            xmin = min(xs)
            out[i] = xmin < tip[0] if direction[0] < 0 else max(xs) > tip[0]
    return out


def _orient_ccw(tris, pos):
    a, b, c = (pos[tris[:, i]] for i in range(3))
    neg = np.cross(b - a, c - a) < 0
    tris = tris.copy()
    tris[neg] = tris[neg][:, [0, 2, 1]]
    return tris


def _fan_holes(model, kept, dropped):
    """Fan-triangulate vacancy holes from their lowest-id boundary vertex."""
    if len(dropped) == 0:
        return np.empty((0, 3), dtype=np.int64)
    live = model.live

    def ekey(a, b):
        return (a, b) if a < b else (b, a)

    kept_edges = {}
    for t in kept:
        for a in range(3):
            kept_edges[ekey(t[a], t[(a + 1) % 3])] = kept_edges.get(ekey(t[a], t[(a + 1) % 3]), 0) + 1
    boundary = {}
    for t in dropped:
        for a in range(3):
            i, j = t[a], t[(a + 1) % 3]
            if live[i] and live[j]:
                e = ekey(i, j)
                if kept_edges.get(e, 0) == 1:
                    boundary.setdefault(e[0], set()).add(e[1])
                    boundary.setdefault(e[1], set()).add(e[0])
    if not boundary:
        return np.empty((0, 3), dtype=np.int64)
    # walk loops
    tris = []
    visited = set()
    for start in sorted(boundary):
        if start in visited:
            continue
        loop = [start]
        visited.add(start)
        cur = start
        while True:
            nxt = [v for v in sorted(boundary[cur]) if v not in visited]
            if not nxt:
                break
            cur = nxt[0]
            loop.append(cur)
            visited.add(cur)
        if len(loop) < 3:
            continue
        p = model.positions[loop]
        if np.cross(p[1] - p[0], p[2] - p[0]).sum() < 0 or _polygon_area(p) < 0:
            loop = loop[::-1]
        k = int(np.argmin(loop))
        loop = loop[k:] + loop[:k]
        v0 = loop[0]
        for i in range(1, len(loop) - 1):
            tris.append((v0, loop[i], loop[i + 1]))
    return np.asarray(tris, dtype=np.int64).reshape(-1, 3)


def _polygon_area(p):
    x, y = p[:, 0], p[:, 1]
    return 0.5 * np.sum(x * np.roll(y, -1) - np.roll(x, -1) * y)


# -- P1 interpolation and discrete energy norms ------------------------------

def _as_field(tri, field):
    """Field values aligned with site ids; (n, m) float array."""
    f = np.asarray(field, dtype=float)
    if f.ndim == 1:
        f = f[:, None]
    n_needed = int(tri.tris.max()) + 1 if len(tri.tris) else 0
    if len(f) < n_needed:
        raise DomainMismatchError("field does not cover all triangle vertices")
    if not np.isfinite(f[np.unique(tri.tris)]).all():
        raise DomainMismatchError("field has non-finite values on the triangulation")
    return f


def p1_gradient(tri, field):
    """Exact piecewise-constant gradient of the affine interpolant, (T, m, 2)."""
    f = _as_field(tri, field)
    vals = f[tri.tris]               # (T,3,m)
    return np.einsum("tvm,tvd->tmd", vals, tri.shape_gradients())


def u12_norm(tri, field):
    """sqrt(sum_T |T| |grad_T|_F^2), the discrete H1-seminorm."""
    g = p1_gradient(tri, field)
    return float(np.sqrt(np.sum(tri.areas * np.sum(g * g, axis=(1, 2)))))


def u12_distance(tri, field_a, field_b):
    fa = _as_field(tri, field_a)
    fb = _as_field(tri, field_b)
    if fa.shape != fb.shape:
        raise DomainMismatchError("fields have mismatched shapes")
    return u12_norm(tri, fa - fb)


# -- dump format --------------------------------------------------------------

def dump_lattice(model, path):
    """Write `id x y live` lines with a `# qc-lattice v1` header."""
    with open(path, "w") as fh:
        fh.write(f"# qc-lattice v1 det={model.det_cell:.12g}\n")
        for i in range(model.n_sites):
            x, y = model.positions[i]
            fh.write(f"{i} {x:.12g} {y:.12g} {int(model.live[i])}\n")


def load_lattice_dump(path):
    """Read a dump back as (ids, positions, live); for round-trip checks."""
    ids, xs, ys, live = [], [], [], []
    with open(path) as fh:
        header = fh.readline()
        if not header.startswith("# qc-lattice v1"):
            raise ValueError("not a qc-lattice v1 dump")
        for line in fh:
            a, x, y, lv = line.split()
            ids.append(int(a)); xs.append(float(x)); ys.append(float(y)); live.append(int(lv))
    return np.array(ids), np.column_stack([xs, ys]), np.array(live, dtype=bool)
