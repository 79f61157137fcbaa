"""Adaptive loops: Dörfler marking, near-field layer selection, the
atomistic/blend split ratio, region expansion, domain enlargement, stopping.

Sharp schemes (GRAC/QCF) follow the interface-expansion algorithm; blended
schemes (BQCE/BQCF/BGFC) additionally allocate the expansion between the
atomistic core and the blending annulus via the ratio alpha.
"""

import time
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy.spatial import cKDTree

from . import estimator as est
from .errors import DomainLimitReached, NonconvergenceError
from .mesh import REGION_A, bisect, build_blending, enlarge_domain, expand_regions
from .schemes import CoupledScheme
from .solve import SolveSettings, solve


@dataclass
class AdaptiveConfig:
    N_max: int = 20000
    eta_tol: float = 0.0
    tau1: float = 1.0
    tau2: float = 0.7
    K: int = 3
    R_max: float = 1200.0
    doerfler_fraction: float = 0.5
    enlargement_factor: float = 1.5
    max_steps: int = 60
    exact_estimator: bool = False
    C_disloc: float = est.C_DISLOC_DEFAULT
    C_crack: float = est.C_CRACK_DEFAULT

    def __post_init__(self):
        if not (0 < self.tau2 <= 1):
            raise ValueError("tau2 must be in (0, 1]")


@dataclass
class StepRecord:
    step: int
    N: int
    R_a: float
    R_b: float
    R_omega: float
    eta_ac: float
    rho_tr: float
    eta_tr: float
    alpha: Optional[float] = None
    layers_a: int = 0
    layers_b: int = 0
    n_bisected: int = 0
    error: Optional[float] = None
    eff_factor: Optional[float] = None
    eta_ac_exact: Optional[float] = None
    t_solve_s: float = 0.0
    t_estimate_s: float = 0.0
    energy: Optional[float] = None
    enlarged: bool = False


def doerfler_mark(indicators, fraction, tri_ids=None):
    """Minimal Dörfler set: greedy descending prefix reaching
    fraction * total (ties broken by ascending element id)."""
    indicators = np.asarray(indicators, dtype=float)
    if (indicators < 0).any():
        raise ValueError("indicators must be nonnegative")
    total = indicators.sum()
    if total <= 0:
        return np.empty(0, dtype=np.int64)
    ids = np.arange(len(indicators)) if tri_ids is None else np.asarray(tri_ids)
    order = np.lexsort((ids, -indicators))
    csum = np.cumsum(indicators[order])
    k = int(np.searchsorted(csum, fraction * total - 1e-15)) + 1
    return order[:k]


def interface_layer_selection(marked_vals, dists, K, tau2):
    """Smallest k <= K whose near-field subset carries tau2 of the marked sum.

    marked_vals: indicators of the marked (non-atomistic) elements;
    dists: their distances to the atomistic region. Returns (k, near_mask);
    if the threshold is unmet at K the K-selection is used best-effort.
    """
    total = float(np.sum(marked_vals))
    if total <= 0 or len(marked_vals) == 0:
        return 0, np.zeros(len(marked_vals), dtype=bool)
    for k in range(1, K + 1):
        near = dists <= k
        if marked_vals[near].sum() >= tau2 * total - 1e-15:
            return k, near
    return K, dists <= K


def split_ratio_alpha(near_vals, d_a, d_c):
    """alpha = (sum of indicators nearer the atomistic side) / (near total)."""
    total = float(np.sum(near_vals))
    if total <= 0:
        return None
    side_a = d_a <= d_c
    return float(np.sum(near_vals[side_a]) / total)


class AdaptiveState:
    """Everything the loop mutates: mesh, current solution, scheme cache."""

    def __init__(self, kind, mesh, site_model, predictor, defect_kind,
                 settings=None):
        self.kind = kind
        self.mesh = mesh
        self.site_model = site_model
        self.predictor = predictor
        self.defect_kind = defect_kind
        self.settings = settings or SolveSettings()
        self.u = None          # flat free-node vector
        self.scheme = None
        self.beta = None

    def build_scheme(self):
        self.beta = build_blending(self.mesh) if self.kind in ("bqce", "bqcf", "bgfc") else None
        self.scheme = CoupledScheme(self.kind, self.mesh, self.site_model,
                                    self.predictor, blending=self.beta)
        return self.scheme

    def node_values(self):
        return self.scheme.node_field(self.u)


def _distances(mesh, points, mask, search_pad=6.0):
    """Distance from points to the nearest live site in the mask."""
    sites = np.flatnonzero(mask & mesh.model.live)
    if len(sites) == 0:
        return np.full(len(points), np.inf)
    pos = mesh.model.positions[sites]
    if len(sites) > 20000:
        rmax = np.hypot(*(points - mesh.center).T).max() + search_pad
        keep = np.hypot(*(pos - mesh.center).T) <= rmax
        if keep.any():
            pos = pos[keep]
    return cKDTree(pos).query(points)[0]


def adapt_step(state, config, step_index, error_fn=None):
    """One Solve-Estimate-Mark-Refine pass; returns (record, stop_reason)."""
    mesh = state.mesh
    scheme = state.build_scheme()
    warm = state.u
    if warm is not None and len(warm) != scheme.ndof:
        warm = None
    res = solve(scheme, state.settings, warm)
    state.u = res.u
    u_nodes = scheme.node_field(res.u)

    rep = est.estimate(mesh, u_nodes, state.predictor, state.site_model,
                       state.defect_kind, exact=config.exact_estimator,
                       C_disloc=config.C_disloc, C_crack=config.C_crack)
    record = StepRecord(step=step_index, N=scheme.N, R_a=mesh.R_a, R_b=mesh.R_b,
                        R_omega=mesh.R_omega, eta_ac=rep.eta_ac_sampled,
                        rho_tr=rep.rho_tr, eta_tr=rep.eta_tr,
                        eta_ac_exact=rep.eta_ac_exact,
                        t_solve_s=res.time_s, t_estimate_s=rep.time_s,
                        energy=res.energy)
    if error_fn is not None:
        record.error = float(error_fn(state, u_nodes))
        if record.error > 0:
            record.eff_factor = (rep.eta_ac_sampled + rep.eta_tr) / record.error

    # Step 2: domain enlargement / stopping
    if rep.rho_tr > config.tau1 * rep.eta_ac_sampled:
        snap = mesh.snapshot_interpolator(u_nodes)
        try:
            new_nodes = enlarge_domain(mesh, config.enlargement_factor, R_max=config.R_max)
        except DomainLimitReached:
            record.enlarged = False
            return record, "R_max"
        record.enlarged = True
        _transfer(state, snap, u_nodes)
        return record, None
    if scheme.N > config.N_max:
        return record, "N_max"
    if rep.eta_ac_sampled < config.eta_tol:
        return record, "eta_tol"

    # Step 3: mark
    marked = doerfler_mark(rep.per_element, config.doerfler_fraction)
    tri_ids = rep.tri_ids
    regions = np.array([mesh._tri_region[t] for t in tri_ids[marked]])
    outside_a = regions != REGION_A
    m_out = marked[outside_a]
    layers_a = layers_b = 0
    alpha = None
    near_ids = np.empty(0, dtype=np.int64)
    if len(m_out):
        bary = mesh.barycenters(tri_ids[m_out])
        if state.kind in ("grac", "qcf"):
            d_ref = _distances(mesh, bary, mesh.interface_sites())
        else:
            d_ref = _distances(mesh, bary, mesh.in_a)
        k, near = interface_layer_selection(rep.per_element[m_out], d_ref, config.K, config.tau2)
        near_ids = m_out[near]
        if k > 0 and len(near_ids):
            if state.kind in ("grac", "qcf"):
                layers_a = k
            else:
                d_a = d_ref[near]
                cont = ~(mesh.in_a | mesh.in_b)
                d_c = _distances(mesh, bary[near], cont)
                alpha = split_ratio_alpha(rep.per_element[near_ids], d_a, d_c)
                if alpha is not None:
                    layers_a = int(np.floor(alpha * k))
                    layers_b = k - layers_a
    record.alpha = alpha
    record.layers_a = layers_a
    record.layers_b = layers_b

    # Step 4: refine (expand first; bisect the survivors)
    to_bisect = np.setdiff1d(marked, near_ids, assume_unique=False)
    snap = mesh.snapshot_interpolator(u_nodes)
    if layers_a or layers_b:
        try:
            expand_regions(mesh, layers_a, layers_b)
        except DomainLimitReached:
            return record, "R_max"
    bis = [int(t) for t in tri_ids[to_bisect]
           if mesh._alive[t] and not mesh._tri_canonical[t]]
    record.n_bisected = len(bis)
    if bis:
        bisect(mesh, bis)
    _transfer(state, snap, u_nodes)
    return record, None


def _transfer(state, snapshot, u_nodes_old):
    """P1 transfer of the previous solution onto the edited mesh.

    Retained nodes keep their nodal values exactly; new nodes interpolate the
    frozen previous field (zero outside its footprint).
    """
    mesh = state.mesh
    n_old = len(u_nodes_old)
    vals = np.zeros((mesh.n_nodes, u_nodes_old.shape[1]))
    vals[:n_old] = u_nodes_old
    if mesh.n_nodes > n_old:
        vals[n_old:] = snapshot(mesh.positions[n_old:])
    vals[mesh.clamped] = 0.0
    state.u = vals[mesh.free_nodes].ravel()


def run_adaptive(state, config, error_fn=None, on_step=None):
    """Run the adaptive loop until a stop condition; returns step records."""
    records = []
    stop = None
    for k in range(config.max_steps):
        try:
            rec, stop = adapt_step(state, config, k, error_fn=error_fn)
        except NonconvergenceError as exc:
            if records:
                records[-1].energy = records[-1].energy  # keep partial records
            raise
        records.append(rec)
        if on_step is not None:
            on_step(rec, state)
        if stop is not None:
            break
    return records, stop
