"""Experiment front end: case setup, brute-force reference solutions, adaptive
and a-priori-graded runs, CSV/JSON/SVG outputs."""

import hashlib
import json
import time
from dataclasses import dataclass, field, asdict
from pathlib import Path
from typing import Optional

import numpy as np

from . import estimator as est
from .adapt import AdaptiveConfig, AdaptiveState, run_adaptive
from .errors import ConfigError, NonconvergenceError
from .lattice import (SQRT3, TRIANGULAR_CELL, AntiplaneCrack, MicroCrack,
                      ScrewDislocation, apply_defect, build_lattice,
                      canonical_triangulation, u12_distance)
from .mesh import build_initial_mesh
from .potentials import AntiplanePotential, EamPotential, SiteEnergyModel
from .predictors import predictor_for
from .solve import SolveSettings, minimize
from .schemes import ALL_KINDS

CASES = ("micro_crack", "screw", "antiplane_crack")
SHARP = ("grac", "qcf")

#: scheme availability per case: GRAC/QCF are not offered for the crack
#: (reconstruction near a crack tip is not defined).
CASE_SCHEMES = {
    "micro_crack": ("grac", "qcf", "bqce", "bqcf", "bgfc"),
    "screw": ("grac", "qcf", "bqce", "bqcf", "bgfc"),
    "antiplane_crack": ("bqce", "bqcf", "bgfc"),
}

DEFECT_KIND = {"micro_crack": "point", "screw": "dislocation", "antiplane_crack": "crack"}


@dataclass
class RunConfig:
    case: str = "micro_crack"
    scheme: str = "bqce"
    # defect parameters
    k: int = 11
    stretch: float = 0.03
    shear: float = 0.03
    burgers: float = 1.0
    core: tuple = (0.5, 0.5)
    sif: float = 1.0
    tip: tuple = (0.4, SQRT3 / 4.0)
    # potential
    potential_kind: Optional[str] = None     # default by case
    a: float = 4.0
    b: float = 3.0
    c: float = 10.0
    r_cut: Optional[float] = None            # default by case/scheme
    # geometry
    R_a0: float = 3.0
    R_b0: Optional[float] = None             # 0 for sharp schemes, 3 otherwise
    R_omega: float = 300.0
    grading: float = 1.0
    # solver / adaptivity
    solver_tol: float = 1e-8
    solver_max_iter: int = 8000
    adaptive: AdaptiveConfig = field(default_factory=AdaptiveConfig)
    # reference
    reference_radius: Optional[float] = None  # default 2 * R_omega
    reference_tol: float = 1e-9
    reference_dir: str = "references"
    with_reference: bool = True
    seed: int = 0

    def validate(self):
        if self.case not in CASES:
            raise ConfigError(f"unknown case {self.case!r}")
        if self.scheme not in ALL_KINDS:
            raise ConfigError(f"unknown scheme {self.scheme!r}")
        if self.scheme not in CASE_SCHEMES[self.case]:
            raise ConfigError(f"scheme {self.scheme} is not offered for case {self.case}")
        return self

    def resolved_r_cut(self):
        if self.r_cut is not None:
            return self.r_cut
        if self.case == "micro_crack":
            return 1.01 if self.scheme in SHARP else 1.99
        return 1.01

    def resolved_R_b0(self):
        if self.scheme in SHARP:
            return 0.0
        return 3.0 if self.R_b0 is None else self.R_b0

    def defect(self):
        if self.case == "micro_crack":
            return MicroCrack(k=self.k)
        if self.case == "screw":
            return ScrewDislocation(core=tuple(self.core), burgers=self.burgers)
        return AntiplaneCrack(tip=tuple(self.tip), sif=self.sif)

    def site_model(self):
        if self.case == "micro_crack":
            F = np.array([[1.0, self.shear], [0.0, 1.0 + self.stretch]])
            return SiteEnergyModel(EamPotential(a=self.a, b=self.b, c=self.c), F)
        return SiteEnergyModel(AntiplanePotential(), np.zeros((1, 2)))

    def grading_default(self):
        return 1.5 if self.case == "antiplane_crack" else 1.0


def apply_overrides(cfg, overrides):
    """Apply flat config-file keys onto a RunConfig."""
    mapping = {
        "case": "case", "scheme": "scheme", "seed": "seed",
        "defect.k": "k", "defect.stretch": "stretch", "defect.shear": "shear",
        "potential.kind": "potential_kind", "potential.a": "a",
        "potential.b": "b", "potential.c": "c", "potential.r_cut": "r_cut",
        "predictor.burgers": "burgers", "predictor.sif": "sif",
        "mesh.r_a": "R_a0", "mesh.r_b": "R_b0", "mesh.r_omega": "R_omega",
        "mesh.grading": "grading",
        "solver.tol": "solver_tol", "solver.max_iter": "solver_max_iter",
        "reference.radius": "reference_radius", "reference.dir": "reference_dir",
        "reference.enabled": "with_reference",
    }
    adaptive_map = {
        "adaptive.n_max": "N_max", "adaptive.eta_tol": "eta_tol",
        "adaptive.tau1": "tau1", "adaptive.tau2": "tau2", "adaptive.k_max": "K",
        "adaptive.r_max": "R_max", "adaptive.max_steps": "max_steps",
        "adaptive.exact_estimator": "exact_estimator",
    }
    for key, val in overrides.items():
        if key in mapping:
            setattr(cfg, mapping[key], val)
        elif key in adaptive_map:
            setattr(cfg.adaptive, adaptive_map[key], val)
        elif key in ("predictor.kind",):
            pass   # implied by the case
        elif key in ("predictor.core_x",):
            cfg.core = (val, cfg.core[1])
        elif key in ("predictor.core_y",):
            cfg.core = (cfg.core[0], val)
        else:
            raise ConfigError(f"unknown config key {key!r}")
    return cfg


# ----------------------------------------------------------------- case setup

def build_case(cfg, R_omega=None, model_radius=None):
    """(model, site_model, predictor, defect_kind) for a run configuration."""
    cfg.validate()
    r_cut = cfg.resolved_r_cut()
    R = R_omega if R_omega is not None else cfg.R_omega
    if model_radius is None:
        model_radius = cfg.adaptive.R_max if cfg.adaptive.R_max > R else R
        model_radius = model_radius + r_cut + 3
    m = 2 if cfg.case == "micro_crack" else 1
    model = build_lattice(TRIANGULAR_CELL, model_radius, r_cut, displacement_dim=m)
    model = apply_defect(model, cfg.defect())
    return model, cfg.site_model(), predictor_for(model.defect, m=m), DEFECT_KIND[cfg.case]


# ------------------------------------------------------------------ reference

class AtomisticSystem:
    """Full atomistic functional over all live sites (reference solves)."""

    def __init__(self, model, site_model, predictor, clamp_width=None):
        from . import kernels
        self.model = model
        self.site_model = site_model
        self.m = site_model.m
        st = model.stencils()
        from .predictors import bond_differences_u0
        du0 = bond_differences_u0(predictor, model, st)
        self.base = np.ascontiguousarray(st.rho @ site_model.F.T + du0)
        self.ptr, self.nbr = st.ptr, st.nbr
        self.ctr = np.arange(model.n_sites, dtype=np.int64)
        clamp_width = (model.cutoff + 0.1) if clamp_width is None else clamp_width
        r = np.hypot(*model.positions.T)
        self.free_mask = model.live & (r <= model.radius - clamp_width)
        self.free = np.flatnonzero(self.free_mask)
        self.ndof = len(self.free) * self.m
        self.w = np.where(model.live, 1.0, 0.0)
        if site_model.potential.kind == "eam":
            p = site_model.potential
            self._args = (p.a, p.b, p.c, p.rho0)
            self._grad = kernels.eam_energy_gradient
            self._energies = kernels.eam_site_energies
        else:
            self._args = ()
            self._grad = kernels.antiplane_energy_gradient
            self._energies = kernels.antiplane_site_energies
        zero = np.zeros((model.n_sites, self.m))
        self.v0 = np.ascontiguousarray(self._energies(self.ptr, self.nbr, self.ctr, self.base, zero, *self._args))

    def field(self, x):
        u = np.zeros((self.model.n_sites, self.m))
        u[self.free] = np.asarray(x, float).reshape(len(self.free), self.m)
        return np.ascontiguousarray(u)

    def energy_and_gradient(self, x):
        u = self.field(x)
        g = np.zeros_like(u)
        e = self._grad(self.ptr, self.nbr, self.ctr, self.base, u, self.w, self.v0, *self._args, g)
        return float(e), g[self.free].ravel()

    def energy(self, x):
        return self.energy_and_gradient(x)[0]

    def gradient(self, x):
        return self.energy_and_gradient(x)[1]

    # minimal duck-typing for solve.minimize
    is_energy_based = True


@dataclass
class ReferenceSolution:
    u_sites: np.ndarray        # (n_sites, m) over its own model
    model: object
    meta: dict

    def values_at_z(self, zcoords):
        ids = self.model.site_ids(zcoords)
        if (ids < 0).any():
            raise ConfigError("reference does not cover the requested window")
        return self.u_sites[ids]


def _reference_key(cfg, radius, tol):
    payload = json.dumps({
        "case": cfg.case, "k": cfg.k, "stretch": cfg.stretch, "shear": cfg.shear,
        "burgers": cfg.burgers, "core": list(cfg.core), "sif": cfg.sif,
        "tip": [round(v, 12) for v in cfg.tip],
        "pot": [cfg.a, cfg.b, cfg.c], "r_cut": cfg.resolved_r_cut(),
        "radius": radius, "tol": tol,
    }, sort_keys=True)
    return hashlib.sha256(payload.encode()).hexdigest()[:16]


def compute_reference(cfg, radius=None, tol=None, cache_dir=None, verbose=False):
    """Full-atomistic reference minimization, cached on disk."""
    radius = radius if radius is not None else (cfg.reference_radius or 2 * cfg.R_omega)
    tol = tol if tol is not None else cfg.reference_tol
    cache_dir = Path(cache_dir if cache_dir is not None else cfg.reference_dir)
    cache_dir.mkdir(parents=True, exist_ok=True)
    key = _reference_key(cfg, radius, tol)
    path = cache_dir / f"ref_{cfg.case}_{key}.npz"
    r_cut = cfg.resolved_r_cut()
    m = 2 if cfg.case == "micro_crack" else 1
    model = build_lattice(TRIANGULAR_CELL, radius, r_cut, displacement_dim=m)
    model = apply_defect(model, cfg.defect())
    if path.exists():
        data = np.load(path)
        return ReferenceSolution(u_sites=data["u"], model=model, meta=json.loads(str(data["meta"])))
    site_model = cfg.site_model()
    pred = predictor_for(model.defect, m=m)
    sys = AtomisticSystem(model, site_model, pred)
    t0 = time.perf_counter()
    res = minimize(sys, SolveSettings(residual_tol=tol, max_iterations=100000, maxcor=12))
    u = sys.field(res.u)
    meta = {"radius": radius, "tol": tol, "iterations": res.iterations,
            "residual": res.residual_norm, "time_s": time.perf_counter() - t0,
            "energy": res.energy, "n_sites": model.n_sites}
    np.savez_compressed(path, u=u, meta=json.dumps(meta))
    if verbose:
        print(f"reference {path.name}: {meta}")
    return ReferenceSolution(u_sites=u, model=model, meta=meta)


# ----------------------------------------------------------------- error hook

class ErrorOracle:
    """True-error functional against a cached reference, on the canonical
    triangulation of the window Lambda ∩ Omega (of the initial R_omega)."""

    def __init__(self, run_model, reference, R_window):
        self.model = run_model
        r = np.hypot(*run_model.positions.T)
        self.window = np.flatnonzero(run_model.live & (r <= R_window))
        self.tri = canonical_triangulation(run_model, restrict=self.window)
        self.ref_field = np.zeros((run_model.n_sites, reference.u_sites.shape[1]))
        self.ref_field[self.window] = reference.values_at_z(run_model.zcoords[self.window])

    def __call__(self, state, u_nodes):
        uh = np.zeros_like(self.ref_field)
        uh[self.window] = est.interpolate_to_sites(state.mesh, u_nodes, self.window)
        return u12_distance(self.tri, uh, self.ref_field)

    def error_of_sites(self, u_sites):
        return u12_distance(self.tri, u_sites, self.ref_field)


# ----------------------------------------------------------------- run outputs

CSV_COLUMNS = ["step", "N", "eta_ac_sampled", "eta_ac_exact", "rho_tr", "eta_tr",
               "error", "eff_factor", "t_estimate_s", "t_solve_s",
               "R_a", "R_b", "R_omega", "alpha", "layers_a", "layers_b",
               "n_bisected", "energy"]


def _fmt(v):
    if v is None:
        return ""
    if isinstance(v, float):
        return f"{v:.10g}"
    return str(v)


def write_steps_csv(records, path):
    with open(path, "w") as fh:
        fh.write(",".join(CSV_COLUMNS) + "\n")
        for r in records:
            row = [r.step, r.N, r.eta_ac, r.eta_ac_exact, r.rho_tr, r.eta_tr,
                   r.error, r.eff_factor, r.t_estimate_s, r.t_solve_s,
                   r.R_a, r.R_b, r.R_omega, r.alpha, r.layers_a, r.layers_b,
                   r.n_bisected, r.energy]
            fh.write(",".join(_fmt(v) for v in row) + "\n")


def read_steps_csv(path):
    import csv
    rows = []
    with open(path) as fh:
        for row in csv.DictReader(fh):
            rows.append({k: (None if v == "" else (float(v) if any(c in v for c in ".eE") or "." in v else int(v)))
                         for k, v in row.items()})
    return rows


def fit_loglog_slope(N, err, last_decade=True):
    """Least-squares slope of log(err) vs log(N)."""
    N = np.asarray(N, float)
    err = np.asarray(err, float)
    keep = (N > 0) & (err > 0) & np.isfinite(err)
    N, err = N[keep], err[keep]
    if len(N) < 3:
        return 0.0
    if last_decade:
        sel = N >= N.max() / 10.0
        if sel.sum() >= 3:
            N, err = N[sel], err[sel]
    return float(np.polyfit(np.log(N), np.log(err), 1)[0])


def decay_csv(cfg, model, site_model, predictor, mesh, path):
    """Residual-force decay scatter at the zero corrector."""
    u0 = np.zeros((mesh.n_nodes, site_model.m))
    r = np.hypot(*model.positions.T)
    sel = np.flatnonzero(model.live & (r <= cfg.R_omega))
    ff = est.residual_forces(model, mesh, u0, predictor, site_model, site_ids=sel)
    mag = ff.magnitudes()
    keep = mag > 1e-16
    cls = np.full(len(sel), "bulk", dtype=object)
    if cfg.case == "antiplane_crack":
        cls[est.crack_surface_mask(model, ff, np.asarray(cfg.tip))] = "surface"
    center = mesh.center
    rr = np.hypot(*(model.positions[sel] - center).T)
    with open(path, "w") as fh:
        fh.write("r,force,class\n")
        for i in np.flatnonzero(keep):
            fh.write(f"{rr[i]:.8g},{mag[i]:.10g},{cls[i]}\n")
    return ff, rr, mag, cls


def run(cfg, out_dir, dump_meshes=False, verbose=True):
    """Adaptive run: emits steps.csv, summary.json, decay.csv and plot data."""
    cfg.validate()
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    model, site_model, predictor, defect_kind = build_case(cfg)
    mesh = build_initial_mesh(model, cfg.R_a0, cfg.resolved_R_b0(), cfg.R_omega,
                              grading=cfg.grading)
    error_fn = None
    if cfg.with_reference:
        ref = compute_reference(cfg)
        error_fn = ErrorOracle(model, ref, cfg.R_omega)
    state = AdaptiveState(cfg.scheme, mesh, site_model, predictor, defect_kind,
                          settings=SolveSettings(residual_tol=cfg.solver_tol,
                                                 max_iterations=cfg.solver_max_iter))
    decay_csv(cfg, model, site_model, predictor, mesh, out / "decay.csv")

    dumps = []

    def on_step(rec, st):
        if verbose:
            err = f" err={rec.error:.3e}" if rec.error is not None else ""
            print(f"  step {rec.step}: N={rec.N} eta={rec.eta_ac:.3e} rho_tr={rec.rho_tr:.3e}"
                  f"{err} Ra={rec.R_a:.0f} Rb={rec.R_b:.0f}", flush=True)
        if dump_meshes:
            p = out / f"mesh_step{rec.step:03d}.txt"
            st.mesh.dump(p)
            dumps.append(str(p))

    status = 0
    try:
        records, stop = run_adaptive(state, cfg.adaptive, error_fn=error_fn, on_step=on_step)
    except NonconvergenceError as exc:
        records, stop = [], f"nonconvergence: {exc}"
        status = 2
    write_steps_csv(records, out / "steps.csv")
    errs = [r.error for r in records if r.error]
    slope = fit_loglog_slope([r.N for r in records if r.error], errs) if errs else None
    summary = {
        "scheme": cfg.scheme, "defect": cfg.case, "steps": len(records),
        "final_N": records[-1].N if records else 0,
        "final_error": records[-1].error if records else None,
        "slope_error_vs_N": slope,
        "stop": stop, "status": status,
        "mesh_dumps": dumps,
    }
    with open(out / "summary.json", "w") as fh:
        json.dump(summary, fh, indent=2)
    _write_plotdata(records, out)
    return records, summary


def run_apriori(cfg, out_dir, R_a_sequence=None, verbose=True):
    """Fixed a-priori graded meshes of increasing core radius (no adaptivity)."""
    cfg.validate()
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    model, site_model, predictor, defect_kind = build_case(cfg)
    error_fn = None
    if cfg.with_reference:
        ref = compute_reference(cfg)
        error_fn = ErrorOracle(model, ref, cfg.R_omega)
    if R_a_sequence is None:
        R_a_sequence = [3, 5, 8, 12, 17, 24, 34, 48]
    from .adapt import StepRecord
    records = []
    grading = cfg.grading if cfg.grading != 1.0 else cfg.grading_default()
    for i, Ra in enumerate(R_a_sequence):
        Rb = 0.0 if cfg.scheme in SHARP else max(3.0, Ra)
        mesh = build_initial_mesh(model, Ra, Rb, cfg.R_omega, grading=grading)
        state = AdaptiveState(cfg.scheme, mesh, site_model, predictor, defect_kind,
                              settings=SolveSettings(residual_tol=cfg.solver_tol,
                                                     max_iterations=cfg.solver_max_iter))
        scheme = state.build_scheme()
        if scheme.N > cfg.adaptive.N_max:
            break
        from .solve import solve
        res = solve(scheme, state.settings)
        state.u = res.u
        u_nodes = scheme.node_field(res.u)
        rep = est.estimate(mesh, u_nodes, predictor, site_model, defect_kind)
        rec = StepRecord(step=i, N=scheme.N, R_a=Ra, R_b=Rb, R_omega=mesh.R_omega,
                         eta_ac=rep.eta_ac_sampled, rho_tr=rep.rho_tr, eta_tr=rep.eta_tr,
                         t_solve_s=res.time_s, t_estimate_s=rep.time_s, energy=res.energy)
        if error_fn is not None:
            rec.error = float(error_fn(state, u_nodes))
            if rec.error > 0:
                rec.eff_factor = (rep.eta_ac_sampled + rep.eta_tr) / rec.error
        records.append(rec)
        if verbose:
            err = f" err={rec.error:.3e}" if rec.error is not None else ""
            print(f"  graded R_a={Ra}: N={rec.N}{err}", flush=True)
    write_steps_csv(records, out / "steps.csv")
    errs = [r.error for r in records if r.error]
    summary = {
        "scheme": cfg.scheme, "defect": cfg.case, "kind": "apriori",
        "steps": len(records), "final_N": records[-1].N if records else 0,
        "final_error": records[-1].error if records else None,
        "slope_error_vs_N": fit_loglog_slope([r.N for r in records if r.error], errs) if errs else None,
    }
    with open(out / "summary.json", "w") as fh:
        json.dump(summary, fh, indent=2)
    _write_plotdata(records, out)
    return records, summary


def _write_plotdata(records, out):
    pairs = {
        "error_vs_N.csv": ("N", "error"),
        "eff_vs_N.csv": ("N", "eff_factor"),
        "time_vs_N.csv": ("N", "t_solve_s", "t_estimate_s"),
        "ratio_vs_step.csv": ("step", "R_a", "R_b"),
    }
    for name, cols in pairs.items():
        with open(out / name, "w") as fh:
            fh.write(",".join(cols) + "\n")
            for r in records:
                vals = [getattr(r, "eta_ac" if c == "eta" else c) for c in cols]
                if any(v is None for v in vals):
                    continue
                fh.write(",".join(_fmt(v) for v in vals) + "\n")


def report(run_dirs, out_dir):
    """Merge runs into comparison CSV + static SVG plots + slope fits."""
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    merged = []
    slopes = {}
    for d in run_dirs:
        d = Path(d)
        with open(d / "summary.json") as fh:
            summary = json.load(fh)
        rows = read_steps_csv(d / "steps.csv")
        label = f"{summary['defect']}/{summary['scheme']}" + (
            "/apriori" if summary.get("kind") == "apriori" else "")
        for row in rows:
            row["run"] = label
            merged.append(row)
        errs = [(r["N"], r["error"]) for r in rows if r.get("error")]
        if errs:
            slopes[label] = fit_loglog_slope([e[0] for e in errs], [e[1] for e in errs])
    with open(out / "comparison.csv", "w") as fh:
        cols = ["run"] + CSV_COLUMNS
        fh.write(",".join(cols) + "\n")
        for row in merged:
            fh.write(",".join(_fmt(row.get(c)) for c in cols) + "\n")
    with open(out / "slopes.json", "w") as fh:
        json.dump(slopes, fh, indent=2)

    def plot(xcol, ycols, fname, loglog=True, ylabel=None):
        fig, ax = plt.subplots(figsize=(6, 4.5))
        byrun = {}
        for row in merged:
            byrun.setdefault(row["run"], []).append(row)
        for label, rows in sorted(byrun.items()):
            for ycol in ycols:
                pts = [(r[xcol], r[ycol]) for r in rows if r.get(ycol) and r.get(xcol)]
                if not pts:
                    continue
                x, y = zip(*sorted(pts))
                sfx = f" [{ycol}]" if len(ycols) > 1 else ""
                (ax.loglog if loglog else ax.plot)(x, y, "o-", ms=3, label=label + sfx)
        ax.set_xlabel(xcol)
        ax.set_ylabel(ylabel or "/".join(ycols))
        ax.grid(True, which="both", alpha=0.3)
        ax.legend(fontsize=7)
        fig.tight_layout()
        fig.savefig(out / fname)
        plt.close(fig)

    plot("N", ["error"], "error_vs_N.svg")
    plot("N", ["eff_factor"], "efficiency_vs_N.svg")
    plot("N", ["t_solve_s", "t_estimate_s"], "time_vs_N.svg")
    # region ratio per step
    fig, ax = plt.subplots(figsize=(6, 4.5))
    byrun = {}
    for row in merged:
        byrun.setdefault(row["run"], []).append(row)
    for label, rows in sorted(byrun.items()):
        pts = [(r["step"], r["R_a"] / r["R_b"]) for r in rows
               if r.get("R_b") not in (None, 0) and r.get("R_a")]
        if pts:
            x, y = zip(*sorted(pts))
            ax.plot(x, y, "o-", ms=3, label=label)
    ax.set_xlabel("step")
    ax.set_ylabel("R_a / R_b")
    ax.grid(True, alpha=0.3)
    ax.legend(fontsize=7)
    fig.tight_layout()
    fig.savefig(out / "ratio_vs_step.svg")
    plt.close(fig)
    # decay scatter per run directory
    fig, ax = plt.subplots(figsize=(6, 4.5))
    for d in run_dirs:
        d = Path(d)
        f = d / "decay.csv"
        if not f.exists():
            continue
        data = np.genfromtxt(f, delimiter=",", names=True, dtype=None, encoding=None)
        if data.size:
            ax.loglog(np.atleast_1d(data["r"]), np.atleast_1d(data["force"]), ".", ms=2, alpha=0.4, label=d.name)
    ax.set_xlabel("|l|")
    ax.set_ylabel("|F(0)|")
    ax.grid(True, which="both", alpha=0.3)
    ax.legend(fontsize=7)
    fig.tight_layout()
    fig.savefig(out / "decay.svg")
    plt.close(fig)
    return slopes
