"""Command-line front end.

Subcommands: run, run-apriori, reference, report, dump-lattice, dump-mesh.
Exit codes: 0 success, 2 solver nonconvergence, 3 configuration error.
"""

import argparse
import sys

from .errors import ConfigError, NonconvergenceError, QcError


def _add_case_flags(p):
    p.add_argument("--case", choices=("micro_crack", "screw", "antiplane_crack"))
    p.add_argument("--scheme", choices=("grac", "qcf", "bqce", "bqcf", "bgfc"))
    p.add_argument("--config", help="flat key-value config file")
    p.add_argument("--out", default="runs/out", help="output directory")
    p.add_argument("--steps", type=int, help="cap on adaptive steps")
    p.add_argument("--n-max", type=int, help="DoF budget N_max")
    p.add_argument("--r-omega", type=float, help="initial domain radius")
    p.add_argument("--no-reference", action="store_true",
                   help="skip the true-error oracle")
    p.add_argument("--reference-dir", help="reference cache directory")
    p.add_argument("--dump-meshes", action="store_true")
    p.add_argument("--exact-estimator", action="store_true",
                   help="also run the exact eta^ac audit each step")
    p.add_argument("--quiet", action="store_true")


def _config_from_args(args):
    from .config import load_config
    from .experiments import RunConfig, apply_overrides
    cfg = RunConfig()
    if args.config:
        apply_overrides(cfg, load_config(args.config))
    if args.case:
        cfg.case = args.case
    if args.scheme:
        cfg.scheme = args.scheme
    if args.steps is not None:
        cfg.adaptive.max_steps = args.steps
    if args.n_max is not None:
        cfg.adaptive.N_max = args.n_max
    if args.r_omega is not None:
        cfg.R_omega = args.r_omega
    if args.no_reference:
        cfg.with_reference = False
    if args.reference_dir:
        cfg.reference_dir = args.reference_dir
    if args.exact_estimator:
        cfg.adaptive.exact_estimator = True
    return cfg.validate()


def main(argv=None):
    ap = argparse.ArgumentParser(prog="qcadapt",
                                 description="Adaptive quasicontinuum lattice statics in 2D")
    sub = ap.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="adaptive run for one case/scheme")
    _add_case_flags(p_run)

    p_apr = sub.add_parser("run-apriori", help="a-priori graded mesh sequence")
    _add_case_flags(p_apr)

    p_ref = sub.add_parser("reference", help="compute/cache a reference solution")
    _add_case_flags(p_ref)
    p_ref.add_argument("--radius", type=float, help="reference domain radius")

    p_rep = sub.add_parser("report", help="merge runs into comparison CSV + SVG plots")
    p_rep.add_argument("dirs", nargs="+", help="run directories")
    p_rep.add_argument("--out", default="runs/report")

    p_dl = sub.add_parser("dump-lattice", help="write a qc-lattice v1 text dump")
    _add_case_flags(p_dl)
    p_dl.add_argument("--radius", type=float, default=30.0)

    p_dm = sub.add_parser("dump-mesh", help="write the initial qc-mesh v1 text dump")
    _add_case_flags(p_dm)

    args = ap.parse_args(argv)
    try:
        return _dispatch(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 3
    except NonconvergenceError as exc:
        print(f"nonconvergence: {exc}", file=sys.stderr)
        return 2
    except QcError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


def _dispatch(args):
    from . import experiments as xp

    if args.command == "report":
        slopes = xp.report(args.dirs, args.out)
        for k, v in sorted(slopes.items()):
            print(f"{k}: slope {v:+.3f}")
        return 0

    cfg = _config_from_args(args)
    if args.command == "run":
        _, summary = xp.run(cfg, args.out, dump_meshes=args.dump_meshes,
                            verbose=not args.quiet)
        print(f"wrote {args.out} (final N={summary['final_N']}, stop={summary['stop']})")
        return summary.get("status", 0)
    if args.command == "run-apriori":
        _, summary = xp.run_apriori(cfg, args.out, verbose=not args.quiet)
        print(f"wrote {args.out} (final N={summary['final_N']})")
        return 0
    if args.command == "reference":
        ref = xp.compute_reference(cfg, radius=args.radius, verbose=True)
        print(f"reference ready: {ref.meta}")
        return 0
    if args.command == "dump-lattice":
        from .lattice import TRIANGULAR_CELL, apply_defect, build_lattice, dump_lattice
        from pathlib import Path
        model = build_lattice(TRIANGULAR_CELL, args.radius, cfg.resolved_r_cut(),
                              displacement_dim=2 if cfg.case == "micro_crack" else 1)
        model = apply_defect(model, cfg.defect())
        out = Path(args.out)
        out.parent.mkdir(parents=True, exist_ok=True)
        dump_lattice(model, out)
        print(f"wrote {out}")
        return 0
    if args.command == "dump-mesh":
        from .mesh import build_initial_mesh
        from pathlib import Path
        model, _, _, _ = xp.build_case(cfg)
        mesh = build_initial_mesh(model, cfg.R_a0, cfg.resolved_R_b0(),
                                  cfg.R_omega, grading=cfg.grading)
        out = Path(args.out)
        out.parent.mkdir(parents=True, exist_ok=True)
        mesh.dump(out)
        print(f"wrote {out}")
        return 0
    raise ConfigError(f"unknown command {args.command}")


if __name__ == "__main__":
    sys.exit(main())
