"""Command-line driver: ``fracfem run --experiment <name> --s <val> ...``."""

import argparse
import sys

from fracfem.harness import EXPERIMENTS, ExperimentConfig, fit_rate, run_experiment


def _build_parser():
    p = argparse.ArgumentParser(prog="fracfem")
    sub = p.add_subparsers(dest="command", required=True)
    run = sub.add_parser("run", help="run a convergence experiment")
    run.add_argument("--experiment", required=True, choices=EXPERIMENTS)
    run.add_argument("--s", type=float, required=True, help="fractional order in (0,1)")
    run.add_argument("--mu", type=float, default=2.0, help="mesh grading in [1,2]")
    run.add_argument("--levels", type=int, default=4)
    run.add_argument("--h0", type=float, default=0.64)
    run.add_argument("--ratio", type=float, default=2.0)
    run.add_argument("--out", default="out")
    run.add_argument("--config", default=None, help="flat key=value file overriding flags")
    run.add_argument("--tol", type=float, default=1e-12)
    run.add_argument("--dof-cap", type=int, default=16000)
    run.add_argument("--q-sing", type=int, default=5)
    run.add_argument("--q-load", type=int, default=6)
    return p


def _parse_config_file(path):
    """Flat `key = value` lines; '#' starts a comment."""
    out = {}
    with open(path) as f:
        for ln, line in enumerate(f, 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ValueError(f"{path}:{ln}: expected 'key = value'")
            k, v = (part.strip() for part in line.split("=", 1))
            out[k] = v
    return out


_CONFIG_TYPES = {
    "experiment": str,
    "s": float,
    "mu": float,
    "levels": int,
    "h0": float,
    "ratio": float,
    "tol": float,
    "max_iter": int,
    "q_sing": int,
    "q_far": int,
    "q_ang": int,
    "q_load": int,
    "q_ball": int,
    "r_c": float,
    "coarse_segments": int,
    "sigma_max": float,
    "dof_cap": int,
    "out_dir": str,
    "h_list": lambda v: tuple(float(x) for x in v.split(",")),
}


def main(argv=None):
    args = _build_parser().parse_args(argv)
    kwargs = dict(
        experiment=args.experiment,
        s=args.s,
        mu=args.mu,
        levels=args.levels,
        h0=args.h0,
        ratio=args.ratio,
        tol=args.tol,
        dof_cap=args.dof_cap,
        q_sing=args.q_sing,
        q_load=args.q_load,
        out_dir=args.out,
    )
    if args.config:
        # config-file entries take precedence over command-line flags
        for k, v in _parse_config_file(args.config).items():
            if k not in _CONFIG_TYPES:
                raise SystemExit(f"unknown config key {k!r}")
            kwargs[k] = _CONFIG_TYPES[k](v)
    cfg = ExperimentConfig(**kwargs)
    table = run_experiment(cfg, progress=lambda msg: print(msg, flush=True))
    fit = fit_rate(table)
    print(f"wrote {cfg.out_dir}/convergence.csv")
    print(
        f"fitted slope vs ndof: {fit.slope_ndof:+.4f}   "
        f"vs h: {fit.slope_h:+.4f}   (rms residual {fit.residual:.3f})"
    )
    return 0


if __name__ == "__main__":
    sys.exit(main())
