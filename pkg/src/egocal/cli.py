"""Command-line surface.

Subcommands: design, fit, calibrate, ego, benchmark, plot-data.  Every
config-file setting can be overridden by a flag; EGOCAL_OUTDIR sets the
default output directory.
"""

from __future__ import annotations

import argparse
import csv
import importlib
import json
import os
import sys

import numpy as np

from . import __version__
from .benchmarks import generate_field_data, get_problem, problem_ids
from .calibration import ApproxPosterior, FieldData, PriorSpec, Simulator
from .design import (CalibrationProblem, GridSpec, maximin_lhd, run_algorithm1,
                     run_algorithm2, write_trace_csv)
from .experiment import ExperimentConfig, run_experiment, write_plot_data
from .gp import Design, GpConfig, InputSpace, TrainedEmulator, train_emulator
from .mcmc import credible_interval, sample


def _parse_bounds(text):
    """'0:1,0:1' -> [[0,1],[0,1]]"""
    out = []
    for part in text.split(","):
        lo, hi = part.split(":")
        out.append([float(lo), float(hi)])
    return out


def _outdir(args) -> str:
    if getattr(args, "output_dir", None):
        return args.output_dir
    return os.environ.get("EGOCAL_OUTDIR", ".")


def _write_design_csv(path, points, outputs, d):
    q = points.shape[1]
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow([f"x{j + 1}" for j in range(d)]
                        + [f"t{j + 1}" for j in range(q - d)] + ["y"])
        for row, y in zip(points, outputs):
            writer.writerow([repr(float(v)) for v in row] + [repr(float(y))])


def _read_design_csv(path, d):
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        rows = [r for r in reader if r]
    if header[-1] != "y":
        raise SystemExit(f"{path}: last column must be 'y'")
    pts = np.array([[float(v) for v in r[:-1]] for r in rows])
    y = np.array([float(r[-1]) for r in rows])
    if d >= pts.shape[1]:
        raise SystemExit("control dimension leaves no parameter columns")
    return pts, y


def cmd_design(args):
    box = _parse_bounds(args.bounds) if args.bounds else [[0.0, 1.0]] * args.dims
    if len(box) != args.dims:
        raise SystemExit("--bounds must list one lo:hi pair per dimension")
    pts = maximin_lhd(args.dims, args.count, box=box, seed=args.seed,
                      restarts=args.restarts)
    out = os.path.join(_outdir(args), args.out)
    with open(out, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow([f"v{j + 1}" for j in range(args.dims)])
        for row in pts:
            writer.writerow([repr(float(v)) for v in row])
    print(f"wrote {args.count} points to {out}")


def cmd_fit(args):
    x_box = _parse_bounds(args.x_bounds)
    tau_box = _parse_bounds(args.tau_bounds)
    space = InputSpace(x_box, tau_box)
    pts, y = _read_design_csv(args.design, space.d)
    design = Design(space, pts, y)
    config = GpConfig(kernel_family=args.kernel, trend=args.trend,
                      nugget=args.nugget)
    em = train_emulator(design, config, seed=args.seed)
    out = os.path.join(_outdir(args), args.out)
    em.save(out)
    print(f"fitted {design.n}-point emulator (sigma2={em.hyper.sigma2:.4g}) -> {out}")


def cmd_calibrate(args):
    em = TrainedEmulator.load(args.emulator)
    field = FieldData.from_csv(args.field, lambda2=args.lambda2)
    prior = PriorSpec(em.space.tau_box)
    chain = sample(ApproxPosterior(em, field, prior), prior, steps=args.steps,
                   burn_in=args.burn_in, seed=args.seed)
    out = os.path.join(_outdir(args), args.out)
    chain.to_csv(out)
    lo, hi = credible_interval(chain, 0.95)
    med = np.median(chain.post_burn, axis=0)
    for j in range(em.space.m):
        print(f"theta{j + 1}: median={med[j]:.5g} 95% CI=({lo[j]:.5g}, {hi[j]:.5g})")
    print(f"acceptance rate {chain.acceptance_rate:.3f}; chain -> {out}")


def _load_custom_simulator(spec: str, d: int, m: int) -> Simulator:
    mod_name, _, fn_name = spec.partition(":")
    if not fn_name:
        raise SystemExit("--simulator must look like module:function")
    fn = getattr(importlib.import_module(mod_name), fn_name)
    return Simulator(fn, d=d, m=m, name=spec, expensive=True)


def cmd_ego(args):
    if args.problem != "custom":
        pdef = get_problem(args.problem)
        sim = pdef.make_simulator(expensive=True)
        field = generate_field_data(pdef, seed=args.data_seed)
        space, prior, grid = pdef.space, pdef.make_prior(), pdef.default_grid
        n0 = args.n0 if args.n0 is not None else pdef.default_n0
        budget = args.budget if args.budget is not None else pdef.default_budget
    else:
        if not (args.simulator and args.field and args.x_bounds and args.tau_bounds
                and args.lambda2 is not None):
            raise SystemExit("custom problems need --simulator, --field, "
                             "--x-bounds, --tau-bounds and --lambda2")
        space = InputSpace(_parse_bounds(args.x_bounds), _parse_bounds(args.tau_bounds))
        sim = _load_custom_simulator(args.simulator, space.d, space.m)
        field = FieldData.from_csv(args.field, lambda2=args.lambda2)
        prior = PriorSpec(space.tau_box)
        if args.grid_points:
            grid = GridSpec.uniform_1d(space.tau_box[0, 0], space.tau_box[0, 1],
                                       args.grid_points) if space.m == 1 else None
            if grid is None:
                raise SystemExit("--grid-points only builds 1-d grids; "
                                 "use the API for multi-d custom grids")
        else:
            raise SystemExit("custom problems need --grid-points")
        n0, budget = args.n0, args.budget
        if n0 is None or budget is None:
            raise SystemExit("custom problems need --n0 and --budget")

    problem = CalibrationProblem(simulator=sim, field=field, prior=prior,
                                 space=space, grid=grid, ei_draws=args.ei_draws)
    if args.algo == 1:
        res = run_algorithm1(problem, n0, budget, seed=args.seed)
    else:
        res = run_algorithm2(problem, n0, budget, seed=args.seed, crit=args.crit)
    outdir = _outdir(args)
    os.makedirs(outdir, exist_ok=True)
    _write_design_csv(os.path.join(outdir, args.prefix + "_design.csv"),
                      res.design.points, res.design.outputs, space.d)
    write_trace_csv(res.trace, os.path.join(outdir, args.prefix + "_trace.csv"))
    res.state.emulator.save(os.path.join(outdir, args.prefix + "_emulator.json"))
    last = res.trace[-1]
    print(f"{len(res.trace)} iterations, {res.design.n} runs, incumbent "
          f"{last.m_k:.5g}; outputs under {outdir}/{args.prefix}_*")


def cmd_benchmark(args):
    if args.config:
        cfg = ExperimentConfig.from_file(args.config)
    else:
        cfg = ExperimentConfig()
    overrides = {}
    for key in ("problem", "n_datasets", "n_designs", "n0", "budget", "master_seed",
                "mcmc_steps", "mcmc_burn_in", "ei_draws", "kl_neighbors", "workers"):
        val = getattr(args, key)
        if val is not None:
            overrides[key] = val
    if args.design_kinds:
        overrides["design_kinds"] = tuple(args.design_kinds.split(","))
    if args.full_scale:
        overrides.setdefault("n_datasets", 50)
        overrides.setdefault("n_designs", 50)
    outdir = args.output_dir or os.environ.get("EGOCAL_OUTDIR") or cfg.output_dir
    overrides["output_dir"] = outdir
    from dataclasses import replace
    cfg = replace(cfg, **overrides)
    rows, summary = run_experiment(cfg)
    for kind, stats in summary["kinds"].items():
        print(f"{kind}: median KL={stats['kl']['median']:.4g} "
              f"coverage={stats['coverage_rate']:.3f} (n={stats['kl']['n']})")
    print(f"results under {outdir}")


def cmd_plot_data(args):
    results = os.path.join(args.input, "results.csv")
    out = os.path.join(_outdir(args), args.out)
    write_plot_data(results, out)
    print(f"tidy data -> {out}")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="egocal",
        description="Sequential design and Bayesian calibration with GP emulators")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("design", help="emit a maximin Latin hypercube design")
    p.add_argument("--dims", type=int, required=True)
    p.add_argument("--count", type=int, required=True)
    p.add_argument("--bounds", help="per-dim lo:hi pairs, comma separated")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--restarts", type=int, default=8)
    p.add_argument("--out", default="design.csv")
    p.add_argument("--output-dir")
    p.set_defaults(func=cmd_design)

    p = sub.add_parser("fit", help="train an emulator from a design CSV")
    p.add_argument("--design", required=True, help="CSV with x1..xd,t1..tm,y")
    p.add_argument("--x-bounds", required=True)
    p.add_argument("--tau-bounds", required=True)
    p.add_argument("--kernel", default="matern52",
                   choices=("matern52", "squared-exponential"))
    p.add_argument("--trend", default="constant", choices=("constant", "linear"))
    p.add_argument("--nugget", type=float, default=1e-8)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default="emulator.json")
    p.add_argument("--output-dir")
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("calibrate", help="MCMC on the emulator-based posterior")
    p.add_argument("--emulator", required=True)
    p.add_argument("--field", required=True, help="CSV with x1..xd,z")
    p.add_argument("--lambda2", type=float, required=True)
    p.add_argument("--steps", type=int, default=20000)
    p.add_argument("--burn-in", type=int, default=5000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default="chain.csv")
    p.add_argument("--output-dir")
    p.set_defaults(func=cmd_calibrate)

    p = sub.add_parser("ego", help="run a sequential design loop")
    p.add_argument("--problem", default="case1", choices=problem_ids() + ["custom"])
    p.add_argument("--algo", type=int, default=1, choices=(1, 2))
    p.add_argument("--crit", default="variance", choices=("variance", "tradeoff"))
    p.add_argument("--n0", type=int)
    p.add_argument("--budget", type=int)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--data-seed", type=int, default=0)
    p.add_argument("--ei-draws", type=int, default=2000)
    p.add_argument("--simulator", help="module:function for --problem custom")
    p.add_argument("--field", help="field CSV for --problem custom")
    p.add_argument("--x-bounds")
    p.add_argument("--tau-bounds")
    p.add_argument("--lambda2", type=float)
    p.add_argument("--grid-points", type=int)
    p.add_argument("--prefix", default="ego")
    p.add_argument("--output-dir")
    p.set_defaults(func=cmd_ego)

    p = sub.add_parser("benchmark", help="replicated design-strategy comparison")
    p.add_argument("--config", help="JSON or YAML ExperimentConfig file")
    p.add_argument("--problem", choices=problem_ids())
    p.add_argument("--design-kinds", help="comma-separated subset of "
                                          + ",".join(DESIGN_KINDS_HELP))
    p.add_argument("--n-datasets", type=int, dest="n_datasets")
    p.add_argument("--n-designs", type=int, dest="n_designs")
    p.add_argument("--n0", type=int)
    p.add_argument("--budget", type=int)
    p.add_argument("--master-seed", type=int, dest="master_seed")
    p.add_argument("--mcmc-steps", type=int, dest="mcmc_steps")
    p.add_argument("--mcmc-burn-in", type=int, dest="mcmc_burn_in")
    p.add_argument("--ei-draws", type=int, dest="ei_draws")
    p.add_argument("--kl-neighbors", type=int, dest="kl_neighbors")
    p.add_argument("--workers", type=int)
    p.add_argument("--full-scale", action="store_true",
                   help="50 datasets x 50 designs")
    p.add_argument("--output-dir")
    p.set_defaults(func=cmd_benchmark)

    p = sub.add_parser("plot-data", help="tidy long-format CSV from benchmark output")
    p.add_argument("--input", required=True, help="benchmark output directory")
    p.add_argument("--out", default="plot_data.csv")
    p.add_argument("--output-dir")
    p.set_defaults(func=cmd_plot_data)
    return parser


DESIGN_KINDS_HELP = ("maximin", "algo1", "algo2-variance", "algo2-tradeoff")


def main(argv=None):
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
