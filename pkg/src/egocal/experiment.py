"""Replicated calibration experiments over design strategies.

For each synthetic data set the target posterior is sampled once with the
true (cheap) simulator, then every design replicate of every strategy is
scored against it: divergence between the two posterior sample sets and
coverage of the credible interval.  Replicates are independent jobs with
their own derived RNG streams, so output files are byte-identical across
reruns of the same configuration regardless of worker count.
"""

from __future__ import annotations

import csv
import json
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, replace

import numpy as np

from ._rng import derive_seed
from .benchmarks import ProblemDef, generate_field_data, get_problem
from .calibration import ApproxPosterior, target_log_posterior
from .design import (CalibrationProblem, _map_theta, maximin_lhd, run_algorithm1,
                     run_algorithm2)
from .gp import Design, train_emulator
from .mcmc import sample
from .metrics import coverage, coverage_rate, dither, kl_knn

DESIGN_KINDS = ("maximin", "algo1", "algo2-variance", "algo2-tradeoff")

SUMMARY_SCHEMA = {
    "type": "object",
    "required": ["schema_version", "problem", "theta_true", "config", "field_sites",
                 "kinds", "failures"],
    "properties": {
        "schema_version": {"const": 1},
        "problem": {"type": "string"},
        "theta_true": {"type": "array", "items": {"type": "number"}},
        "config": {"type": "object"},
        "field_sites": {"type": "array"},
        "kinds": {
            "type": "object",
            "additionalProperties": {
                "type": "object",
                "required": ["kl", "coverage_rate", "n_ok", "per_dataset_mean_kl",
                             "median_of_dataset_means"],
                "properties": {
                    "kl": {
                        "type": "object",
                        "required": ["median", "q1", "q3", "mean", "n"],
                        "properties": {k: {"type": "number"} for k in
                                       ("median", "q1", "q3", "mean")} |
                                      {"n": {"type": "integer"}},
                    },
                    "coverage_rate": {"type": "number"},
                    "n_ok": {"type": "integer"},
                    "per_dataset_mean_kl": {"type": "array"},
                    "median_of_dataset_means": {"type": "number"},
                },
            },
        },
        "failures": {"type": "array"},
    },
}


@dataclass(frozen=True)
class ExperimentConfig:
    """Resolved settings of one benchmark run; every field is recorded in output."""

    problem: str = "case1"
    design_kinds: tuple = None
    n_datasets: int = 20
    n_designs: int = 20
    n0: int = None
    budget: int = None
    master_seed: int = 0
    mcmc_steps: int = None
    mcmc_burn_in: int = None
    ei_draws: int = None
    kl_neighbors: int = 1
    kl_thin: int = 3
    workers: int = None
    output_dir: str = "egocal-out"

    def resolved(self) -> "ExperimentConfig":
        """Fill unset fields from the problem's defaults."""
        pdef = get_problem(self.problem)
        heavy = self.problem == "g6d"
        return replace(
            self,
            design_kinds=tuple(self.design_kinds) if self.design_kinds
            else pdef.design_kinds,
            n0=self.n0 if self.n0 is not None else pdef.default_n0,
            budget=self.budget if self.budget is not None else pdef.default_budget,
            mcmc_steps=self.mcmc_steps if self.mcmc_steps is not None
            else (12000 if heavy else 20000),
            mcmc_burn_in=self.mcmc_burn_in if self.mcmc_burn_in is not None
            else (4000 if heavy else 5000),
            ei_draws=self.ei_draws if self.ei_draws is not None
            else (512 if heavy else 2000),
            workers=self.workers if self.workers is not None
            else min(2, os.cpu_count() or 1),
        )

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        if "design_kinds" in d and d["design_kinds"] is not None:
            d = dict(d, design_kinds=tuple(d["design_kinds"]))
        return cls(**d)

    @classmethod
    def from_file(cls, path) -> "ExperimentConfig":
        text = open(path).read()
        if str(path).endswith((".yaml", ".yml")):
            import yaml
            return cls.from_dict(yaml.safe_load(text) or {})
        return cls.from_dict(json.loads(text))


def _worker_setup():
    # one BLAS thread per worker process; replicate-level parallelism instead
    try:
        from threadpoolctl import threadpool_limits
        global _TP_LIMIT
        _TP_LIMIT = threadpool_limits(limits=1)
    except Exception:
        pass
    # budget-exhausted refits are routine here; the flag is kept on the fit
    import warnings

    from .gp import FitWarning
    warnings.filterwarnings("ignore", category=FitWarning)


def _build_design(kind: str, problem: CalibrationProblem, pdef: ProblemDef,
                  cfg: ExperimentConfig, seed: int):
    """Design of `budget` runs by the requested strategy; returns (emulator, extras)."""
    if kind == "maximin":
        pts = maximin_lhd(problem.space.dim, cfg.budget, problem.space.joint_box,
                          seed=derive_seed(seed, "lhd"), restarts=problem.lhd_restarts)
        outs = problem.simulator.run_design(pts, problem.space.d)
        em = train_emulator(Design(problem.space, pts, outs), problem.gp,
                            seed=derive_seed(seed, "fit", 0))
        return em, {"m_final": float("nan"), "n_batches": 0}
    if kind == "algo1":
        res = run_algorithm1(problem, cfg.n0, cfg.budget, seed=seed)
    elif kind == "algo2-variance":
        res = run_algorithm2(problem, cfg.n0, cfg.budget, seed=seed, crit="variance")
    elif kind == "algo2-tradeoff":
        res = run_algorithm2(problem, cfg.n0, cfg.budget, seed=seed, crit="tradeoff")
    else:
        raise ValueError(f"unknown design kind {kind!r}")
    return res.state.emulator, {"m_final": float(res.state.m_k),
                                "n_batches": len(res.trace)}


def run_replicate(cfg: ExperimentConfig, pdef: ProblemDef, field, target_samples,
                  kind: str, dataset_idx: int, design_idx: int) -> dict:
    """One design replicate scored against the dataset's target posterior."""
    seed = derive_seed(cfg.master_seed, "design", kind, dataset_idx, design_idx)
    sim = pdef.make_simulator(expensive=True)
    prior = pdef.make_prior()
    problem = CalibrationProblem(simulator=sim, field=field, prior=prior,
                                 space=pdef.space, grid=pdef.default_grid,
                                 ei_draws=cfg.ei_draws)
    em, extras = _build_design(kind, problem, pdef, cfg, seed)
    design_calls = sim.n_calls
    if design_calls > cfg.budget:
        raise RuntimeError(f"design construction used {design_calls} calls "
                           f"(budget {cfg.budget})")
    # start at the grid maximizer of the emulator-based posterior
    start = _map_theta(em, field, prior, pdef.default_grid.union())
    chain = sample(ApproxPosterior(em, field, prior), prior,
                   steps=cfg.mcmc_steps, burn_in=cfg.mcmc_burn_in,
                   seed=derive_seed(cfg.master_seed, "approx-chain", kind,
                                    dataset_idx, design_idx),
                   start=start)
    # the kNN divergence estimator needs distinct, weakly dependent points:
    # thin the chain and break duplicate states at the NN-spacing scale
    approx_samples = dither(chain.post_burn[:: cfg.kl_thin],
                            seed=derive_seed(seed, "dither-q"))
    kl = kl_knn(target_samples, approx_samples, k=cfg.kl_neighbors)
    cov = coverage(chain, pdef.theta_true, level=0.95)
    med = np.median(chain.post_burn, axis=0)
    return {
        "problem": cfg.problem, "kind": kind, "dataset": dataset_idx,
        "design": design_idx, "seed": seed, "kl": kl.value,
        "covered": int(cov.covered),
        "covered_dims": ";".join(str(int(b)) for b in cov.per_dim),
        "design_sim_calls": design_calls,
        "m_final": extras["m_final"],
        "posterior_median": ";".join(repr(float(v)) for v in med),
        "error": "",
    }


def _run_job(args):
    """All design replicates of one (dataset, kind) cell."""
    cfg, dataset_idx, kind = args
    _worker_setup()
    pdef = get_problem(cfg.problem)
    field = generate_field_data(pdef, seed=derive_seed(cfg.master_seed, "dataset",
                                                       dataset_idx))
    prior = pdef.make_prior()
    target_sim = pdef.make_simulator(expensive=False)  # scoring only, not budgeted
    logpost = lambda t: target_log_posterior(target_sim, t, field, prior)
    grid_union = pdef.default_grid.union()
    start = grid_union[int(np.argmax([logpost(t) for t in grid_union]))]
    target_chain = sample(
        logpost, prior, steps=cfg.mcmc_steps, burn_in=cfg.mcmc_burn_in,
        seed=derive_seed(cfg.master_seed, "target-chain", dataset_idx),
        start=start)
    target_samples = dither(
        target_chain.post_burn[:: cfg.kl_thin],
        seed=derive_seed(cfg.master_seed, "dither-p", dataset_idx))
    rows = []
    for j in range(cfg.n_designs):
        try:
            rows.append(run_replicate(cfg, pdef, field, target_samples, kind,
                                      dataset_idx, j))
        except Exception as exc:
            rows.append({
                "problem": cfg.problem, "kind": kind, "dataset": dataset_idx,
                "design": j,
                "seed": derive_seed(cfg.master_seed, "design", kind, dataset_idx, j),
                "kl": float("nan"), "covered": 0, "covered_dims": "",
                "design_sim_calls": -1, "m_final": float("nan"),
                "posterior_median": "", "error": f"{type(exc).__name__}: {exc}",
            })
    return rows


CSV_COLUMNS = ["problem", "kind", "dataset", "design", "seed", "kl", "covered",
               "covered_dims", "design_sim_calls", "m_final", "posterior_median",
               "error"]


def run_experiment(config: ExperimentConfig):
    """Run the full replication grid and write results.csv plus summary.json.

    Returns (rows, summary).  Output is deterministic for a fixed
    configuration: rows are sorted, floats are written with full
    round-trip precision and no timing information is recorded.
    """
    cfg = config.resolved()
    jobs = [(cfg, d, kind) for kind in cfg.design_kinds for d in range(cfg.n_datasets)]
    if cfg.workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=cfg.workers) as pool:
            chunks = list(pool.map(_run_job, jobs))
    else:
        _worker_setup()
        chunks = [_run_job(j) for j in jobs]
    rows = [r for chunk in chunks for r in chunk]
    rows.sort(key=lambda r: (r["kind"], r["dataset"], r["design"]))
    summary = summarize(cfg, rows)

    os.makedirs(cfg.output_dir, exist_ok=True)
    with open(os.path.join(cfg.output_dir, "results.csv"), "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=CSV_COLUMNS)
        writer.writeheader()
        for r in rows:
            out = dict(r)
            out["kl"] = repr(float(r["kl"]))
            out["m_final"] = repr(float(r["m_final"]))
            writer.writerow(out)
    with open(os.path.join(cfg.output_dir, "summary.json"), "w") as fh:
        json.dump(summary, fh, indent=1, sort_keys=True)
        fh.write("\n")
    return rows, summary


def summarize(cfg: ExperimentConfig, rows) -> dict:
    pdef = get_problem(cfg.problem)
    kinds = {}
    failures = [{"kind": r["kind"], "dataset": r["dataset"], "design": r["design"],
                 "error": r["error"]} for r in rows if r["error"]]
    for kind in cfg.design_kinds:
        ok = [r for r in rows if r["kind"] == kind and not r["error"]
              and np.isfinite(r["kl"])]
        kls = np.array([r["kl"] for r in ok])
        per_ds = []
        for d in range(cfg.n_datasets):
            vals = kls[[i for i, r in enumerate(ok) if r["dataset"] == d]]
            per_ds.append(float(np.mean(vals)) if vals.size else float("nan"))
        finite_ds = [v for v in per_ds if np.isfinite(v)]
        kinds[kind] = {
            "kl": {
                "median": float(np.median(kls)) if kls.size else float("nan"),
                "q1": float(np.quantile(kls, 0.25)) if kls.size else float("nan"),
                "q3": float(np.quantile(kls, 0.75)) if kls.size else float("nan"),
                "mean": float(np.mean(kls)) if kls.size else float("nan"),
                "n": int(kls.size),
            },
            "coverage_rate": coverage_rate([bool(r["covered"]) for r in ok])
            if ok else float("nan"),
            "n_ok": len(ok),
            "per_dataset_mean_kl": per_ds,
            "median_of_dataset_means": float(np.median(finite_ds))
            if finite_ds else float("nan"),
        }
    return {
        "schema_version": 1,
        "problem": cfg.problem,
        "theta_true": [float(v) for v in pdef.theta_true],
        "config": {k: (list(v) if isinstance(v, tuple) else v)
                   for k, v in asdict(cfg).items()},
        "field_sites": pdef.X_f.tolist(),
        "kinds": kinds,
        "failures": failures,
    }


def validate_summary(summary: dict):
    """Check a summary document against the published schema."""
    import jsonschema

    jsonschema.validate(summary, SUMMARY_SCHEMA)


def write_plot_data(results_csv, out_csv):
    """Tidy long-format rows (kind, dataset, design, metric, value) for plotting."""
    with open(results_csv, newline="") as fh:
        rows = list(csv.DictReader(fh))
    with open(out_csv, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["problem", "kind", "dataset", "design", "metric", "value"])
        for r in rows:
            if r["error"]:
                continue
            for metric in ("kl", "covered"):
                writer.writerow([r["problem"], r["kind"], r["dataset"], r["design"],
                                 metric, r[metric]])
