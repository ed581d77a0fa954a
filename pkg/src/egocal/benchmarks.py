"""Analytic benchmark problems for the calibration experiments.

Both codes are cheap, which makes the target posterior (true-simulator
likelihood) tractable for scoring; their evaluations are still counted so
design budgets can be audited.
"""

from __future__ import annotations

from dataclasses import dataclass, field as dataclass_field

import numpy as np

from ._rng import derive_seed
from .calibration import FieldData, PriorSpec, Simulator
from .design import GridSpec, maximin_lhd
from .gp import InputSpace

# fixed stream for the 6-d field sites; recorded in experiment output
_G6D_SITE_SEED = 691045
_G6D_N_SITES = 60


def forrester2d(x, t):
    """y_t(x) = (6x - 2)^2 * sin(t*x - 4) on x in [0, 1], t in [5, 15]."""
    x = np.asarray(x, dtype=float)
    t = np.asarray(t, dtype=float)
    return (6.0 * x - 2.0) ** 2 * np.sin(t * x - 4.0)


def gfunction6d(x, tau):
    """prod_i (|4 x_i - 2| + tau_i) / (1 + tau_i) over three coordinates."""
    x = np.atleast_2d(np.asarray(x, dtype=float))
    tau = np.atleast_2d(np.asarray(tau, dtype=float))
    return np.prod((np.abs(4.0 * x - 2.0) + tau) / (1.0 + tau), axis=-1)


def _forrester_rows(x, tau):
    return forrester2d(x[:, 0], tau[:, 0])


@dataclass
class ProblemDef:
    """A benchmark problem: simulator factory, spaces, truth and defaults."""

    problem_id: str
    space: InputSpace
    theta_true: np.ndarray
    noise_sd: float
    X_f: np.ndarray
    default_grid: GridSpec
    default_n0: int
    default_budget: int
    design_kinds: tuple
    sim_fn: callable = dataclass_field(repr=False, default=None)

    @property
    def lambda2(self) -> float:
        return self.noise_sd**2

    def make_simulator(self, expensive: bool = False) -> Simulator:
        return Simulator(self.sim_fn, d=self.space.d, m=self.space.m,
                         name=self.problem_id, expensive=expensive)

    def make_prior(self) -> PriorSpec:
        return PriorSpec(self.space.tau_box)


def _case_def(problem_id: str, x_sites) -> ProblemDef:
    return ProblemDef(
        problem_id=problem_id,
        space=InputSpace(x_box=[[0.0, 1.0]], tau_box=[[5.0, 15.0]]),
        theta_true=np.array([12.0]),
        noise_sd=0.3,
        X_f=np.asarray(x_sites, dtype=float)[:, None],
        default_grid=GridSpec.uniform_1d(5.0, 15.0, 101),
        default_n0=12,
        default_budget=30,
        design_kinds=("maximin", "algo1", "algo2-variance", "algo2-tradeoff"),
        sim_fn=_forrester_rows,
    )


def _g6d_def() -> ProblemDef:
    g1 = GridSpec.product([np.linspace(0.0, 1.0, 6)] * 3)
    g2 = GridSpec.product([np.linspace(0.1, 0.9, 5)] * 3)
    x_sites = maximin_lhd(3, _G6D_N_SITES, box=[[0.0, 1.0]] * 3,
                          seed=_G6D_SITE_SEED, restarts=4)
    return ProblemDef(
        problem_id="g6d",
        space=InputSpace(x_box=[[0.0, 1.0]] * 3, tau_box=[[0.0, 1.0]] * 3),
        theta_true=np.array([0.34, 0.34, 0.34]),
        noise_sd=0.05,
        X_f=x_sites,
        default_grid=GridSpec((g1, g2)),
        default_n0=100,
        default_budget=200,
        design_kinds=("maximin", "algo2-variance", "algo2-tradeoff"),
        sim_fn=gfunction6d,
    )


_REGISTRY = {
    "case1": lambda: _case_def("case1", [0.1, 0.3, 0.8]),
    "case2": lambda: _case_def("case2", np.linspace(0.1, 0.9, 9)),
    "g6d": _g6d_def,
}


def problem_ids():
    return sorted(_REGISTRY)


def get_problem(problem_id: str) -> ProblemDef:
    try:
        return _REGISTRY[problem_id]()
    except KeyError:
        raise ValueError(f"unknown problem {problem_id!r}; "
                         f"available: {', '.join(problem_ids())}") from None


def generate_field_data(problem, theta_true=None, noise_sd=None, seed: int = 0) -> FieldData:
    """Synthetic measurements: the code at the true parameter plus white noise.

    ``problem`` is a ProblemDef or a registered id.  Deterministic under
    ``seed``; with ``noise_sd=0`` the measurements equal the code output
    exactly (the declared noise variance then falls back to the problem
    default so the likelihood stays proper).
    """
    pdef = get_problem(problem) if isinstance(problem, str) else problem
    theta = pdef.theta_true if theta_true is None else \
        np.atleast_1d(np.asarray(theta_true, dtype=float))
    sd = pdef.noise_sd if noise_sd is None else float(noise_sd)
    sim = pdef.make_simulator()
    clean = sim(pdef.X_f, np.broadcast_to(theta, (pdef.X_f.shape[0], theta.shape[0])))
    rng = np.random.default_rng(derive_seed("field-data", pdef.problem_id, seed))
    noise = sd * rng.standard_normal(pdef.X_f.shape[0]) if sd > 0 else 0.0
    lam2 = sd**2 if sd > 0 else pdef.lambda2
    return FieldData(X_f=pdef.X_f, z_f=clean + noise, lambda2=lam2)
