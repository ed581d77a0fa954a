"""Sequential design of simulator runs oriented toward calibration.

The initial design is a maximin Latin hypercube over the joint input
space.  New runs are then placed at (field site, theta) pairs where theta
maximizes the expected improvement of the residual sum of squares under
the current emulator.  Two loop variants are provided: a batch one that
runs every field site at the selected theta each iteration, and a
one-at-a-time one that picks a single field site by a variance or
trade-off criterion and tracks the incumbent through expected residual
sums of squares.

The improvement criterion over a candidate grid is estimated by common
random numbers, and candidates are screened first with a box-probability
upper bound so the improvement itself is only evaluated on a sub-grid.
With shared draws the screening is exact: a pruned candidate can never
beat the retained maximizer.
"""

from __future__ import annotations

import time
import warnings
from dataclasses import dataclass, field as dataclass_field

import numpy as np
from scipy.spatial.distance import cdist
from scipy.stats import norm

from ._rng import derive_rng, derive_seed
from .calibration import FieldData, PriorSpec, Simulator
from .gp import (Design, FieldPredictor, GpConfig, InputSpace, TrainedEmulator,
                 train_emulator)

EI_DRAWS_DEFAULT = 2000
STALL_FRACTION = 1e-12
STALL_PATIENCE = 3


# ---------------------------------------------------------------------------
# space-filling initial designs
# ---------------------------------------------------------------------------


def _pairwise_min_dist(pts: np.ndarray) -> float:
    d2 = cdist(pts, pts, "sqeuclidean")
    np.fill_diagonal(d2, np.inf)
    return float(np.sqrt(d2.min()))


def maximin_lhd(dims: int, count: int, box=None, seed: int = 0,
                restarts: int = 8) -> np.ndarray:
    """Latin hypercube design maximizing the minimum pairwise distance.

    Points sit at stratum centers, so every one-dimensional projection
    hits each of the ``count`` strata exactly once.  Each restart draws a
    random hypercube and improves it by coordinate swaps targeted at the
    current closest pair; the best restart wins.  Distances are measured
    in unit-cube coordinates before mapping onto ``box``.
    """
    if count < 1:
        raise ValueError("count must be at least 1")
    rng = np.random.default_rng(seed)
    best_pts, best_score = None, -np.inf
    for _ in range(max(1, restarts)):
        pts = np.empty((count, dims))
        for j in range(dims):
            pts[:, j] = (rng.permutation(count) + 0.5) / count
        score = _improve_maximin(pts, rng) if count > 2 else _pairwise_min_dist(pts) \
            if count > 1 else np.inf
        if score > best_score:
            best_pts, best_score = pts.copy(), score
    if box is not None:
        box = np.atleast_2d(np.asarray(box, dtype=float))
        best_pts = box[:, 0] + best_pts * (box[:, 1] - box[:, 0])
    return best_pts


def _improve_maximin(pts: np.ndarray, rng: np.random.Generator,
                     max_rounds: int = 400, tries_per_round: int = 20) -> float:
    """In-place swap improvement; returns the final minimum pairwise distance."""
    n, dims = pts.shape
    d2 = cdist(pts, pts, "sqeuclidean")
    np.fill_diagonal(d2, np.inf)
    current = d2.min()
    for _ in range(max_rounds):
        i, _j = np.unravel_index(np.argmin(d2), d2.shape)
        improved = False
        for _ in range(tries_per_round):
            k = int(rng.integers(n - 1))
            k += k >= i
            c = int(rng.integers(dims))
            pts[i, c], pts[k, c] = pts[k, c], pts[i, c]
            for r in (i, k):
                row = ((pts - pts[r]) ** 2).sum(axis=1)
                row[r] = np.inf
                d2[r, :] = row
                d2[:, r] = row
            new = d2.min()
            if new > current:
                current = new
                improved = True
                break
            pts[i, c], pts[k, c] = pts[k, c], pts[i, c]
            for r in (i, k):
                row = ((pts - pts[r]) ** 2).sum(axis=1)
                row[r] = np.inf
                d2[r, :] = row
                d2[:, r] = row
        if not improved:
            break
    return float(np.sqrt(current))


def covering_distance(design, box=None, probe_grid=None) -> float:
    """Largest distance from any probe point to its nearest design point.

    ``design`` may be a Design or a plain point array; ``probe_grid``
    discretizes the domain (a fine grid gives the usual minimax / fill
    distance of the design).
    """
    pts = design.points if isinstance(design, Design) else np.atleast_2d(
        np.asarray(design, dtype=float))
    if probe_grid is None:
        raise ValueError("a probe grid is required")
    probe = np.atleast_2d(np.asarray(probe_grid, dtype=float))
    d2 = cdist(probe, pts, "sqeuclidean")
    return float(np.sqrt(d2.min(axis=1).max()))


# ---------------------------------------------------------------------------
# candidate grids
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class GridSpec:
    """Finite candidate grids over the parameter box, cycled by iteration."""

    grids: tuple

    def __post_init__(self):
        gs = tuple(np.atleast_2d(np.asarray(g, dtype=float)) for g in self.grids)
        if not gs:
            raise ValueError("need at least one grid")
        object.__setattr__(self, "grids", gs)
        for a in range(len(gs)):
            for b in range(a + 1, len(gs)):
                if gs[a].shape[1] != gs[b].shape[1]:
                    raise ValueError("grids must share one parameter dimension")
                d2 = cdist(gs[a], gs[b], "sqeuclidean")
                if d2.min() < 1e-24:
                    raise ValueError(f"grids {a} and {b} share a point")

    @property
    def m(self) -> int:
        return self.grids[0].shape[1]

    def active(self, iteration: int) -> np.ndarray:
        """Grid used at a given (0-based) improvement iteration."""
        return self.grids[iteration % len(self.grids)]

    def union(self) -> np.ndarray:
        return np.vstack(self.grids)

    @classmethod
    def uniform_1d(cls, lo: float, hi: float, count: int = 101) -> "GridSpec":
        return cls((np.linspace(lo, hi, count)[:, None],))

    @classmethod
    def product(cls, levels_per_dim) -> np.ndarray:
        """Full factorial grid from per-dimension level lists."""
        mesh = np.meshgrid(*[np.asarray(v, dtype=float) for v in levels_per_dim],
                           indexing="ij")
        return np.stack([m.ravel() for m in mesh], axis=1)


# ---------------------------------------------------------------------------
# calibration problem bundle and loop state
# ---------------------------------------------------------------------------


@dataclass
class CalibrationProblem:
    """Everything the sequential loops need to run."""

    simulator: Simulator
    field: FieldData
    prior: PriorSpec
    space: InputSpace
    grid: GridSpec
    gp: GpConfig = dataclass_field(default_factory=GpConfig)
    ei_draws: int = EI_DRAWS_DEFAULT
    lhd_restarts: int = 8
    tradeoff_prior_draws: int = 128


class EiState:
    """Mutable state of the improvement loop.

    Tracks the design, the current emulator (with a cached field-site
    predictor), the incumbent, its history, and the iteration counter used
    both for grid cycling and for deriving per-iteration RNG streams.
    """

    def __init__(self, design: Design, emulator: TrainedEmulator, field: FieldData,
                 grid: GridSpec, m_k: float = np.inf, ei_mc_draws: int = EI_DRAWS_DEFAULT,
                 seed: int = 0):
        self.design = design
        self.emulator = emulator
        self.field = field
        self.grid = grid
        self.m_k = float(m_k)
        self.incumbent_history = [] if not np.isfinite(m_k) else [float(m_k)]
        self.theta_hats = []
        self.iteration = 0
        self.ei_mc_draws = int(ei_mc_draws)
        self.seed = int(seed)
        self.predictor = FieldPredictor(emulator, field.X_f)

    def update_emulator(self, emulator: TrainedEmulator, design: Design):
        self.emulator = emulator
        self.design = design
        self.predictor = FieldPredictor(emulator, self.field.X_f)


# ---------------------------------------------------------------------------
# improvement criterion
# ---------------------------------------------------------------------------


def _factor_batch(covs: np.ndarray, sigma2: float) -> np.ndarray:
    """Factors F with F F^T = cov for each candidate, robust to rank deficiency."""
    g, n, _ = covs.shape
    jitter = 1e-12 * max(sigma2, 1e-300)
    eye = np.eye(n)
    try:
        return np.linalg.cholesky(covs + jitter * eye[None, :, :])
    except np.linalg.LinAlgError:
        pass
    out = np.empty_like(covs)
    for i in range(g):
        jit = jitter
        while True:
            try:
                out[i] = np.linalg.cholesky(covs[i] + jit * eye)
                break
            except np.linalg.LinAlgError:
                jit *= 100.0
                if jit > 1e-4 * max(sigma2, 1e-300):
                    w, Q = np.linalg.eigh(0.5 * (covs[i] + covs[i].T))
                    out[i] = Q * np.sqrt(np.clip(w, 0.0, None))
                    break
    return out


def _ss_draws(z_f: np.ndarray, means: np.ndarray, factors: np.ndarray,
              Z: np.ndarray, sqrt_m: float, block: int = 64):
    """Residual sums of squares and box-membership counts per candidate.

    Uses the same standard normals ``Z`` for every candidate (common random
    numbers) so comparisons across candidates are paired.  Processes
    candidates in blocks to bound memory.
    """
    g, n = means.shape
    draws = Z.shape[0]
    ss = np.empty((g, draws))
    inside_box = np.empty(g)
    resid_mean = z_f[None, :] - means
    for s in range(0, g, block):
        e = min(g, s + block)
        paths = Z[None, :, :] @ factors[s:e].transpose(0, 2, 1)  # (b, draws, n)
        r = resid_mean[s:e, None, :] - paths
        np.square(r, out=paths)
        ss[s:e] = paths.sum(axis=2)
        if np.isfinite(sqrt_m):
            inside_box[s:e] = (np.abs(r) <= sqrt_m).all(axis=2).mean(axis=1)
        else:
            inside_box[s:e] = 1.0
    return ss, inside_box


def _ei_from_ss(ss_row: np.ndarray, m_k: float):
    improve = np.where(ss_row <= m_k, m_k - ss_row, 0.0)
    ei = float(np.clip(improve.mean(), 0.0, m_k))
    prob_inside = float((ss_row <= m_k).mean())
    return ei, prob_inside


def ei_estimate(state: EiState, theta):
    """Monte Carlo expected improvement of the residual SS at theta.

    Returns ``(ei, prob_inside)`` where ``prob_inside`` estimates the
    probability that the emulated residual SS falls below the incumbent.
    Deterministic for a fixed state seed, iteration and theta.
    """
    theta = np.atleast_1d(np.asarray(theta, dtype=float))
    box = state.emulator.space.tau_box
    if np.any(theta < box[:, 0]) or np.any(theta > box[:, 1]):
        raise ValueError("theta lies outside the parameter box")
    mean, cov = state.predictor.mean_cov(theta)
    rng = derive_rng(state.seed, "ei", state.iteration, theta)
    Z = rng.standard_normal((state.ei_mc_draws, state.field.n))
    F = _factor_batch(cov[None, :, :], state.emulator.hyper.sigma2)
    ss, _ = _ss_draws(state.field.z_f, mean[None, :], F, Z,
                      np.sqrt(state.m_k) if np.isfinite(state.m_k) else np.inf)
    return _ei_from_ss(ss[0], state.m_k)


def expected_improvement_mc(z_f, mean, cov, m_k: float, draws: int,
                            rng: np.random.Generator):
    """Estimator core on explicit Gaussian inputs; returns (ei, prob_inside)."""
    z_f = np.atleast_1d(np.asarray(z_f, dtype=float))
    mean = np.atleast_1d(np.asarray(mean, dtype=float))
    cov = np.atleast_2d(np.asarray(cov, dtype=float))
    Z = rng.standard_normal((draws, z_f.shape[0]))
    F = _factor_batch(cov[None, :, :], float(np.max(np.diag(cov))) or 1.0)
    ss, _ = _ss_draws(z_f, mean[None, :], F, Z,
                      np.sqrt(m_k) if np.isfinite(m_k) else np.inf)
    return _ei_from_ss(ss[0], m_k)


def hyperrect_prob(state: EiState, theta) -> float:
    """Probability that every residual lies in [-sqrt(m_k), sqrt(m_k)].

    This is an upper bound on the probability that the residual SS falls
    below the incumbent (the sphere of squared radius m_k sits inside the
    box).  Computed as a product of normal interval probabilities when the
    conditional covariance is diagonal, by Monte Carlo otherwise.
    """
    theta = np.atleast_1d(np.asarray(theta, dtype=float))
    mean, cov = state.predictor.mean_cov(theta)
    if not np.isfinite(state.m_k):
        return 1.0
    sqrt_m = np.sqrt(state.m_k)
    resid = state.field.z_f - mean
    off = cov - np.diag(np.diag(cov))
    if state.field.n == 1 or np.max(np.abs(off)) <= 1e-12 * max(np.max(np.diag(cov)), 1e-300):
        sd = np.sqrt(np.maximum(np.diag(cov), 0.0))
        probs = np.where(
            sd > 0,
            norm.cdf((sqrt_m - resid) / np.where(sd > 0, sd, 1.0))
            - norm.cdf((-sqrt_m - resid) / np.where(sd > 0, sd, 1.0)),
            (np.abs(resid) <= sqrt_m).astype(float),
        )
        return float(np.prod(probs))
    rng = derive_rng(state.seed, "box", state.iteration, theta)
    Z = rng.standard_normal((state.ei_mc_draws, state.field.n))
    F = _factor_batch(cov[None, :, :], state.emulator.hyper.sigma2)
    _, inside = _ss_draws(state.field.z_f, mean[None, :], F, Z, sqrt_m)
    return float(inside[0])


@dataclass
class SelectionResult:
    theta: np.ndarray
    ei: float
    prob_inside: float
    prob_box: float
    grid_index: int
    n_candidates: int
    n_evaluated: int
    zero_improvement: bool
    theta_tilde: np.ndarray


def select_theta(state: EiState, exhaustive: bool = False,
                 return_details: bool = False):
    """Pick the next parameter value from the active candidate grid.

    Screens the grid with the box-probability bound, evaluates the
    improvement criterion only where the bound (scaled into improvement
    units through ei <= m_k * prob) could beat the reference candidate,
    and returns the argmax.  All candidates share one set of standard
    normal draws, so the screening can never discard the true argmax.
    Ties are broken by the larger box probability, then the lower grid
    index.  ``exhaustive=True`` skips the screening (same draws, same
    answer; used to audit the pruning).
    """
    grid = state.grid.active(state.iteration)
    g = grid.shape[0]
    if g == 0:
        raise ValueError("active candidate grid is empty")
    means, covs = state.predictor.mean_cov_batch(grid)
    factors = _factor_batch(covs, state.emulator.hyper.sigma2)
    rng = derive_rng(state.seed, "select", state.iteration)
    Z = rng.standard_normal((state.ei_mc_draws, state.field.n))
    sqrt_m = np.sqrt(state.m_k) if np.isfinite(state.m_k) else np.inf
    ss, prob_box = _ss_draws(state.field.z_f, means, factors, Z, sqrt_m)

    order = np.lexsort((np.arange(g), -prob_box))
    tilde = int(order[0])
    ei_tilde, _ = _ei_from_ss(ss[tilde], state.m_k)

    if exhaustive or not np.isfinite(state.m_k):
        kept = np.arange(g)
    else:
        kept = np.flatnonzero(state.m_k * prob_box >= ei_tilde)
        if kept.size == 0:
            kept = np.array([tilde])

    ei_vals = np.full(g, -np.inf)
    prob_inside = np.zeros(g)
    for i in kept:
        ei_vals[i], prob_inside[i] = _ei_from_ss(ss[i], state.m_k)

    pick_order = np.lexsort((np.arange(g)[kept], -prob_box[kept], -ei_vals[kept]))
    best = int(kept[pick_order[0]])
    result = SelectionResult(
        theta=grid[best].copy(), ei=float(ei_vals[best]),
        prob_inside=float(prob_inside[best]), prob_box=float(prob_box[best]),
        grid_index=best, n_candidates=g, n_evaluated=int(kept.size),
        zero_improvement=bool(ei_vals[best] <= 0.0), theta_tilde=grid[tilde].copy(),
    )
    if return_details:
        return result
    return result.theta, result.ei


# ---------------------------------------------------------------------------
# site criteria for the one-at-a-time loop
# ---------------------------------------------------------------------------


def _site_variances(state: EiState, x_candidates, theta_hat) -> np.ndarray:
    x_candidates = np.atleast_2d(np.asarray(x_candidates, dtype=float))
    if x_candidates.shape == state.field.X_f.shape and \
            np.array_equal(x_candidates, state.field.X_f):
        pred = state.predictor
    else:
        pred = FieldPredictor(state.emulator, x_candidates)
    _, var = pred.mean_var_batch(np.atleast_2d(np.asarray(theta_hat, dtype=float)))
    return var[0]


def crit_variance(state: EiState, x_candidates, theta_hat) -> int:
    """Index of the candidate site with the largest conditional variance at theta_hat."""
    return int(np.argmax(_site_variances(state, x_candidates, theta_hat)))


def crit_tradeoff(state: EiState, x_candidates, theta_hat, prior: PriorSpec,
                  prior_draws: int = 128) -> int:
    """Trade-off site choice: conditional variance times parameter sensitivity.

    The second factor is the variance over prior parameter draws of the
    emulator mean at each site; both factors are normalized by their
    maximum over the candidates.  Falls back to the pure variance
    criterion when the sensitivity factor vanishes everywhere.
    """
    x_candidates = np.atleast_2d(np.asarray(x_candidates, dtype=float))
    var = _site_variances(state, x_candidates, theta_hat)
    rng = derive_rng(state.seed, "tradeoff", state.iteration)
    thetas = prior.sample(rng, prior_draws)
    if x_candidates.shape == state.field.X_f.shape and \
            np.array_equal(x_candidates, state.field.X_f):
        pred = state.predictor
    else:
        pred = FieldPredictor(state.emulator, x_candidates)
    means, _ = pred.mean_var_batch(thetas)
    sens = means.var(axis=0)
    if np.max(sens) <= 0.0:
        warnings.warn("mean-sensitivity factor is zero at every site; "
                      "falling back to the variance criterion")
        return int(np.argmax(var))
    f1 = var / np.max(var) if np.max(var) > 0 else np.ones_like(var)
    f2 = sens / np.max(sens)
    return int(np.argmax(f1 * f2))


# ---------------------------------------------------------------------------
# EGO loops
# ---------------------------------------------------------------------------


@dataclass
class TraceRow:
    iteration: int
    theta: tuple
    x_index: int
    m_k: float
    ei: float
    wall_time: float
    sim_calls: int
    stalled: bool = False


@dataclass
class AlgoResult:
    design: Design
    state: EiState
    trace: list


def _initial_fit(problem: CalibrationProblem, n0: int, seed: int):
    pts = maximin_lhd(problem.space.dim, n0, problem.space.joint_box,
                      seed=derive_seed(seed, "lhd"), restarts=problem.lhd_restarts)
    outs = problem.simulator.run_design(pts, problem.space.d)
    design = Design(problem.space, pts, outs)
    em = train_emulator(design, problem.gp, seed=derive_seed(seed, "fit", 0))
    return design, em


def _map_theta(em: TrainedEmulator, field: FieldData, prior: PriorSpec,
               grid: np.ndarray) -> np.ndarray:
    """Argmax of the emulator-based posterior over a finite grid."""
    pred = FieldPredictor(em, field.X_f)
    mus, covs = pred.mean_cov_batch(grid)
    n = field.n
    S = covs + field.lambda2 * np.eye(n)[None, :, :]
    try:
        L = np.linalg.cholesky(S)
    except np.linalg.LinAlgError:
        S = S + (1e-9 * field.lambda2) * np.eye(n)[None, :, :]
        L = np.linalg.cholesky(S)
    resid = (field.z_f[None, :] - mus)[:, :, None]
    w = np.linalg.solve(L, resid)[:, :, 0]
    quad = (w**2).sum(axis=1)
    logdet = 2.0 * np.log(np.diagonal(L, axis1=1, axis2=2)).sum(axis=1)
    lp = -0.5 * quad - 0.5 * logdet
    if prior._log_density is not None:
        lp = lp + np.array([prior.log_density(t) for t in grid])
    else:
        inside = np.array([prior.contains(t) for t in grid])
        lp = np.where(inside, lp, -np.inf)
    return grid[int(np.argmax(lp))].copy()


def _refit(problem: CalibrationProblem, design: Design, previous: TrainedEmulator,
           seed: int, k: int) -> TrainedEmulator:
    return train_emulator(design, problem.gp,
                          warm_start=previous.hyper.kernel.lengthscales,
                          seed=derive_seed(seed, "fit", k), refit=True)


def run_algorithm1(problem: CalibrationProblem, n0: int, budget: int,
                   seed: int = 0) -> AlgoResult:
    """Batch loop: every iteration runs all field sites at the selected theta.

    The first parameter value is the grid maximizer of the emulator-based
    posterior; subsequent ones maximize the expected improvement.  The
    incumbent is the smallest residual SS actually observed, so it never
    increases.  Stops when the next batch would exceed the budget.
    """
    sim, field = problem.simulator, problem.field
    n = field.n
    if n0 + n > budget:
        raise ValueError(f"budget {budget} cannot fit the initial design ({n0}) "
                         f"plus one batch of {n} runs")
    calls_before = sim.n_calls
    t0 = time.perf_counter()
    design, em = _initial_fit(problem, n0, seed)

    theta1 = _map_theta(em, field, problem.prior, problem.grid.grids[0])
    design, em, ss_new = _append_batch(problem, design, em, theta1, seed, k=1)
    state = EiState(design, em, field, problem.grid, m_k=ss_new,
                    ei_mc_draws=problem.ei_draws, seed=seed)
    state.theta_hats.append(theta1)
    trace = [TraceRow(0, tuple(theta1), -1, state.m_k, np.nan,
                      time.perf_counter() - t0, sim.n_calls - calls_before)]

    stall_streak = 0
    k = 1
    while n0 + n * (len(state.theta_hats) + 1) <= budget:
        sel = select_theta(state, return_details=True)
        design, em, ss_new = _append_batch(problem, design, em, sel.theta, seed, k + 1)
        state.update_emulator(em, design)
        state.m_k = min(state.m_k, ss_new)
        state.incumbent_history.append(state.m_k)
        state.theta_hats.append(sel.theta)
        state.iteration += 1
        stall_streak = stall_streak + 1 if sel.ei < STALL_FRACTION * max(state.m_k, 1e-300) \
            else 0
        trace.append(TraceRow(k, tuple(sel.theta), -1, state.m_k, sel.ei,
                              time.perf_counter() - t0, sim.n_calls - calls_before,
                              stalled=stall_streak >= STALL_PATIENCE))
        k += 1
    used = sim.n_calls - calls_before
    if used > budget:
        raise RuntimeError(f"budget accounting error: {used} > {budget}")
    return AlgoResult(design=design, state=state, trace=trace)


def _append_batch(problem, design, em, theta, seed, k):
    field = problem.field
    pts = np.hstack([field.X_f, np.broadcast_to(theta, (field.n, theta.shape[0]))])
    outs = problem.simulator(field.X_f, np.broadcast_to(theta, (field.n, theta.shape[0])))
    design = design.append(pts, outs, dedup=False)
    em = _refit(problem, design, em, seed, k)
    resid = field.z_f - outs
    return design, em, float(resid @ resid)


def run_algorithm2(problem: CalibrationProblem, n0: int, budget: int,
                   seed: int = 0, crit: str = "variance") -> AlgoResult:
    """One-at-a-time loop: each iteration runs a single (site, theta) pair.

    The site comes from the configured criterion; the incumbent is the
    smallest expected residual SS over every parameter value selected so
    far, recomputed under the newest emulator each iteration (so it may
    rise as well as fall).  In total ``budget - n0`` runs are added.
    """
    if crit not in ("variance", "tradeoff"):
        raise ValueError(f"unknown site criterion {crit!r}")
    sim, field = problem.simulator, problem.field
    if n0 + 1 > budget:
        raise ValueError(f"budget {budget} cannot fit the initial design ({n0}) "
                         f"plus one run")
    calls_before = sim.n_calls
    t0 = time.perf_counter()
    design, em = _initial_fit(problem, n0, seed)

    state = EiState(design, em, field, problem.grid, m_k=np.inf,
                    ei_mc_draws=problem.ei_draws, seed=seed)
    theta1 = _map_theta(em, field, problem.prior, problem.grid.grids[0])
    xi = _pick_site(state, theta1, crit, problem)
    design, em = _append_single(problem, design, em, xi, theta1, seed, k=1)
    state.update_emulator(em, design)
    state.theta_hats.append(theta1)
    state.m_k = _expected_incumbent(state)
    state.incumbent_history = [state.m_k]
    trace = [TraceRow(0, tuple(theta1), xi, state.m_k, np.nan,
                      time.perf_counter() - t0, sim.n_calls - calls_before)]

    stall_streak = 0
    k = 1
    while design.n + 1 <= budget:
        sel = select_theta(state, return_details=True)
        xi = _pick_site(state, sel.theta, crit, problem)
        design, em = _append_single(problem, design, em, xi, sel.theta, seed, k + 1)
        state.update_emulator(em, design)
        state.theta_hats.append(sel.theta)
        state.iteration += 1
        state.m_k = _expected_incumbent(state)
        state.incumbent_history.append(state.m_k)
        stall_streak = stall_streak + 1 if sel.ei < STALL_FRACTION * max(state.m_k, 1e-300) \
            else 0
        trace.append(TraceRow(k, tuple(sel.theta), xi, state.m_k, sel.ei,
                              time.perf_counter() - t0, sim.n_calls - calls_before,
                              stalled=stall_streak >= STALL_PATIENCE))
        k += 1
    used = sim.n_calls - calls_before
    if used > budget:
        raise RuntimeError(f"budget accounting error: {used} > {budget}")
    return AlgoResult(design=design, state=state, trace=trace)


def _pick_site(state, theta, crit, problem):
    if crit == "variance":
        return crit_variance(state, state.field.X_f, theta)
    return crit_tradeoff(state, state.field.X_f, theta, problem.prior,
                         prior_draws=problem.tradeoff_prior_draws)


def _append_single(problem, design, em, x_index, theta, seed, k):
    field = problem.field
    x = field.X_f[x_index]
    pt = np.concatenate([x, theta])[None, :]
    out = problem.simulator(x[None, :], theta[None, :])
    design = design.append(pt, out, dedup=False)
    return design, _refit(problem, design, em, seed, k)


def _expected_incumbent(state: EiState) -> float:
    """Smallest expected residual SS over all past selections, current emulator."""
    thetas = np.vstack(state.theta_hats)
    means, vars_ = state.predictor.mean_var_batch(thetas)
    resid = state.field.z_f[None, :] - means
    ss_exp = (resid**2).sum(axis=1) + vars_.sum(axis=1)
    return float(ss_exp.min())


def write_trace_csv(trace, path):
    """Trace rows: iteration, theta components, site index, incumbent, ei, timing."""
    import csv

    if not trace:
        raise ValueError("empty trace")
    m = len(trace[0].theta)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["iteration"] + [f"theta{j + 1}" for j in range(m)]
                        + ["x_index", "m_k", "ei", "wall_time", "sim_calls", "stalled"])
        for row in trace:
            writer.writerow([row.iteration] + [repr(float(v)) for v in row.theta]
                            + [row.x_index, repr(float(row.m_k)), repr(float(row.ei)),
                               repr(float(row.wall_time)), row.sim_calls,
                               int(row.stalled)])
