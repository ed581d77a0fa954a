"""Statistical model linking simulator outputs to field measurements.

Field measurements are modeled as the simulator run at the optimal
parameter value plus white noise of known variance.  Two unnormalized
posterior log densities over the parameter are provided: the target one,
which runs the actual simulator inside the likelihood, and the
approximated one, which plugs in the conditional distribution of a trained
emulator and is cheap to evaluate.  Everything works on the log scale.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass

import numpy as np
from scipy.linalg import cho_factor, cho_solve

from .gp import FieldPredictor, TrainedEmulator, _as_box


class SimulatorError(RuntimeError):
    """The simulator raised while being evaluated."""


class Simulator:
    """Deterministic code wrapper that counts evaluations.

    ``fn(x, tau)`` must accept arrays of shape (k, d) and (k, m) and return
    (k,) outputs.  Evaluations are the budget currency of every sequential
    routine, so the counter is authoritative: one row equals one run.
    ``expensive`` marks handles whose call count must stay within a design
    budget; benchmark functions are cheap but are counted all the same.
    """

    def __init__(self, fn, d: int, m: int, name: str = "simulator",
                 expensive: bool = False):
        self.fn = fn
        self.d = d
        self.m = m
        self.name = name
        self.expensive = expensive
        self.n_calls = 0

    def __call__(self, x, tau) -> np.ndarray:
        x = np.atleast_2d(np.asarray(x, dtype=float))
        tau = np.atleast_2d(np.asarray(tau, dtype=float))
        if tau.shape[0] == 1 and x.shape[0] > 1:
            tau = np.broadcast_to(tau, (x.shape[0], tau.shape[1]))
        if x.shape[0] != tau.shape[0]:
            raise ValueError("x and tau must have the same number of rows")
        try:
            out = np.asarray(self.fn(x, tau), dtype=float).reshape(-1)
        except Exception as exc:  # propagate with context
            raise SimulatorError(f"{self.name} failed at x={x!r}, tau={tau!r}") from exc
        if out.shape[0] != x.shape[0]:
            raise SimulatorError(f"{self.name} returned {out.shape[0]} values for "
                                 f"{x.shape[0]} inputs")
        self.n_calls += x.shape[0]
        return out

    def run_design(self, points, d=None) -> np.ndarray:
        """Evaluate joint (x, tau) rows."""
        pts = np.atleast_2d(np.asarray(points, dtype=float))
        d = self.d if d is None else d
        return self(pts[:, :d], pts[:, d:])


@dataclass(frozen=True)
class FieldData:
    """Field sites, measurements and the known noise variance."""

    X_f: np.ndarray
    z_f: np.ndarray
    lambda2: float

    def __post_init__(self):
        X = np.atleast_2d(np.asarray(self.X_f, dtype=float))
        if X.shape[0] == 1 and X.shape[1] > 1 and np.asarray(self.z_f).size == X.shape[1]:
            # a 1-d list of scalar sites means n sites in one control dimension
            X = X.T
        z = np.atleast_1d(np.asarray(self.z_f, dtype=float))
        object.__setattr__(self, "X_f", X)
        object.__setattr__(self, "z_f", z)
        if X.shape[0] != z.shape[0]:
            raise ValueError("X_f and z_f must have the same number of rows")
        if X.shape[0] < 1:
            raise ValueError("need at least one field measurement")
        if not (np.all(np.isfinite(X)) and np.all(np.isfinite(z))):
            raise ValueError("field data must be finite")
        if not self.lambda2 > 0:
            raise ValueError("the noise variance lambda2 must be strictly positive")

    @property
    def n(self) -> int:
        return self.z_f.shape[0]

    @property
    def d(self) -> int:
        return self.X_f.shape[1]

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow([f"x{j + 1}" for j in range(self.d)] + ["z"])
            for row, z in zip(self.X_f, self.z_f):
                writer.writerow([repr(float(v)) for v in row] + [repr(float(z))])

    @classmethod
    def from_csv(cls, path, lambda2: float) -> "FieldData":
        """Load sites and measurements from columns x1..xd, z."""
        with open(path, newline="") as fh:
            reader = csv.reader(fh)
            header = next(reader)
            cols = [c.strip() for c in header]
            if "z" not in cols:
                raise ValueError(f"{path} has no 'z' column")
            zi = cols.index("z")
            xi = [i for i, c in enumerate(cols) if c.startswith("x")]
            rows = [r for r in reader if r]
        X = np.array([[float(r[i]) for i in xi] for r in rows])
        z = np.array([float(r[zi]) for r in rows])
        return cls(X, z, lambda2)


@dataclass(frozen=True)
class DiscrepancyCov:
    """Known covariance of a systematic code discrepancy at the field sites."""

    Vb: np.ndarray

    def __post_init__(self):
        V = np.atleast_2d(np.asarray(self.Vb, dtype=float))
        object.__setattr__(self, "Vb", V)
        if V.shape[0] != V.shape[1]:
            raise ValueError("discrepancy covariance must be square")
        if not np.allclose(V, V.T, atol=1e-10):
            raise ValueError("discrepancy covariance must be symmetric")


class PriorSpec:
    """Prior over the parameter box: uniform by default, or a custom log density.

    ``log_density`` must be a callable theta -> float over the box; the
    box indicator is applied on top of it either way.  ``sampler`` is only
    required for criteria that need prior draws when the density is
    custom.
    """

    def __init__(self, box, log_density=None, sampler=None):
        self.box = _as_box(box)
        self._log_density = log_density
        self._sampler = sampler

    @property
    def m(self) -> int:
        return self.box.shape[0]

    def contains(self, theta) -> bool:
        t = np.atleast_1d(np.asarray(theta, dtype=float))
        return bool(np.all(t >= self.box[:, 0]) and np.all(t <= self.box[:, 1]))

    def log_density(self, theta) -> float:
        if not self.contains(theta):
            return -np.inf
        if self._log_density is None:
            return 0.0  # unnormalized uniform
        return float(self._log_density(np.atleast_1d(np.asarray(theta, dtype=float))))

    def sample(self, rng: np.random.Generator, size: int = 1) -> np.ndarray:
        if self._log_density is not None and self._sampler is None:
            raise NotImplementedError("custom prior supplied without a sampler")
        if self._sampler is not None:
            return np.atleast_2d(self._sampler(rng, size))
        return rng.uniform(self.box[:, 0], self.box[:, 1], size=(size, self.m))


# ---------------------------------------------------------------------------
# residual sums of squares
# ---------------------------------------------------------------------------


def _sim_at_field(sim: Simulator, theta, field: FieldData) -> np.ndarray:
    theta = np.atleast_1d(np.asarray(theta, dtype=float))
    tau = np.broadcast_to(theta, (field.n, theta.shape[0]))
    return sim(field.X_f, tau)


def sum_of_squares(sim: Simulator, theta, field: FieldData) -> float:
    """Residual sum of squares between the measurements and the code at theta.

    Runs the actual simulator at every field site.
    """
    resid = field.z_f - _sim_at_field(sim, theta, field)
    return float(resid @ resid)


def weighted_sum_of_squares(sim: Simulator, theta, field: FieldData,
                            disc: DiscrepancyCov) -> float:
    """Residual quadratic form against the discrepancy-plus-noise covariance."""
    resid = field.z_f - _sim_at_field(sim, theta, field)
    W = disc.Vb + field.lambda2 * np.eye(field.n)
    try:
        cf = cho_factor(W, lower=True)
    except np.linalg.LinAlgError as exc:
        raise ValueError("discrepancy covariance is not positive semidefinite") from exc
    return float(resid @ cho_solve(cf, resid))


# ---------------------------------------------------------------------------
# posterior log densities
# ---------------------------------------------------------------------------


def target_log_posterior(sim: Simulator, theta, field: FieldData,
                         prior: PriorSpec) -> float:
    """Unnormalized log posterior using the true simulator in the likelihood."""
    lp = prior.log_density(theta)
    if lp == -np.inf:
        return -np.inf
    n = field.n
    ss = sum_of_squares(sim, theta, field)
    return -0.5 * n * math.log(2 * math.pi * field.lambda2) \
        - ss / (2.0 * field.lambda2) + lp


class ApproxPosterior:
    """Emulator-based posterior log density, cached for repeated evaluation.

    The likelihood is the Gaussian density of the measurements with the
    emulator's conditional mean at ``(X_f, theta)`` and conditional
    covariance inflated by the noise variance.  No simulator calls are
    made.  Instances are cheap closures over a FieldPredictor; build one
    per (emulator, field) pair and call it inside MCMC.
    """

    _JITTER_MAX = 1e-2

    def __init__(self, em: TrainedEmulator, field: FieldData, prior: PriorSpec):
        if field.d != em.space.d:
            raise ValueError("field sites do not match the emulator's control dimension")
        self.field = field
        self.prior = prior
        self.predictor = FieldPredictor(em, field.X_f)
        self._const = -0.5 * field.n * math.log(2 * math.pi)

    def __call__(self, theta) -> float:
        lp = self.prior.log_density(theta)
        if lp == -np.inf:
            return -np.inf
        mu, V = self.predictor.mean_cov(theta)
        n = self.field.n
        S = V + self.field.lambda2 * np.eye(n)
        jitter = 0.0
        while True:
            try:
                cf = cho_factor(S if jitter == 0.0 else S + jitter * np.eye(n),
                                lower=True)
                break
            except np.linalg.LinAlgError:
                jitter = max(jitter, 1e-10 * self.field.lambda2) * 10.0
                if jitter > self._JITTER_MAX * self.field.lambda2:
                    raise DegenerateCovarianceError(
                        f"likelihood covariance not factorizable at theta={theta!r}")
        resid = self.field.z_f - mu
        quad = float(resid @ cho_solve(cf, resid))
        logdet = 2.0 * float(np.sum(np.log(np.diag(cf[0]))))
        return self._const - 0.5 * logdet - 0.5 * quad + lp


class DegenerateCovarianceError(RuntimeError):
    """Likelihood covariance stayed non-factorizable after jitter escalation."""


def approx_log_posterior(em: TrainedEmulator, theta, field: FieldData,
                         prior: PriorSpec) -> float:
    """One-shot form of ApproxPosterior for casual use."""
    return ApproxPosterior(em, field, prior)(theta)


def expected_ss(em: TrainedEmulator, theta, field: FieldData,
                predictor: FieldPredictor | None = None) -> float:
    """Expected residual sum of squares under the emulator at theta.

    Closed form: squared mean residual plus the trace of the conditional
    covariance at the field sites.
    """
    pred = predictor if predictor is not None else FieldPredictor(em, field.X_f)
    mean, var = pred.mean_var_batch(np.atleast_2d(np.asarray(theta, dtype=float)))
    resid = field.z_f - mean[0]
    return float(resid @ resid + var[0].sum())
