"""Gaussian-process emulation of a deterministic simulator.

The simulator is a black-box function of a pair of inputs: a vector of
control values ``x`` living in a box ``x_box`` and a vector of parameter
values ``tau`` living in a box ``tau_box``.  The emulator is a GP with a
parametric trend, a stationary anisotropic correlation function and a
process variance, conditioned on a training design of simulator runs.

Inputs are rescaled internally to the unit cube per dimension before any
kernel evaluation, so fitted length-scales are expressed in unit-cube
coordinates.  Trend coefficients and the process variance are reported in
raw output units.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass

import numpy as np
from scipy.linalg import cho_solve, solve_triangular
from scipy.optimize import minimize
from scipy.spatial.distance import cdist

KERNEL_FAMILIES = ("matern52", "squared-exponential")
TREND_BASES = ("constant", "linear")

DEFAULT_NUGGET = 1e-8
MAX_NUGGET = 1e-2
DEDUP_RADIUS = 1e-9

# Length-scale search box for the marginal-likelihood optimizer, in units
# of the (rescaled) input range.
PSI_LOG_BOUNDS = (np.log(0.05), np.log(5.0))


class DegenerateDesignError(RuntimeError):
    """Covariance factorization failed even after jitter escalation."""


class DuplicatePointError(ValueError):
    """Two design points are closer than the dedup radius."""


class FitWarning(UserWarning):
    """Hyperparameter optimizer stopped before convergence."""


# ---------------------------------------------------------------------------
# input space, points, designs
# ---------------------------------------------------------------------------


def _as_box(box) -> np.ndarray:
    box = np.atleast_2d(np.asarray(box, dtype=float))
    if box.ndim != 2 or box.shape[1] != 2:
        raise ValueError(f"box must have shape (dim, 2), got {box.shape}")
    if not np.all(np.isfinite(box)):
        raise ValueError("box bounds must be finite")
    if not np.all(box[:, 0] < box[:, 1]):
        raise ValueError("box lower bounds must be strictly below upper bounds")
    return box


@dataclass(frozen=True)
class InputSpace:
    """Joint control/parameter input space with declared boxes."""

    x_box: np.ndarray
    tau_box: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "x_box", _as_box(self.x_box))
        object.__setattr__(self, "tau_box", _as_box(self.tau_box))

    @property
    def d(self) -> int:
        return self.x_box.shape[0]

    @property
    def m(self) -> int:
        return self.tau_box.shape[0]

    @property
    def dim(self) -> int:
        return self.d + self.m

    @property
    def joint_box(self) -> np.ndarray:
        return np.vstack([self.x_box, self.tau_box])

    def scale(self, pts):
        """Map raw joint points onto the unit cube."""
        pts = np.atleast_2d(np.asarray(pts, dtype=float))
        box = self.joint_box
        return (pts - box[:, 0]) / (box[:, 1] - box[:, 0])

    def unscale(self, pts):
        pts = np.atleast_2d(np.asarray(pts, dtype=float))
        box = self.joint_box
        return box[:, 0] + pts * (box[:, 1] - box[:, 0])

    def scale_x(self, x):
        x = np.atleast_2d(np.asarray(x, dtype=float))
        return (x - self.x_box[:, 0]) / (self.x_box[:, 1] - self.x_box[:, 0])

    def scale_tau(self, tau):
        tau = np.atleast_2d(np.asarray(tau, dtype=float))
        return (tau - self.tau_box[:, 0]) / (self.tau_box[:, 1] - self.tau_box[:, 0])


@dataclass(frozen=True)
class InputPoint:
    """A single simulator input: control vector ``x`` and parameter vector ``tau``."""

    x: np.ndarray
    tau: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "x", np.atleast_1d(np.asarray(self.x, dtype=float)))
        object.__setattr__(self, "tau", np.atleast_1d(np.asarray(self.tau, dtype=float)))
        if not (np.all(np.isfinite(self.x)) and np.all(np.isfinite(self.tau))):
            raise ValueError("input point entries must be finite")

    @property
    def joint(self) -> np.ndarray:
        return np.concatenate([self.x, self.tau])


def _joint_rows(pts, dim=None):
    """Coerce a point collection (array, InputPoint, or list of either) to (k, dim)."""
    if isinstance(pts, InputPoint):
        rows = pts.joint[None, :]
    elif isinstance(pts, (list, tuple)) and pts and isinstance(pts[0], InputPoint):
        rows = np.vstack([p.joint for p in pts])
    else:
        rows = np.atleast_2d(np.asarray(pts, dtype=float))
    if dim is not None and rows.shape[1] != dim:
        raise ValueError(f"points have dimension {rows.shape[1]}, expected {dim}")
    return rows


class Design:
    """Ordered set of simulator inputs with their recorded outputs.

    Points are rows of ``points`` (control coordinates first, then
    parameters).  Construction rejects non-finite entries and, unless
    ``check_dedup`` is disabled, pairs of points closer than
    ``DEDUP_RADIUS`` in unit-cube coordinates.  The sequential-design loop
    disables the check deliberately and relies on the nugget instead.
    """

    def __init__(self, space: InputSpace, points, outputs, check_dedup: bool = True):
        self.space = space
        self.points = _joint_rows(points, space.dim)
        self.outputs = np.atleast_1d(np.asarray(outputs, dtype=float))
        if self.points.shape[0] != self.outputs.shape[0]:
            raise ValueError("points and outputs must have the same length")
        if self.points.shape[0] == 0:
            raise ValueError("design must contain at least one point")
        if not np.all(np.isfinite(self.points)):
            raise ValueError("design points must be finite")
        if not np.all(np.isfinite(self.outputs)):
            raise ValueError("design outputs must be finite")
        self.scaled = space.scale(self.points)
        if check_dedup and self.n > 1:
            d2 = cdist(self.scaled, self.scaled, "sqeuclidean")
            np.fill_diagonal(d2, np.inf)
            if d2.min() < DEDUP_RADIUS**2:
                i, j = np.unravel_index(np.argmin(d2), d2.shape)
                raise DuplicatePointError(
                    f"design points {i} and {j} are within the dedup radius"
                )

    @property
    def n(self) -> int:
        return self.points.shape[0]

    def append(self, points, outputs, dedup: bool = True) -> "Design":
        """Return a new design with extra runs appended.

        With ``dedup=True`` the combined design is re-checked for
        near-duplicates; sequential loops pass ``dedup=False`` when a
        repeat of an earlier parameter value is a legitimate outcome.
        """
        pts = _joint_rows(points, self.space.dim)
        out = np.atleast_1d(np.asarray(outputs, dtype=float))
        return Design(
            self.space,
            np.vstack([self.points, pts]),
            np.concatenate([self.outputs, out]),
            check_dedup=dedup,
        )

    def x_part(self):
        return self.points[:, : self.space.d]

    def tau_part(self):
        return self.points[:, self.space.d :]


# ---------------------------------------------------------------------------
# kernels
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class KernelSpec:
    """Stationary correlation function with one length-scale per input dimension.

    Length-scales are interpreted in the coordinates of whatever points the
    kernel is evaluated on; fitted emulators store them in unit-cube
    coordinates.
    """

    family: str
    lengthscales: np.ndarray

    def __post_init__(self):
        if self.family not in KERNEL_FAMILIES:
            raise ValueError(f"unknown kernel family {self.family!r}")
        ls = np.atleast_1d(np.asarray(self.lengthscales, dtype=float))
        if not np.all(np.isfinite(ls)) or np.any(ls <= 0):
            raise ValueError("length-scales must be finite and strictly positive")
        object.__setattr__(self, "lengthscales", ls)


def _corr_from_sqdist(family: str, r2: np.ndarray) -> np.ndarray:
    """Correlation as a function of the squared scaled distance."""
    if family == "squared-exponential":
        return np.exp(-0.5 * r2)
    if family == "matern52":
        t = np.sqrt(5.0 * np.maximum(r2, 0.0))
        return (1.0 + t + t * t / 3.0) * np.exp(-t)
    raise ValueError(f"unknown kernel family {family!r}")


def _cross_sqdist(a: np.ndarray, b: np.ndarray, lengthscales: np.ndarray) -> np.ndarray:
    return cdist(a / lengthscales, b / lengthscales, "sqeuclidean")


def kernel_eval(kernel: KernelSpec, a, b) -> float:
    """Correlation C(a, b) in (0, 1]; equals 1 only at zero lag."""
    ra = _joint_rows(a)
    rb = _joint_rows(b)
    if ra.shape[1] != rb.shape[1]:
        raise ValueError("points have mismatched dimensions")
    if ra.shape[1] != kernel.lengthscales.shape[0]:
        raise ValueError("kernel length-scales do not match point dimension")
    r2 = _cross_sqdist(ra, rb, kernel.lengthscales)
    return float(_corr_from_sqdist(kernel.family, r2)[0, 0])


def build_correlation_matrix(kernel: KernelSpec, pts, nugget: float = 0.0) -> np.ndarray:
    """Correlation matrix of a point set, with ``nugget`` added on the diagonal."""
    rows = _joint_rows(pts)
    if rows.shape[1] != kernel.lengthscales.shape[0]:
        raise ValueError("kernel length-scales do not match point dimension")
    if nugget < 0:
        raise ValueError("nugget must be nonnegative")
    r2 = _cross_sqdist(rows, rows, kernel.lengthscales)
    mat = _corr_from_sqdist(kernel.family, r2)
    # exact symmetry and unit diagonal regardless of round-off
    mat = 0.5 * (mat + mat.T)
    np.fill_diagonal(mat, 1.0 + nugget)
    return mat


def robust_cholesky(mat: np.ndarray, nugget: float = DEFAULT_NUGGET,
                    max_nugget: float = MAX_NUGGET):
    """Lower Cholesky factor of ``mat + jitter*I``, escalating the jitter.

    The jitter starts at ``nugget`` (relative to the mean diagonal) and is
    multiplied by 10 until factorization succeeds or ``max_nugget`` is
    exceeded, at which point a DegenerateDesignError is raised.  Returns
    the factor and the jitter that was actually used.
    """
    scale = float(np.mean(np.diag(mat)))
    if scale <= 0 or not np.isfinite(scale):
        scale = 1.0
    jitter = nugget
    eye = np.eye(mat.shape[0])
    while True:
        try:
            L = np.linalg.cholesky(mat + (jitter * scale) * eye)
            return L, jitter
        except np.linalg.LinAlgError:
            jitter = max(jitter, 1e-12) * 10.0
            if jitter > max_nugget:
                raise DegenerateDesignError(
                    f"factorization failed with jitter up to {max_nugget:g}"
                ) from None


# ---------------------------------------------------------------------------
# hyperparameters and fitting
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class GpHyperparams:
    """Trend coefficients, process variance, correlation spec and nugget.

    ``beta`` and ``sigma2`` are in raw output units; the trend basis is
    evaluated on unit-cube inputs.
    """

    beta: np.ndarray
    sigma2: float
    kernel: KernelSpec
    nugget: float = DEFAULT_NUGGET
    fit_converged: bool = True

    def __post_init__(self):
        object.__setattr__(self, "beta", np.atleast_1d(np.asarray(self.beta, dtype=float)))
        if not self.sigma2 > 0:
            raise ValueError("sigma2 must be strictly positive")
        if self.nugget < 0:
            raise ValueError("nugget must be nonnegative")


@dataclass(frozen=True)
class GpConfig:
    """Knobs for marginal-likelihood fitting and in-loop refitting."""

    kernel_family: str = "matern52"
    trend: str = "constant"
    nugget: float = DEFAULT_NUGGET
    n_starts: int = 8
    max_evals_per_start: int = 200
    refit_starts: int = 2
    refit_max_evals: int = 60


def _basis(trend: str, scaled_pts: np.ndarray) -> np.ndarray:
    if trend == "constant":
        return np.ones((scaled_pts.shape[0], 1))
    if trend == "linear":
        return np.hstack([np.ones((scaled_pts.shape[0], 1)), scaled_pts])
    raise ValueError(f"unknown trend basis {trend!r}")


def _gls_profile(L: np.ndarray, H: np.ndarray, y: np.ndarray):
    """Profiled trend coefficients and variance given a correlation factor.

    Solves the generalized least squares problem in whitened coordinates:
    beta = argmin ||L^-1 (y - H beta)||^2, sigma2 = mean squared whitened
    residual.
    """
    A = solve_triangular(L, H, lower=True)
    b = solve_triangular(L, y, lower=True)
    ata = A.T @ A
    beta = np.linalg.solve(ata, A.T @ b)
    resid = b - A @ beta
    sigma2 = float(resid @ resid) / y.shape[0]
    return beta, sigma2, resid


def _nll_of_logpsi(logpsi, scaled, H, ys, family, nugget, lo, hi):
    if np.any(logpsi < lo) or np.any(logpsi > hi):
        return np.inf
    psi = np.exp(logpsi)
    r2 = _cross_sqdist(scaled, scaled, psi)
    C = _corr_from_sqdist(family, r2)
    C[np.diag_indices_from(C)] = 1.0 + nugget
    try:
        L = np.linalg.cholesky(C)
    except np.linalg.LinAlgError:
        return np.inf
    _, sigma2, _ = _gls_profile(L, H, ys)
    sigma2 = max(sigma2, 1e-300)
    n = ys.shape[0]
    return 0.5 * n * np.log(sigma2) + np.sum(np.log(np.diag(L)))


def _lhs_unit(rng: np.random.Generator, n: int, dim: int) -> np.ndarray:
    """Random Latin hypercube sample on the unit cube (cell-uniform)."""
    u = (np.argsort(rng.random((n, dim)), axis=0) + rng.random((n, dim))) / n
    return u


def fit_hyperparameters(design: Design, kernel_family: str = "matern52",
                        trend: str = "constant", nugget: float = DEFAULT_NUGGET,
                        n_starts: int = 8, max_evals_per_start: int = 200,
                        warm_start=None, seed: int = 0) -> GpHyperparams:
    """Maximum-likelihood hyperparameters from the training runs alone.

    The trend coefficients and process variance are profiled out in closed
    form (generalized least squares and the mean whitened residual); the
    length-scales are searched by multi-start Nelder-Mead over log scales,
    with starts drawn from a Latin hypercube on the search box.  An
    optional ``warm_start`` (length-scales in unit-cube coordinates) is
    added as an extra start, which sequential refits use.
    """
    if kernel_family not in KERNEL_FAMILIES:
        raise ValueError(f"unknown kernel family {kernel_family!r}")
    scaled = design.scaled
    q = scaled.shape[1]
    H = _basis(trend, scaled)
    p = H.shape[1]
    if design.n < p + 2:
        raise ValueError(f"need at least {p + 2} design points to fit, got {design.n}")

    y_center = float(np.mean(design.outputs))
    y_scale = float(np.std(design.outputs))
    if y_scale == 0.0:
        y_scale = 1.0
    ys = (design.outputs - y_center) / y_scale

    lo, hi = PSI_LOG_BOUNDS
    rng = np.random.default_rng(seed)
    starts = lo + (hi - lo) * _lhs_unit(rng, n_starts, q)
    if warm_start is not None:
        w = np.log(np.clip(np.atleast_1d(np.asarray(warm_start, dtype=float)),
                           np.exp(lo), np.exp(hi)))
        starts = np.vstack([w, starts])

    obj = lambda lp: _nll_of_logpsi(lp, scaled, H, ys, kernel_family, nugget, lo, hi)
    best = None
    converged = False
    for s in starts:
        res = minimize(obj, s, method="Nelder-Mead",
                       options={"maxfev": max_evals_per_start, "xatol": 1e-3,
                                "fatol": 1e-6})
        if not np.isfinite(res.fun):
            continue
        if best is None or res.fun < best.fun:
            best = res
            converged = bool(res.success)
    if best is None:
        raise DegenerateDesignError("marginal-likelihood fit failed at every start")
    if not converged:
        warnings.warn("length-scale search hit its evaluation budget; "
                      "returning the best point found", FitWarning)

    psi = np.exp(best.x)
    C = build_correlation_matrix(KernelSpec(kernel_family, psi), scaled, nugget)
    L, _ = robust_cholesky(C, nugget)
    beta_s, sigma2_s, _ = _gls_profile(L, H, ys)
    sigma2_s = max(sigma2_s, nugget)

    # map the standardized-output profile back to raw units
    beta = y_scale * beta_s
    beta[0] += y_center
    sigma2 = sigma2_s * y_scale**2
    return GpHyperparams(beta=beta, sigma2=sigma2,
                         kernel=KernelSpec(kernel_family, psi),
                         nugget=nugget, fit_converged=converged)


def marginal_log_likelihood(design: Design, hyper: GpHyperparams,
                            trend: str = "constant") -> float:
    """Gaussian log density of the training outputs under the GP prior."""
    scaled = design.scaled
    H = _basis(trend, scaled)
    C = build_correlation_matrix(hyper.kernel, scaled, hyper.nugget)
    L, _ = robust_cholesky(C, hyper.nugget)
    resid = design.outputs - H @ hyper.beta
    w = solve_triangular(L, resid, lower=True)
    n = design.n
    logdet = 2.0 * np.sum(np.log(np.diag(L))) + n * np.log(hyper.sigma2)
    return float(-0.5 * (w @ w) / hyper.sigma2 - 0.5 * logdet - 0.5 * n * np.log(2 * np.pi))


# ---------------------------------------------------------------------------
# trained emulator
# ---------------------------------------------------------------------------


class TrainedEmulator:
    """GP conditioned on a design; immutable once constructed.

    Holds the lower Cholesky factor of the training correlation matrix and
    the precomputed solve against the trend residual, so prediction is a
    pair of triangular operations.  Instances are safe to share across
    threads; refitting produces a new instance.
    """

    def __init__(self, design: Design, hyper: GpHyperparams, trend: str = "constant"):
        if hyper.kernel.lengthscales.shape[0] != design.space.dim:
            raise ValueError("kernel length-scales do not match the input space")
        self.design = design
        self.hyper = hyper
        self.trend = trend
        self._H = _basis(trend, design.scaled)
        C = build_correlation_matrix(hyper.kernel, design.scaled, hyper.nugget)
        self._L, self.nugget_used = robust_cholesky(C, hyper.nugget)
        self._resid = design.outputs - self._H @ hyper.beta
        self._alpha = cho_solve((self._L, True), self._resid)
        self._scaled_over_psi = design.scaled / hyper.kernel.lengthscales
        self._Linv = None

    @property
    def space(self) -> InputSpace:
        return self.design.space

    @property
    def n_train(self) -> int:
        return self.design.n

    def _linv(self) -> np.ndarray:
        # dense inverse factor; turns per-point triangular solves into GEMMs
        if self._Linv is None:
            self._Linv = solve_triangular(self._L, np.eye(self.design.n), lower=True)
        return self._Linv

    def _cross_corr(self, scaled_pts: np.ndarray) -> np.ndarray:
        r2 = cdist(scaled_pts / self.hyper.kernel.lengthscales,
                   self._scaled_over_psi, "sqeuclidean")
        return _corr_from_sqdist(self.hyper.kernel.family, r2)

    def predict(self, pts, full_cov: bool = True):
        """Conditional mean and covariance at new points.

        Returns ``(mean, cov)`` with ``cov`` symmetric and its diagonal
        clamped at zero; with ``full_cov=False`` the second element is the
        clamped variance vector only.
        """
        rows = _joint_rows(pts, self.space.dim)
        scaled = self.space.scale(rows)
        R = self._cross_corr(scaled)
        mean = _basis(self.trend, scaled) @ self.hyper.beta + R @ self._alpha
        W = self._linv() @ R.T
        if not full_cov:
            var = self.hyper.sigma2 * (1.0 - np.einsum("ij,ij->j", W, W))
            return mean, np.maximum(var, 0.0)
        r2 = _cross_sqdist(scaled, scaled, self.hyper.kernel.lengthscales)
        Kpp = _corr_from_sqdist(self.hyper.kernel.family, r2)
        cov = self.hyper.sigma2 * (Kpp - W.T @ W)
        cov = 0.5 * (cov + cov.T)
        diag = np.diag(cov).copy()
        np.fill_diagonal(cov, np.maximum(diag, 0.0))
        return mean, cov

    def sample_paths(self, pts, count: int, seed: int = 0) -> np.ndarray:
        """Joint Gaussian draws of the conditional process at ``pts``.

        Shape (count, len(pts)); deterministic under ``seed``.  The
        covariance is factorized by eigendecomposition with negative
        eigenvalues clamped to zero, so degenerate (interpolated) points
        are handled exactly.
        """
        rows = _joint_rows(pts, self.space.dim)
        mean, cov = self.predict(rows)
        k = rows.shape[0]
        if count == 0:
            return np.empty((0, k))
        w, Q = np.linalg.eigh(cov)
        F = Q * np.sqrt(np.clip(w, 0.0, None))
        z = np.random.default_rng(seed).standard_normal((count, k))
        return mean[None, :] + z @ F.T

    # -- persistence --------------------------------------------------------

    def save(self, path):
        """Write hyperparameters and training design to a JSON text file."""
        doc = {
            "format": "egocal-emulator",
            "version": 1,
            "space": {"x_box": self.space.x_box.tolist(),
                      "tau_box": self.space.tau_box.tolist()},
            "design": {"points": self.design.points.tolist(),
                       "outputs": self.design.outputs.tolist()},
            "trend": self.trend,
            "hyper": {
                "beta": self.hyper.beta.tolist(),
                "sigma2": self.hyper.sigma2,
                "kernel_family": self.hyper.kernel.family,
                "lengthscales": self.hyper.kernel.lengthscales.tolist(),
                "nugget": self.hyper.nugget,
                "fit_converged": self.hyper.fit_converged,
            },
        }
        with open(path, "w") as fh:
            json.dump(doc, fh, indent=1, sort_keys=True)
            fh.write("\n")

    @classmethod
    def load(cls, path) -> "TrainedEmulator":
        with open(path) as fh:
            doc = json.load(fh)
        if doc.get("format") != "egocal-emulator":
            raise ValueError(f"{path} is not an emulator file")
        space = InputSpace(doc["space"]["x_box"], doc["space"]["tau_box"])
        design = Design(space, doc["design"]["points"], doc["design"]["outputs"],
                        check_dedup=False)
        h = doc["hyper"]
        hyper = GpHyperparams(beta=h["beta"], sigma2=h["sigma2"],
                              kernel=KernelSpec(h["kernel_family"], h["lengthscales"]),
                              nugget=h["nugget"], fit_converged=h["fit_converged"])
        return cls(design, hyper, trend=doc["trend"])


def train_emulator(design: Design, config: GpConfig = GpConfig(),
                   warm_start=None, seed: int = 0, refit: bool = False) -> TrainedEmulator:
    """Fit hyperparameters and condition the GP on the design.

    ``refit=True`` uses the cheaper in-loop budget (fewer starts, fewer
    evaluations) intended for sequential updates where ``warm_start``
    carries the previous length-scales.
    """
    n_starts = config.refit_starts if refit else config.n_starts
    max_evals = config.refit_max_evals if refit else config.max_evals_per_start
    hyper = fit_hyperparameters(design, kernel_family=config.kernel_family,
                                trend=config.trend, nugget=config.nugget,
                                n_starts=n_starts, max_evals_per_start=max_evals,
                                warm_start=warm_start, seed=seed)
    return TrainedEmulator(design, hyper, trend=config.trend)


def predict(em: TrainedEmulator, pts, full_cov: bool = True):
    return em.predict(pts, full_cov=full_cov)


def sample_paths(em: TrainedEmulator, pts, count: int, seed: int = 0):
    return em.sample_paths(pts, count, seed=seed)


def loo_diagnostics(em: TrainedEmulator):
    """Leave-one-out predictions from the trained factorization.

    Returns a dict with per-point LOO means, standard deviations and
    standardized residuals.  No threshold is enforced; this is a
    diagnostic for the user to inspect.
    """
    K_inv = cho_solve((em._L, True), np.eye(em.n_train))
    kd = np.diag(K_inv)
    loo_resid = em._alpha / kd
    loo_mean = em.design.outputs - loo_resid
    loo_var = em.hyper.sigma2 / kd
    loo_sd = np.sqrt(np.maximum(loo_var, 0.0))
    standardized = loo_resid / np.where(loo_sd > 0, loo_sd, 1.0)
    return {"mean": loo_mean, "sd": loo_sd, "standardized_residual": standardized}


# ---------------------------------------------------------------------------
# fast conditional predictions along the field sites
# ---------------------------------------------------------------------------


class FieldPredictor:
    """Cached conditional predictions at ``(x_f^i, theta)`` for fixed field sites.

    The control-coordinate part of every scaled distance is independent of
    ``theta``, as is the correlation matrix among the prediction points
    themselves (they share one ``theta``), so both are precomputed.  This
    is the hot path of posterior evaluation and of the improvement
    criterion over candidate grids.
    """

    def __init__(self, em: TrainedEmulator, x_sites):
        self.em = em
        space = em.space
        x_sites = np.atleast_2d(np.asarray(x_sites, dtype=float))
        if x_sites.shape[1] != space.d:
            raise ValueError("field sites do not match the control dimension")
        self.n = x_sites.shape[0]
        psi = em.hyper.kernel.lengthscales
        self._psi_x = psi[: space.d]
        self._psi_tau = psi[space.d :]
        xs = space.scale_x(x_sites)
        train = em.design.scaled
        self._A = _cross_sqdist(xs, train[:, : space.d], self._psi_x)  # (n, N)
        self._tau_train = train[:, space.d :] / self._psi_tau  # (N, m)
        r2_pp = _cross_sqdist(xs, xs, self._psi_x)
        self._Kpp = _corr_from_sqdist(em.hyper.kernel.family, r2_pp)
        beta = em.hyper.beta
        if em.trend == "constant":
            self._mean0 = np.full(self.n, beta[0])
            self._beta_tau = None
        else:
            d = space.d
            self._mean0 = beta[0] + xs @ beta[1 : 1 + d]
            self._beta_tau = beta[1 + d :]
        self._Linv = em._linv()
        self._alpha = em._alpha
        self._family = em.hyper.kernel.family
        self._sigma2 = em.hyper.sigma2
        self._scale_tau = lambda t: space.scale_tau(t)

    def _tau_sqdist(self, thetas) -> np.ndarray:
        ts = self._scale_tau(thetas) / self._psi_tau
        return cdist(ts, self._tau_train, "sqeuclidean")  # (g, N)

    def _trend_mean(self, thetas_scaled_rows) -> np.ndarray:
        if self._beta_tau is None:
            return self._mean0[None, :]
        return self._mean0[None, :] + (thetas_scaled_rows @ self._beta_tau)[:, None]

    def mean_cov(self, theta):
        """Conditional mean (n,) and covariance (n, n) at a single theta.

        Scalar fast path of mean_cov_batch; this runs inside every MCMC
        step of the emulator-based posterior.
        """
        ts = self._scale_tau(theta)[0] / self._psi_tau
        diff = self._tau_train - ts
        b = np.einsum("ij,ij->i", diff, diff)
        r2 = self._A + b[None, :]
        R = _corr_from_sqdist(self._family, r2)
        mean = self._trend_mean(np.atleast_2d(ts * self._psi_tau))[0] + R @ self._alpha
        W = self._Linv @ R.T
        cov = self._sigma2 * (self._Kpp - W.T @ W)
        cov = 0.5 * (cov + cov.T)
        di = np.arange(self.n)
        cov[di, di] = np.maximum(cov[di, di], 0.0)
        return mean, cov

    def mean_cov_batch(self, thetas):
        """Batched means (g, n) and covariances (g, n, n) over candidate thetas."""
        thetas = np.atleast_2d(np.asarray(thetas, dtype=float))
        g = thetas.shape[0]
        B = self._tau_sqdist(thetas)
        r2 = self._A[None, :, :] + B[:, None, :]  # (g, n, N)
        R = _corr_from_sqdist(self._family, r2)
        mean = self._trend_mean(self._scale_tau(thetas)) + R @ self._alpha
        W = self._Linv @ R.reshape(g * self.n, -1).T  # (N, g*n)
        Wb = np.ascontiguousarray(W.reshape(-1, g, self.n).transpose(1, 2, 0))
        covs = self._sigma2 * (self._Kpp[None, :, :] - Wb @ Wb.transpose(0, 2, 1))
        covs = 0.5 * (covs + covs.transpose(0, 2, 1))
        di = np.arange(self.n)
        covs[:, di, di] = np.maximum(covs[:, di, di], 0.0)
        return mean, covs

    def mean_var_batch(self, thetas):
        """Batched means and marginal variances only (g, n); cheaper than full covariance."""
        thetas = np.atleast_2d(np.asarray(thetas, dtype=float))
        g = thetas.shape[0]
        B = self._tau_sqdist(thetas)
        r2 = self._A[None, :, :] + B[:, None, :]
        R = _corr_from_sqdist(self._family, r2)
        mean = self._trend_mean(self._scale_tau(thetas)) + R @ self._alpha
        W = self._Linv @ R.reshape(g * self.n, -1).T
        var = self._sigma2 * (1.0 - np.einsum("ij,ij->j", W, W))
        return mean, np.maximum(var.reshape(g, self.n), 0.0)
