"""Sample-based scores of calibration quality.

The divergence between two posteriors represented by sample sets is
estimated with the classical k-nearest-neighbor estimator of
Kullback-Leibler divergence (Wang, Kulkarni and Verdu, 2009).  Coverage
checks whether equal-tailed credible intervals contain the true parameter
value.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from .mcmc import Chain, credible_interval

TIE_JITTER = 1e-12


@dataclass(frozen=True)
class KlEstimate:
    value: float
    k: int
    n_p: int
    n_q: int


def kl_knn(samples_p, samples_q, k: int = 1) -> KlEstimate:
    """kNN divergence estimate KL(P || Q) from two sample sets.

    value = (d / n_p) * sum_i log(nu_k(i) / rho_k(i)) + log(n_q / (n_p - 1))

    where rho_k(i) is the distance from the i-th P point to its k-th
    nearest neighbor within P (self excluded) and nu_k(i) the distance to
    its k-th nearest neighbor in Q.  Distances below the tie jitter are
    floored at it.  The estimate can be slightly negative by estimator
    noise.
    """
    P = np.asarray(samples_p, dtype=float)
    Q = np.asarray(samples_q, dtype=float)
    if P.ndim == 1:
        P = P[:, None]
    if Q.ndim == 1:
        Q = Q[:, None]
    if P.ndim != 2 or Q.ndim != 2:
        raise ValueError("sample sets must be 2-d arrays (points in rows)")
    if P.shape[1] != Q.shape[1]:
        raise ValueError("sample sets must share one dimension")
    n_p, d = P.shape
    n_q = Q.shape[0]
    if k < 1:
        raise ValueError("neighbor order k must be at least 1")
    if n_p < k + 1 or n_q < k + 1:
        raise ValueError(f"need at least k+1={k + 1} samples in each set")
    if np.all(np.ptp(P, axis=0) == 0) or np.all(np.ptp(Q, axis=0) == 0):
        raise ValueError("degenerate sample set: all points identical")

    rho = cKDTree(P).query(P, k=k + 1)[0][:, k]  # k+1 because the point matches itself
    nu = cKDTree(Q).query(P, k=k)[0]
    if k > 1:
        nu = nu[:, k - 1]
    rho = np.maximum(rho, TIE_JITTER)
    nu = np.maximum(nu, TIE_JITTER)
    value = float((d / n_p) * np.sum(np.log(nu / rho)) + np.log(n_q / (n_p - 1)))
    return KlEstimate(value=value, k=k, n_p=n_p, n_q=n_q)


def nn_spacing(samples) -> float:
    """Median positive nearest-neighbor distance within a sample set."""
    X = np.asarray(samples, dtype=float)
    if X.ndim == 1:
        X = X[:, None]
    d = cKDTree(X).query(X, k=2)[0][:, 1]
    pos = d[d > 0]
    if pos.size == 0:
        raise ValueError("degenerate sample set: all points identical")
    return float(np.median(pos))


def dither(samples, seed: int = 0, factor: float = 0.5) -> np.ndarray:
    """Break sample ties with isotropic noise at the nearest-neighbor scale.

    MCMC output contains exact duplicates (rejected moves repeat the
    current state), which violate the continuity assumption behind the
    kNN divergence estimator and bias it upward.  Adding Gaussian noise
    of ``factor`` times the median nearest-neighbor spacing restores
    distinct points while perturbing the distribution far below its own
    scale.
    """
    X = np.asarray(samples, dtype=float)
    squeeze = X.ndim == 1
    if squeeze:
        X = X[:, None]
    eps = factor * nn_spacing(X)
    out = X + eps * np.random.default_rng(seed).standard_normal(X.shape)
    return out[:, 0] if squeeze else out


@dataclass(frozen=True)
class CoverageResult:
    per_dim: np.ndarray   # bool per marginal
    covered: bool         # every marginal interval contains the truth
    lo: np.ndarray
    hi: np.ndarray


def coverage(chain: Chain, theta_true, level: float = 0.95) -> CoverageResult:
    """Whether each marginal credible interval of the chain covers the truth."""
    theta_true = np.atleast_1d(np.asarray(theta_true, dtype=float))
    lo, hi = credible_interval(chain, level)
    per_dim = (theta_true >= lo) & (theta_true <= hi)
    return CoverageResult(per_dim=per_dim, covered=bool(per_dim.all()), lo=lo, hi=hi)


def coverage_rate(flags) -> float:
    """Aggregate coverage over replicates as a rate in [0, 1]."""
    flags = [bool(f.covered) if isinstance(f, CoverageResult) else bool(f) for f in flags]
    if not flags:
        raise ValueError("no replicates")
    return float(np.mean(flags))
