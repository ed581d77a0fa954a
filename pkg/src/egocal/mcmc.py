"""Adaptive random-walk Metropolis sampling on a box.

Samples any unnormalized log density over the prior box.  The workhorse
proposal is a componentwise Gaussian step reflected at the box bounds
(which keeps it symmetric); with a small probability each step instead
proposes an independent uniform draw over the box, whose proposal density
cancels in the Metropolis-Hastings ratio.  The jump component lets the
chain trade mass between well-separated modes, which the pure random walk
cannot do once its scale has adapted to the local mode width.

Step scales adapt during burn-in toward a 20-40% acceptance rate of the
random-walk moves, with the componentwise profile taken from the running
sample spread.  Adaptation freezes at the end of burn-in, so the retained
samples come from a fixed kernel.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from .calibration import PriorSpec

ACCEPT_TARGET = 0.3
ADAPT_WINDOW = 100
MAX_SCALE_WIDTHS = 100.0
JUMP_PROB = 0.1


class McmcError(RuntimeError):
    pass


@dataclass
class Chain:
    """MCMC output: every state visited, including burn-in."""

    samples: np.ndarray          # (steps, m)
    log_densities: np.ndarray    # (steps,)
    acceptance_rate: float       # over post-burn-in moves
    burn_in: int
    seed: int
    proposal_scale: np.ndarray   # frozen per-dimension scales
    accepted: np.ndarray = field(repr=False, default=None)  # per-move accept flags
    scale_history: list = field(repr=False, default_factory=list)

    @property
    def post_burn(self) -> np.ndarray:
        return self.samples[self.burn_in:]

    def to_csv(self, path):
        m = self.samples.shape[1]
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow([f"theta{j + 1}" for j in range(m)] + ["log_density"])
            for row, ld in zip(self.samples, self.log_densities):
                writer.writerow([repr(float(v)) for v in row] + [repr(float(ld))])


def reflect_into_box(x: np.ndarray, lo: np.ndarray, hi: np.ndarray) -> np.ndarray:
    """Fold a point into [lo, hi] by repeated reflection at the walls."""
    width = hi - lo
    y = np.mod(x - lo, 2.0 * width)
    y = np.where(y > width, 2.0 * width - y, y)
    return lo + y


def sample(logpost, prior: PriorSpec, steps: int = 20000, burn_in: int = 5000,
           seed: int = 0, proposal_scale=None, start=None,
           jump_prob: float = JUMP_PROB) -> Chain:
    """Run one adaptive Metropolis chain.

    Parameters
    ----------
    logpost : callable theta -> float
        Unnormalized log density; may return -inf, must not return NaN.
    prior : PriorSpec
        Supplies the box (for reflection and jumps) and the starting draw.
    steps, burn_in : int
        Total chain length and the number of adaptation steps discarded by
        downstream summaries.  Requires steps > burn_in >= 0.
    proposal_scale : float or array, optional
        Initial per-dimension step standard deviations in raw units;
        defaults to a tenth of each box width.
    start : array, optional
        Starting state; defaults to a prior draw with finite density.
    jump_prob : float
        Per-step probability of an independent uniform-on-box proposal;
        set to 0 for a pure random walk.

    Identical seeds give identical chains bit for bit.
    """
    if not steps > burn_in >= 0:
        raise ValueError("need steps > burn_in >= 0")
    if not 0.0 <= jump_prob < 1.0:
        raise ValueError("jump_prob must lie in [0, 1)")
    lo, hi = prior.box[:, 0].copy(), prior.box[:, 1].copy()
    width = hi - lo
    m = prior.m
    rng = np.random.default_rng(seed)

    if start is not None:
        theta = np.atleast_1d(np.asarray(start, dtype=float)).copy()
        lp = _checked(logpost, theta)
        if lp == -np.inf:
            raise McmcError("start point has zero density")
    else:
        for _ in range(100):
            theta = prior.sample(rng, 1)[0]
            lp = _checked(logpost, theta)
            if lp > -np.inf:
                break
        else:
            raise McmcError("no prior draw with finite log density in 100 attempts")

    if proposal_scale is None:
        scale = 0.1 * width
    else:
        scale = np.broadcast_to(np.asarray(proposal_scale, dtype=float), (m,)).copy()
    base = np.exp(np.mean(np.log(scale)))
    profile = scale / base
    global_factor = 1.0

    normals = rng.standard_normal((steps - 1, m))
    unifs = rng.random(steps - 1)
    jump_coins = rng.random(steps - 1) < jump_prob
    jump_draws = lo + width * rng.random((steps - 1, m))

    samples = np.empty((steps, m))
    logds = np.empty(steps)
    accepted = np.zeros(steps - 1, dtype=bool)
    samples[0] = theta
    logds[0] = lp
    scale_history = [(0, scale.copy())]

    rw_accepts = 0
    rw_proposals = 0
    for t in range(1, steps):
        if jump_coins[t - 1]:
            prop = jump_draws[t - 1]
            is_rw = False
        else:
            prop = reflect_into_box(theta + scale * normals[t - 1], lo, hi)
            is_rw = True
            rw_proposals += 1
        lp_prop = _checked(logpost, prop)
        if lp_prop > -np.inf and (lp_prop - lp >= 0.0
                                  or unifs[t - 1] < np.exp(lp_prop - lp)):
            theta, lp = prop, lp_prop
            accepted[t - 1] = True
            rw_accepts += is_rw
        samples[t] = theta
        logds[t] = lp

        if t < burn_in and t % ADAPT_WINDOW == 0:
            if rw_proposals > 0:
                rate = rw_accepts / rw_proposals
                global_factor *= float(np.exp(0.7 * (rate - ACCEPT_TARGET)))
            rw_accepts = 0
            rw_proposals = 0
            if t >= 5 * ADAPT_WINDOW:
                recent = samples[max(0, t - 2000): t + 1]
                spread = np.std(recent, axis=0)
                spread = np.maximum(spread, 1e-6 * width)
                profile = spread / np.exp(np.mean(np.log(spread)))
            scale = base * global_factor * profile
            scale = np.minimum(np.maximum(scale, 1e-12 * width),
                               MAX_SCALE_WIDTHS * width)
            scale_history.append((t, scale.copy()))

    post_moves = accepted[burn_in:] if burn_in < steps - 1 else accepted
    rate = float(np.mean(post_moves)) if post_moves.size else float(np.mean(accepted))
    return Chain(samples=samples, log_densities=logds, acceptance_rate=rate,
                 burn_in=burn_in, seed=seed, proposal_scale=scale,
                 accepted=accepted, scale_history=scale_history)


def _checked(logpost, theta) -> float:
    lp = float(logpost(theta))
    if np.isnan(lp):
        raise McmcError(f"log density returned NaN at theta={theta!r}")
    return lp


def credible_interval(chain: Chain, level: float):
    """Equal-tailed marginal interval of the post-burn-in samples, per dimension."""
    if not 0.0 < level < 1.0:
        raise ValueError("level must lie in (0, 1)")
    post = chain.post_burn
    if post.shape[0] == 0:
        raise ValueError("chain has no post-burn-in samples")
    a = 0.5 * (1.0 - level)
    lo = np.quantile(post, a, axis=0)
    hi = np.quantile(post, 1.0 - a, axis=0)
    return lo, hi


def batch_means_se(values: np.ndarray, n_batches: int = 30) -> float:
    """Monte Carlo standard error of a chain average by the batch-means method."""
    values = np.asarray(values, dtype=float)
    n = values.shape[0]
    if n < 2 * n_batches:
        n_batches = max(2, n // 2)
    size = n // n_batches
    trimmed = values[: size * n_batches].reshape(n_batches, size)
    means = trimmed.mean(axis=1)
    return float(np.std(means, ddof=1) / np.sqrt(n_batches))
