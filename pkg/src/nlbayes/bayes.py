"""Closed-form Gaussian patch inference.

Prior estimation from neighbor patches, heteroscedastic likelihood
construction, the Wiener-type posterior-mode estimate, and the negative
log likelihood value.  All solves go through Cholesky factors; no explicit
matrix inverse is ever formed.  Everything here is float64.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.linalg import solve_triangular

from .errors import FactorizationError
from .search import NeighborSet

JITTER_INITIAL = 1e-6
JITTER_MAX = 1e-2


@dataclass
class GaussianPrior:
    """Gaussian patch prior held through a lower-triangular covariance factor."""

    mean: np.ndarray  # (d,)
    cov_factor: np.ndarray  # (d, d) lower-triangular, positive diagonal

    @property
    def cov(self) -> np.ndarray:
        return self.cov_factor @ self.cov_factor.T


@dataclass
class Likelihood:
    mean: np.ndarray  # (d,)
    cov: np.ndarray  # (d, d) symmetric


@dataclass
class NoiseParams:
    """Signal-independent std ``sigma`` and per-patch signal-dependent gain ``beta``."""

    sigma: float
    beta: float

    def __post_init__(self):
        if not (np.isfinite(self.sigma) and np.isfinite(self.beta)):
            raise ValueError("noise parameters must be finite")
        if self.sigma < 0 or self.beta < 0:
            raise ValueError("noise parameters must be non-negative")


def jittered_cholesky(matrix: np.ndarray, always_jitter: bool = False):
    """Lower Cholesky factor with escalating diagonal jitter on failure.

    With ``always_jitter`` the first attempt already adds JITTER_INITIAL
    (used for rank-deficient sample covariances).  Otherwise the matrix is
    factorized as given and jitter only enters on failure, escalating by
    x10 up to JITTER_MAX.  Returns (factor, jitter_used).
    """
    matrix = np.asarray(matrix, dtype=np.float64)
    d = matrix.shape[0]
    eye = np.eye(d)
    epsilons = [JITTER_INITIAL] if always_jitter else [0.0, JITTER_INITIAL]
    while epsilons[-1] < JITTER_MAX:
        epsilons.append(epsilons[-1] * 10.0)
    for eps in epsilons:
        try:
            return np.linalg.cholesky(matrix + eps * eye if eps else matrix), eps
        except np.linalg.LinAlgError:
            continue
    raise FactorizationError(
        f"Cholesky failed for {d}x{d} matrix even with jitter {JITTER_MAX}"
    )


def _cho_solve(factor: np.ndarray, rhs: np.ndarray) -> np.ndarray:
    half = solve_triangular(factor, rhs, lower=True)
    return solve_triangular(factor.T, half, lower=False)


def mle_prior(neighbors: NeighborSet) -> GaussianPrior:
    """Sample mean and unbiased sample covariance of the neighbor patches.

    The covariance is jittered and factorized immediately, so the prior
    covariance actually carried forward is ``S + eps*I``.
    """
    patches = np.asarray(neighbors.neighbor_patches, dtype=np.float64)
    k = patches.shape[0]
    if k < 2:
        raise ValueError("at least 2 neighbors are required for a covariance")
    mean = patches.mean(axis=0)
    dev = patches - mean
    cov = dev.T @ dev / (k - 1)
    factor, _ = jittered_cholesky(cov, always_jitter=True)
    return GaussianPrior(mean, factor)


def likelihood_from_prior(prior: GaussianPrior, noise: NoiseParams) -> Likelihood:
    """Observation likelihood under the heteroscedastic noise model.

    The mean is the prior mean; the covariance adds, per coordinate,
    ``beta^2 * max(mean, 0) + sigma^2`` to the prior covariance diagonal.
    Negative predicted means contribute no signal-dependent variance.
    """
    var = noise.beta ** 2 * np.maximum(prior.mean, 0.0) + noise.sigma ** 2
    return Likelihood(prior.mean.copy(), prior.cov + np.diag(var))


def map_estimate(prior: GaussianPrior, lik: Likelihood, y: np.ndarray):
    """Posterior-mode patch estimate.

    Solves ``C_y z = y - m`` through the Cholesky factor and evaluates the
    update in residual form ``y - (C_y - C_x) z``, which is algebraically
    ``m + C_x z`` but keeps the zero-noise case exact to the last bit.

    Returns ``(estimate, fell_back)``; when factorization fails even after
    jitter escalation the prior mean is returned with ``fell_back=True``.
    """
    y = np.asarray(y, dtype=np.float64)
    residual = y - prior.mean
    try:
        factor, _ = jittered_cholesky(lik.cov)
    except FactorizationError:
        return prior.mean.copy(), True
    z = _cho_solve(factor, residual)
    gap = lik.cov - prior.cov
    return y - gap @ z, False


def nll_loss(y: np.ndarray, lik: Likelihood) -> float:
    """Negative log likelihood of ``y``, constant term omitted.

    Quadratic term through a Cholesky solve, log-determinant from the
    factor diagonal.
    """
    y = np.asarray(y, dtype=np.float64)
    residual = y - lik.mean
    factor, _ = jittered_cholesky(lik.cov)
    z = _cho_solve(factor, residual)
    # 0.5 * logdet == sum of log diagonal entries of the factor
    return float(0.5 * residual @ z + np.log(np.diag(factor)).sum())


def softplus(x):
    return np.logaddexp(0.0, x)


def cholesky_assemble(raw: np.ndarray) -> np.ndarray:
    """Build a lower-triangular factor from a flat row-wise coefficient vector.

    Diagonal entries pass through softplus so they are strictly positive;
    off-diagonal entries are copied verbatim.  The input length must be a
    triangular number d*(d+1)/2.
    """
    raw = np.asarray(raw, dtype=np.float64).ravel()
    n = raw.size
    d = (math.isqrt(8 * n + 1) - 1) // 2
    if d * (d + 1) // 2 != n:
        raise ValueError(f"length {n} is not a triangular number")
    factor = np.zeros((d, d))
    tr, tc = np.tril_indices(d)
    factor[tr, tc] = raw
    diag = np.arange(d)
    factor[diag, diag] = softplus(factor[diag, diag])
    return factor
