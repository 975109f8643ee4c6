"""Gauss-Hermite quadrature and the single-factor Bernoulli marginal likelihood.

The marginal negative log likelihood of one group with a scalar Gaussian
random intercept is a one-dimensional integral against exp(-u^2); degree-K
Gauss-Hermite quadrature turns it into a weighted log-sum-exp over the
Hermite zeros.  This doubles as a slow-but-exact fitter for single-factor
logistic mixed models, useful as an independent cross-check of the main
fitting path.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.linalg import eigh_tridiagonal
from scipy.optimize import minimize
from scipy.special import logsumexp

__all__ = ["GhQuadrature", "hermite_gauss", "nll_gauss_hermite",
           "single_factor_bernoulli_nll", "fit_single_factor_bernoulli"]


@dataclass(frozen=True)
class GhQuadrature:
    """Hermite nodes and weights for integrals against exp(-u^2)."""

    degree: int
    nodes: np.ndarray
    weights: np.ndarray


def hermite_gauss(degree: int = 20) -> GhQuadrature:
    """Golub-Welsch: eigen-decompose the Jacobi matrix of the Hermite family.

    Nodes are the eigenvalues; weights are sqrt(pi) times the squared first
    components of the normalized eigenvectors.
    """
    if degree < 1:
        raise ValueError("degree must be >= 1")
    if degree == 1:
        return GhQuadrature(1, np.zeros(1), np.array([np.sqrt(np.pi)]))
    off = np.sqrt(np.arange(1, degree) / 2.0)
    nodes, vecs = eigh_tridiagonal(np.zeros(degree), off)
    weights = np.sqrt(np.pi) * vecs[0] ** 2
    return GhQuadrature(degree, nodes, weights)


def nll_gauss_hermite(fixed_part, y, sigma_s: float, quad: GhQuadrature) -> float:
    """Marginal Bernoulli NLL of one group under a scalar random intercept.

    For group members l with fixed parts f_l and binary responses y_l, the
    integrand at node nu_k uses zeta_l = f_l + sqrt(2) * sigma_s * nu_k and
    the Bernoulli log likelihood sum_l [y_l * zeta_l - log(1 + exp(zeta_l))].
    Returns 0 for an empty group.
    """
    fixed_part = np.asarray(fixed_part, dtype=float)
    y = np.asarray(y, dtype=float)
    if fixed_part.shape != y.shape:
        raise ValueError("fixed_part and y must have equal length")
    if fixed_part.size == 0:
        return 0.0
    zeta = fixed_part[None, :] + np.sqrt(2.0) * sigma_s * quad.nodes[:, None]
    loglik = np.sum(y[None, :] * zeta - np.logaddexp(0.0, zeta), axis=1)
    return float(-logsumexp(loglik + np.log(quad.weights) - 0.5 * np.log(np.pi)))


def single_factor_bernoulli_nll(X, y, groups, beta, sigma_s: float,
                                quad: GhQuadrature) -> float:
    """Total marginal NLL over all groups at (beta, sigma_s)."""
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float)
    groups = np.asarray(groups)
    fixed = X @ np.asarray(beta, dtype=float)
    total = 0.0
    for g in np.unique(groups):
        rows = groups == g
        total += nll_gauss_hermite(fixed[rows], y[rows], sigma_s, quad)
    return total


def fit_single_factor_bernoulli(X, y, groups, degree: int = 20,
                                beta0=None) -> tuple[np.ndarray, float]:
    """Maximize the quadrature marginal likelihood over (beta, sigma_s).

    Returns (beta_hat, sigma_s_hat).  Intended for small single-factor
    problems; the parameterization uses log sigma_s to keep the scale
    positive.
    """
    X = np.asarray(X, dtype=float)
    quad = hermite_gauss(degree)
    p = X.shape[1]
    x0 = np.zeros(p + 1) if beta0 is None else np.append(np.asarray(beta0, float), 0.0)

    def objective(theta):
        return single_factor_bernoulli_nll(X, y, groups, theta[:p],
                                           np.exp(theta[p]), quad)

    res = minimize(objective, x0, method="Nelder-Mead",
                   options={"maxiter": 4000, "xatol": 1e-7, "fatol": 1e-10})
    return res.x[:p], float(np.exp(res.x[p]))
