"""Random-effect covariance construction.

Builds the two covariance objects the bias estimators sample from:

* the clustered covariance ``Z Gamma Z^T`` implied by crossed random
  intercepts, with the variant for partially shared effects where only the
  day factor contributes;
* the region-adjusted spatial covariance: within-region kernel values minus
  the mean cross-region covariance, zero across regions, projected to the
  PSD cone by eigenvalue clipping.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .data import ClusterIndex, KernelParams, SpatialIndex

__all__ = ["AdjustedCovariance", "build_k_tilde", "clustered_effect_cov",
           "kernel_matrix", "psd_clip", "sample_mvn_psd"]


def psd_clip(A: np.ndarray, tol: float = 0.0) -> np.ndarray:
    """Project a symmetric matrix onto the PSD cone (clip eigenvalues at tol)."""
    A = 0.5 * (A + A.T)
    w, U = np.linalg.eigh(A)
    if w.min() >= tol:
        return A
    w = np.maximum(w, tol)
    return (U * w) @ U.T


def sample_mvn_psd(cov: np.ndarray, size: int, rng: np.random.Generator) -> np.ndarray:
    """Draw ``size`` vectors from MN(0, cov) for a PSD (possibly singular) cov.

    Uses the eigen square root, so degenerate directions get exactly zero
    variance instead of raising.
    """
    w, U = np.linalg.eigh(0.5 * (cov + cov.T))
    root = U * np.sqrt(np.maximum(w, 0.0))
    z = rng.standard_normal((size, cov.shape[0]))
    return z @ root.T


def kernel_matrix(kp: KernelParams, spatial: SpatialIndex) -> np.ndarray:
    """The full kernel covariance over the training coordinates."""
    return kp(spatial.coords, spatial.coords)


def clustered_effect_cov(clusters: ClusterIndex, sigma_u_sq: float,
                         sigma_s_sq: float, scenario: str = "new_all") -> np.ndarray:
    """Between-observation covariance induced by the random intercepts.

    ``new_all``: test points share nothing with training, so the full
    covariance sigma_u^2 * same-entity + sigma_s^2 * same-day applies.
    ``shared_entities``: the entity effect is replicated at test time and its
    covariance contribution cancels, leaving only the day term.
    """
    same_entity = (clusters.entity[:, None] == clusters.entity[None, :])
    same_day = (clusters.day[:, None] == clusters.day[None, :])
    if scenario == "new_all":
        return sigma_u_sq * same_entity + sigma_s_sq * same_day
    if scenario == "shared_entities":
        return sigma_s_sq * same_day.astype(float)
    raise ValueError(f"unknown scenario {scenario!r}")


@dataclass(frozen=True)
class AdjustedCovariance:
    """Region-adjusted covariance for the spatial bootstrap."""

    K_tilde: np.ndarray
    K_bar: float


def build_k_tilde(spatial: SpatialIndex, kp: KernelParams) -> AdjustedCovariance:
    """Within-region kernel minus the mean cross-region covariance, PSD-clipped.

    The adjustment removes the covariance a test point in a different region
    would share with the training field; what remains is the excess
    covariance responsible for the CV bias.
    """
    if len(np.unique(spatial.region)) < 2:
        raise ValueError("build_k_tilde requires at least 2 regions")
    K = kernel_matrix(kp, spatial)
    cross = spatial.region[:, None] != spatial.region[None, :]
    K_bar = float(K[cross].mean())

    K_tilde = np.zeros_like(K)
    # block-diagonal by region, so the PSD projection can run block-wise
    for r in np.unique(spatial.region):
        rows = np.flatnonzero(spatial.region == r)
        block = K[np.ix_(rows, rows)] - K_bar
        K_tilde[np.ix_(rows, rows)] = psd_clip(block)
    return AdjustedCovariance(K_tilde=K_tilde, K_bar=K_bar)
