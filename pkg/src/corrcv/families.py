"""Response families and link functions for mixed-effects models.

A ``ModelFamily`` bundles a response distribution (Bernoulli, Poisson or
Gaussian), a strictly increasing link ``g`` mapping the mixed linear
predictor to the conditional mean, and a dispersion parameter.  Sampling and
conditional-variance evaluation live here so every consumer (fitters, the
parametric bootstrap, the simulation generators) shares one definition.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit, ndtr

__all__ = [
    "Link",
    "ModelFamily",
    "LINKS",
    "bernoulli_logit",
    "poisson_log",
    "gaussian_identity",
    "family_sample",
]


@dataclass(frozen=True)
class Link:
    """A strictly increasing mean function and its derivative."""

    name: str

    def g(self, eta):
        eta = np.asarray(eta, dtype=float)
        if self.name == "sigmoid":
            return expit(eta)
        if self.name == "log":
            return np.exp(eta)
        if self.name == "identity":
            return eta
        if self.name == "probit":
            return ndtr(eta)
        raise ValueError(f"unknown link {self.name!r}")

    def gprime(self, eta):
        eta = np.asarray(eta, dtype=float)
        if self.name == "sigmoid":
            p = expit(eta)
            return p * (1.0 - p)
        if self.name == "log":
            return np.exp(eta)
        if self.name == "identity":
            return np.ones_like(eta)
        if self.name == "probit":
            return np.exp(-0.5 * eta**2) / np.sqrt(2.0 * np.pi)
        raise ValueError(f"unknown link {self.name!r}")


LINKS = {name: Link(name) for name in ("sigmoid", "log", "identity", "probit")}

_CANONICAL = {("bernoulli", "sigmoid"), ("poisson", "log"), ("gaussian", "identity")}


@dataclass(frozen=True)
class ModelFamily:
    """Exponential-family response with link and dispersion.

    ``dispersion_phi`` is fixed at 1 for Bernoulli and Poisson; for Gaussian
    it is the noise variance.
    """

    distribution: str
    link: Link = field(default=None)  # type: ignore[assignment]
    dispersion_phi: float = 1.0

    def __post_init__(self):
        if self.distribution not in ("bernoulli", "poisson", "gaussian"):
            raise ValueError(f"unknown distribution {self.distribution!r}")
        if self.link is None:
            default = {"bernoulli": "sigmoid", "poisson": "log", "gaussian": "identity"}
            object.__setattr__(self, "link", LINKS[default[self.distribution]])
        elif isinstance(self.link, str):
            object.__setattr__(self, "link", LINKS[self.link])
        if self.distribution in ("bernoulli", "poisson") and self.dispersion_phi != 1.0:
            raise ValueError(f"{self.distribution} requires dispersion_phi == 1")
        if not self.dispersion_phi > 0:
            raise ValueError("dispersion_phi must be > 0")

    @property
    def is_canonical(self) -> bool:
        return (self.distribution, self.link.name) in _CANONICAL

    def mean(self, eta):
        return self.link.g(eta)

    def conditional_variance(self, mean):
        """Var(y | mean), as a function of the conditional mean."""
        mean = np.asarray(mean, dtype=float)
        if self.distribution == "bernoulli":
            return mean * (1.0 - mean)
        if self.distribution == "poisson":
            return mean
        return np.full_like(mean, self.dispersion_phi)


def bernoulli_logit() -> ModelFamily:
    return ModelFamily("bernoulli")


def poisson_log() -> ModelFamily:
    return ModelFamily("poisson")


def gaussian_identity(phi: float = 1.0) -> ModelFamily:
    return ModelFamily("gaussian", LINKS["identity"], phi)


def family_sample(family: ModelFamily, eta, rng: np.random.Generator) -> np.ndarray:
    """Draw one response per observation given mixed linear predictors ``eta``.

    Deterministic given the generator state.
    """
    eta = np.asarray(eta, dtype=float)
    mean = family.mean(eta)
    if family.distribution == "bernoulli":
        return (rng.random(mean.shape) < mean).astype(float)
    if family.distribution == "poisson":
        return rng.poisson(mean).astype(float)
    return mean + np.sqrt(family.dispersion_phi) * rng.standard_normal(mean.shape)
