"""Decomposable loss functions.

Every registered loss is written as

    L(y, yhat) = L1(yhat) - L2(yhat) * y + L3(y)

which is the structure the bias machinery exploits: only the L2 part enters
covariance terms.  Losses whose L equals (a multiple of) the negative log
likelihood of a natural parameter also carry the convex conjugate ``G`` with
``G' = L2^{-1}``.

Registered losses and their prediction spaces:

    squared       mean (any real)       L1 = yhat^2, L2 = 2*yhat, L3 = y^2
    cross_entropy probability in (0,1)  L1 = -log(1-yhat), L2 = logit(yhat)
    zero_one      label in {0,1}        L1 = yhat, L2 = 2*yhat - 1
    hinge         score (any real)      L1 = relu(1+yhat), L2 = relu(1+yhat) - relu(1-yhat)
    poisson_nll   mean > 0              L1 = yhat, L2 = log(yhat)

Probability inputs are clamped to [1e-12, 1-1e-12] before taking logs, so
saturated fitted probabilities produce large finite losses instead of
infinities.  Values outside the closed prediction space raise.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from .families import ModelFamily

__all__ = ["LossSpec", "get_loss", "LOSS_NAMES", "loss_eval", "l2_component",
           "prediction_from_linear"]

PROB_CLAMP = 1e-12


def _relu(x):
    return np.maximum(x, 0.0)


def _clamp_prob(yhat):
    yhat = np.asarray(yhat, dtype=float)
    if np.any(yhat < 0.0) or np.any(yhat > 1.0):
        raise ValueError("probability predictions must lie in [0, 1]")
    return np.clip(yhat, PROB_CLAMP, 1.0 - PROB_CLAMP)


def _check_label(yhat):
    yhat = np.asarray(yhat, dtype=float)
    if not np.all((yhat == 0.0) | (yhat == 1.0)):
        raise ValueError("label predictions must lie in {0, 1}")
    return yhat


def _check_mean_pos(yhat):
    yhat = np.asarray(yhat, dtype=float)
    if np.any(yhat <= 0.0):
        raise ValueError("poisson_nll predictions must be positive means")
    return yhat


def _logit_clamped(yhat):
    p = _clamp_prob(yhat)
    return np.log(p) - np.log1p(-p)


@dataclass(frozen=True)
class LossSpec:
    """A loss with the three-part decomposition and optional conjugate."""

    name: str
    prediction_space: str  # probability | label | score | mean | linear_predictor
    L1: Callable
    L2: Callable
    L3: Callable
    G: Optional[Callable] = None
    _domain: Optional[Callable] = None

    def check_domain(self, yhat):
        if self._domain is not None:
            return self._domain(yhat)
        return np.asarray(yhat, dtype=float)


_REGISTRY = {
    "squared": LossSpec(
        name="squared",
        prediction_space="mean",
        L1=lambda yhat: np.asarray(yhat, dtype=float) ** 2,
        L2=lambda yhat: 2.0 * np.asarray(yhat, dtype=float),
        L3=lambda y: np.asarray(y, dtype=float) ** 2,
        G=lambda theta: np.asarray(theta, dtype=float) ** 2 / 4.0,
    ),
    "cross_entropy": LossSpec(
        name="cross_entropy",
        prediction_space="probability",
        L1=lambda yhat: -np.log1p(-_clamp_prob(yhat)),
        L2=lambda yhat: _logit_clamped(yhat),
        L3=lambda y: np.zeros_like(np.asarray(y, dtype=float)),
        G=lambda theta: np.logaddexp(0.0, np.asarray(theta, dtype=float)),
        _domain=_clamp_prob,
    ),
    "zero_one": LossSpec(
        name="zero_one",
        prediction_space="label",
        L1=lambda yhat: _check_label(yhat),
        L2=lambda yhat: 2.0 * _check_label(yhat) - 1.0,
        L3=lambda y: np.zeros_like(np.asarray(y, dtype=float)),
        _domain=_check_label,
    ),
    "hinge": LossSpec(
        name="hinge",
        prediction_space="score",
        L1=lambda yhat: _relu(1.0 + np.asarray(yhat, dtype=float)),
        L2=lambda yhat: (_relu(1.0 + np.asarray(yhat, dtype=float))
                         - _relu(1.0 - np.asarray(yhat, dtype=float))),
        L3=lambda y: np.zeros_like(np.asarray(y, dtype=float)),
    ),
    "poisson_nll": LossSpec(
        name="poisson_nll",
        prediction_space="mean",
        L1=lambda yhat: _check_mean_pos(yhat),
        L2=lambda yhat: np.log(_check_mean_pos(yhat)),
        L3=lambda y: np.zeros_like(np.asarray(y, dtype=float)),
        G=lambda theta: np.exp(np.asarray(theta, dtype=float)),
        _domain=_check_mean_pos,
    ),
}

LOSS_NAMES = tuple(_REGISTRY)


def get_loss(name: str) -> LossSpec:
    try:
        return _REGISTRY[name]
    except KeyError:
        raise ValueError(f"unknown loss {name!r}; choose from {LOSS_NAMES}") from None


def loss_eval(loss: LossSpec, y, yhat):
    """Evaluate L(y, yhat) = L1(yhat) - L2(yhat)*y + L3(y) elementwise."""
    y = np.asarray(y, dtype=float)
    return loss.L1(yhat) - loss.L2(yhat) * y + loss.L3(y)


def l2_component(loss: LossSpec, yhat):
    """The L2 part of the decomposition; for classification losses this is
    L(0, yhat) - L(1, yhat)."""
    return loss.L2(yhat)


def prediction_from_linear(loss: LossSpec, family: ModelFamily, eta):
    """Map a mixed linear predictor into the loss's prediction space.

    Labels are produced by thresholding the mean at 0.5 (a separate explicit
    step, so the decomposition stays exact on {0,1}); scores are the linear
    predictor itself.
    """
    eta = np.asarray(eta, dtype=float)
    space = loss.prediction_space
    if space in ("probability", "mean"):
        return family.mean(eta)
    if space == "label":
        return (family.mean(eta) > 0.5).astype(float)
    if space in ("score", "linear_predictor"):
        return eta
    raise ValueError(f"unknown prediction space {space!r}")
