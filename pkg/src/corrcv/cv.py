"""Fold planning, the K-fold CV estimator, and the simulation GenErr oracle.

Learners are anything with ``fit(Dataset) -> fitted`` plus
``predict_mean(X, entities=None)`` and ``predict_linear(X, entities=None)``;
the built-in estimators qualify, and so does any wrapper around an external
model.  Each fold gets a fresh learner, so no state leaks between folds.

Loss aggregation uses compensated summation, which makes ``cv_value``
exactly invariant under joint permutations of the rows and the fold
assignment.
"""

from __future__ import annotations

import copy
import math
from dataclasses import dataclass

import numpy as np
import pandas as pd

from .data import Dataset
from .exceptions import ConvergenceError
from .losses import LossSpec, loss_eval
from .rng import substream

__all__ = ["FoldPlan", "make_folds", "CvReport", "cross_validate",
           "generalization_error_mc", "fresh_learner"]

MODES = ("new_entity", "known_entity")


@dataclass(frozen=True)
class FoldPlan:
    """Assignment of each observation to one of K folds (labels 1..K)."""

    K: int
    fold_of: np.ndarray
    seed: int

    def __post_init__(self):
        object.__setattr__(self, "fold_of", np.asarray(self.fold_of, dtype=np.int64))
        if self.fold_of.min() < 1 or self.fold_of.max() > self.K:
            raise ValueError("fold labels must lie in 1..K")

    @property
    def n(self) -> int:
        return self.fold_of.shape[0]

    def fold_rows(self, k: int) -> np.ndarray:
        return np.flatnonzero(self.fold_of == k)

    def train_rows(self, k: int) -> np.ndarray:
        return np.flatnonzero(self.fold_of != k)


def make_folds(n: int, K: int, seed: int) -> FoldPlan:
    """Uniformly random fold assignment, a pure function of (n, K, seed).

    Sizes are n//K or n//K + 1 (the first n % K folds get the extra row).
    """
    n, K = int(n), int(K)
    if not 2 <= K <= n:
        raise ValueError(f"need 2 <= K <= n, got K={K}, n={n}")
    perm = substream(seed).permutation(n)
    fold_of = np.empty(n, dtype=np.int64)
    sizes = np.full(K, n // K)
    sizes[: n % K] += 1
    start = 0
    for k, size in enumerate(sizes, start=1):
        fold_of[perm[start:start + size]] = k
        start += size
    return FoldPlan(K=K, fold_of=fold_of, seed=int(seed))


@dataclass(frozen=True)
class CvReport:
    """Per-observation CV predictions and the aggregated CV value."""

    cv_predictions: np.ndarray
    cv_value: float
    per_fold_losses: np.ndarray
    loss_name: str
    obs_losses: np.ndarray
    fold_of: np.ndarray

    def to_json_dict(self) -> dict:
        return {
            "loss": self.loss_name,
            "cv_value": self.cv_value,
            "per_fold_losses": self.per_fold_losses,
            "n": int(self.cv_predictions.shape[0]),
        }

    def to_frame(self, y) -> pd.DataFrame:
        return pd.DataFrame({
            "i": np.arange(1, len(self.cv_predictions) + 1),
            "fold": self.fold_of,
            "y": np.asarray(y, dtype=float),
            "yhat_cv": self.cv_predictions,
            "loss": self.obs_losses,
        })


def fresh_learner(learner):
    """An unfitted copy of the learner (sklearn clone when available)."""
    if hasattr(learner, "get_params"):
        from sklearn.base import clone
        return clone(learner)
    return copy.deepcopy(learner)


def predict_in_space(model, X, entities, space: str) -> np.ndarray:
    """Evaluate a fitted learner in the requested prediction space."""
    if space in ("probability", "mean"):
        return np.asarray(model.predict_mean(X, entities=entities), dtype=float)
    if space == "label":
        mean = np.asarray(model.predict_mean(X, entities=entities), dtype=float)
        return (mean > 0.5).astype(float)
    if space in ("score", "linear_predictor"):
        return np.asarray(model.predict_linear(X, entities=entities), dtype=float)
    raise ValueError(f"unknown prediction space {space!r}")


def _fit_fold_models(learner, data: Dataset, plan: FoldPlan) -> list:
    models = []
    for k in range(1, plan.K + 1):
        sub = data.subset(plan.train_rows(k))
        try:
            models.append(fresh_learner(learner).fit(sub))
        except ConvergenceError as exc:
            raise ConvergenceError(f"fold {k}: {exc}", trace=exc.trace) from exc
    return models


def cross_validate(learner, data: Dataset, plan: FoldPlan, loss: LossSpec,
                   mode: str = "new_entity", return_models: bool = False):
    """K-fold CV: fit on each fold complement, score the held-out rows.

    ``mode`` selects the prediction rule inside folds: ``known_entity`` adds
    the predicted entity effect (for scenarios where test points share
    entities with the training data), ``new_entity`` uses the fixed part
    only.
    """
    if mode not in MODES:
        raise ValueError(f"mode must be one of {MODES}")
    if plan.n != data.n:
        raise ValueError("fold plan length does not match dataset")
    models = _fit_fold_models(learner, data, plan)

    predictions = np.empty(data.n)
    obs_losses = np.empty(data.n)
    per_fold = np.empty(plan.K)
    for k in range(1, plan.K + 1):
        rows = plan.fold_rows(k)
        entities = (data.clusters.entity[rows]
                    if mode == "known_entity" and data.clusters is not None else None)
        yhat = predict_in_space(models[k - 1], data.X[rows], entities,
                                loss.prediction_space)
        predictions[rows] = yhat
        obs_losses[rows] = loss_eval(loss, data.y[rows], yhat)
        per_fold[k - 1] = math.fsum(obs_losses[rows]) / len(rows)
    cv_value = math.fsum(obs_losses) / data.n
    report = CvReport(cv_predictions=predictions, cv_value=cv_value,
                      per_fold_losses=per_fold, loss_name=loss.name,
                      obs_losses=obs_losses, fold_of=plan.fold_of.copy())
    if return_models:
        return report, models
    return report


def generalization_error_mc(truth, data: Dataset, learner, plan: FoldPlan,
                            loss: LossSpec, scenario: str, reps: int,
                            rng: np.random.Generator, models=None) -> float:
    """Monte-Carlo generalization error when the generative truth is known.

    Per repetition and fold, fresh test responses are drawn on the fold's
    own covariates (new random-effect realizations per ``scenario``:
    entirely new, or entity effects shared with training), then scored
    against the fold-trained model.  ``truth`` must expose
    ``draw_test_responses(rows, scenario, rng)``.
    """
    if models is None:
        models = _fit_fold_models(learner, data, plan)
    mode = "known_entity" if scenario == "shared_entities" else "new_entity"
    fold_pred = []
    for k in range(1, plan.K + 1):
        rows = plan.fold_rows(k)
        entities = (data.clusters.entity[rows]
                    if mode == "known_entity" and data.clusters is not None else None)
        fold_pred.append(predict_in_space(models[k - 1], data.X[rows], entities,
                                          loss.prediction_space))
    totals = []
    for _ in range(int(reps)):
        for k in range(1, plan.K + 1):
            rows = plan.fold_rows(k)
            y_te = truth.draw_test_responses(rows, scenario, rng)
            totals.append(math.fsum(loss_eval(loss, y_te, fold_pred[k - 1])))
    return math.fsum(totals) / (int(reps) * data.n)
