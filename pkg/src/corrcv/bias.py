"""Estimators of the cross-validation bias for correlated data.

The bias of K-fold CV against the generalization error equals the mean extra
covariance between the L2 part of the loss at the CV prediction and the
response.  All estimators here target that quantity with a parametric
bootstrap built from a fitted mixed model:

* ``empirical_wcv_clustered`` / ``empirical_wcv_spatial`` -- refit the
  learner inside the bootstrap loop (single loop when the test correlation
  vanishes, nested when entity effects are shared with the test points);
* ``fast_wcv`` -- replace each refit with a one-step quasi-likelihood update
  around the full-data fit (exact for Gaussian-identity models), optionally
  with a one-step random-effect update for the shared-entity scenario;
* ``canonical_c_tilde`` -- for canonical links and likelihood losses the
  response draw can be integrated out, leaving a covariance of conditional
  means driven only by random-effect draws (lower Monte-Carlo variance);
* ``lmm_analytic_wcv`` -- the closed form 2/n * sum_i h_i' ktilde_i for
  Gaussian-identity models with squared loss.

Both bootstrap flavours consume identical response draws for a given
``BootstrapConfig.seed``, so fast and empirical estimates are comparable
path by path.  Replicates own counter-based RNG substreams, which makes
every estimate reproducible under any parallel schedule.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy.linalg import cho_factor, cho_solve

from .covariance import AdjustedCovariance, build_k_tilde, psd_clip
from .data import BootstrapConfig, Dataset
from .estimators import FittedGLMM, model_covariance
from .exceptions import RankDeficiencyError, UnsupportedConfigError
from .families import family_sample
from .losses import LossSpec, prediction_from_linear
from .moments import MarginalMoments
from .cv import FoldPlan, fresh_learner
from .rng import STREAM_BOOT, substream

__all__ = ["BiasEstimate", "AnalyticCovTerms", "taylor_beta", "taylor_eta",
           "empirical_wcv_clustered", "empirical_wcv_spatial", "fast_wcv",
           "canonical_c_tilde", "lmm_analytic_wcv", "last_layer_wcv",
           "analytic_cov_terms"]

STRUCTURES = ("clustered_new", "clustered_shared", "spatial")


@dataclass(frozen=True)
class BiasEstimate:
    """A bias estimate with per-observation contributions and MC error."""

    w_cv_hat: float
    per_obs_C: np.ndarray
    mc_se: float
    w_cv_tilde: Optional[float] = None
    per_obs_mc_se: Optional[np.ndarray] = None
    method: str = ""
    degenerate: bool = False

    def to_json_dict(self) -> dict:
        out = {
            "w_cv_hat": self.w_cv_hat,
            "mc_se": self.mc_se,
            "method": self.method,
            "degenerate": self.degenerate,
        }
        if self.w_cv_tilde is not None:
            out["w_cv_tilde"] = self.w_cv_tilde
        return out


@dataclass(frozen=True)
class AnalyticCovTerms:
    """Prediction weights h_i and covariance differences ktilde_i for one point."""

    h: np.ndarray
    k_tilde_vec: np.ndarray


# --------------------------------------------------------------------------
# One-step (Taylor) refits
# --------------------------------------------------------------------------


class _FoldTaylorOps:
    """Per-fold pieces of the one-step update beta + A_k (Y_in - mu_in)."""

    def __init__(self, X, mm: MarginalMoments, in_rows: np.ndarray):
        self.in_rows = in_rows
        V_in = mm.V[np.ix_(in_rows, in_rows)]
        try:
            Vf = cho_factor(V_in, lower=True)
        except np.linalg.LinAlgError as exc:
            raise np.linalg.LinAlgError(
                f"marginal covariance singular on fold complement: {exc}")
        M0 = mm.d[in_rows, None] * X[in_rows]
        ViM0 = cho_solve(Vf, M0)
        G = M0.T @ ViM0
        try:
            Gf = cho_factor(G, lower=True)
        except np.linalg.LinAlgError:
            raise RankDeficiencyError(
                "curvature matrix X'DV^-1DX singular on fold complement")
        self.A = cho_solve(Gf, ViM0.T)  # p x n_in
        self.mu_in = mm.mu[in_rows]


def _fold_ops(X, mm: MarginalMoments, plan: FoldPlan) -> list[_FoldTaylorOps]:
    return [_FoldTaylorOps(X, mm, plan.train_rows(k)) for k in range(1, plan.K + 1)]


def taylor_beta(fold_mask, Y_b, beta_hat, mm: MarginalMoments, X=None) -> np.ndarray:
    """One-step refit of the coefficients with one fold deleted.

    ``fold_mask`` flags the held-out rows; their responses never enter the
    update.  Exact for Gaussian-identity models, where the quasi-likelihood
    objective is quadratic.
    """
    fold_mask = np.asarray(fold_mask, dtype=bool)
    if X is None:
        raise ValueError("taylor_beta requires the covariate matrix X")
    in_rows = np.flatnonzero(~fold_mask)
    ops = _FoldTaylorOps(np.asarray(X, dtype=float), mm, in_rows)
    r = np.asarray(Y_b, dtype=float)[in_rows] - ops.mu_in
    return np.asarray(beta_hat, dtype=float) + ops.A @ r


def taylor_eta(eta_b, fold_mask, Y_b, beta_tilde, fit: FittedGLMM,
               data: Dataset) -> tuple[np.ndarray, bool]:
    """One-step update of the random-effect vector around the generating draw.

    Solves the penalized quasi-likelihood equations for eta by one Newton
    step from ``eta_b``, with the fold rows deleted and the coefficients set
    to ``beta_tilde``.  Blocks whose fitted variance is zero are clamped to
    zero; if every block is degenerate the update is all zeros and the flag
    is set.
    """
    clusters = data.clusters
    if clusters is None:
        raise UnsupportedConfigError("taylor_eta requires a clustered dataset")
    q1, q2 = clusters.q1, clusters.q2
    eta_b = np.asarray(eta_b, dtype=float)
    fold_mask = np.asarray(fold_mask, dtype=bool)
    su2, ss2 = fit.sigma_u_sq, fit.sigma_s_sq
    if su2 <= 0 and ss2 <= 0:
        return np.zeros(q1 + q2), True

    active = np.zeros(q1 + q2, dtype=bool)
    if su2 > 0:
        active[:q1] = True
    if ss2 > 0:
        active[q1:] = True
    pen = np.concatenate([
        np.full(q1, 1.0 / su2) if su2 > 0 else np.zeros(0),
        np.full(q2, 1.0 / ss2) if ss2 > 0 else np.zeros(0),
    ])

    in_rows = np.flatnonzero(~fold_mask)
    Q = clusters.one_hot()[np.ix_(in_rows, np.flatnonzero(active))]
    lp = data.X[in_rows] @ np.asarray(beta_tilde, dtype=float) + Q @ eta_b[active]
    family = fit.family
    m = family.link.g(lp)
    d = np.maximum(family.link.gprime(lp), 1e-12)
    vc = np.maximum(family.conditional_variance(m), 1e-12)
    resid = np.asarray(Y_b, dtype=float)[in_rows] - m
    score = Q.T @ (d / vc * resid) - pen * eta_b[active]
    H = (Q * (d * d / vc)[:, None]).T @ Q + np.diag(pen)
    eta = np.zeros(q1 + q2)
    eta[active] = eta_b[active] + np.linalg.solve(H, score)
    return eta, False


# --------------------------------------------------------------------------
# Shared bootstrap draws (identical for fast and empirical paths)
# --------------------------------------------------------------------------


@dataclass
class _SingleLoopDraws:
    delta: np.ndarray  # (B, n)
    Y: np.ndarray      # (B, n)


@dataclass
class _NestedDraws:
    u: np.ndarray  # (B1, q1)
    s: np.ndarray  # (B1, B2, q2)
    Y: np.ndarray  # (B1, B2, n)


def _draw_single_clustered(fit, data, cfg) -> _SingleLoopDraws:
    cl = data.clusters
    su = np.sqrt(max(fit.sigma_u_sq, 0.0))
    ss = np.sqrt(max(fit.sigma_s_sq, 0.0))
    eta0 = data.X @ fit.beta_hat
    delta = np.empty((cfg.B, data.n))
    Y = np.empty((cfg.B, data.n))
    for b in range(cfg.B):
        rng = substream(cfg.seed, STREAM_BOOT, b)
        u = su * rng.standard_normal(cl.q1)
        s = ss * rng.standard_normal(cl.q2)
        delta[b] = u[cl.entity - 1] + s[cl.day - 1]
        Y[b] = family_sample(fit.family, eta0 + delta[b], rng)
    return _SingleLoopDraws(delta, Y)


def _draw_single_spatial(fit, data, cfg, K_tilde) -> _SingleLoopDraws:
    w, U = np.linalg.eigh(0.5 * (K_tilde + K_tilde.T))
    root = U * np.sqrt(np.maximum(w, 0.0))
    eta0 = data.X @ fit.beta_hat
    delta = np.empty((cfg.B, data.n))
    Y = np.empty((cfg.B, data.n))
    for b in range(cfg.B):
        rng = substream(cfg.seed, STREAM_BOOT, b)
        delta[b] = root @ rng.standard_normal(data.n)
        Y[b] = family_sample(fit.family, eta0 + delta[b], rng)
    return _SingleLoopDraws(delta, Y)


def _draw_nested_clustered(fit, data, cfg) -> _NestedDraws:
    cl = data.clusters
    su = np.sqrt(max(fit.sigma_u_sq, 0.0))
    ss = np.sqrt(max(fit.sigma_s_sq, 0.0))
    eta0 = data.X @ fit.beta_hat
    u = np.empty((cfg.B1, cl.q1))
    s = np.empty((cfg.B1, cfg.B2, cl.q2))
    Y = np.empty((cfg.B1, cfg.B2, data.n))
    for b1 in range(cfg.B1):
        rng_u = substream(cfg.seed, STREAM_BOOT, b1, 0)
        u[b1] = su * rng_u.standard_normal(cl.q1)
        du = u[b1][cl.entity - 1]
        for b2 in range(cfg.B2):
            rng = substream(cfg.seed, STREAM_BOOT, b1, b2 + 1)
            s[b1, b2] = ss * rng.standard_normal(cl.q2)
            eta = eta0 + du + s[b1, b2][cl.day - 1]
            Y[b1, b2] = family_sample(fit.family, eta, rng)
    return _NestedDraws(u, s, Y)


# --------------------------------------------------------------------------
# Covariance reduction (1/B normalization, per the bootstrap algorithm)
# --------------------------------------------------------------------------


def _reduce_single(l: np.ndarray, Y: np.ndarray, method: str) -> BiasEstimate:
    B = l.shape[0]
    lc = l - l.mean(axis=0)
    yc = Y - Y.mean(axis=0)
    prod = lc * yc
    per_obs = prod.mean(axis=0)
    g_b = prod.mean(axis=1)
    mc_se = float(g_b.std(ddof=1) / np.sqrt(B))
    per_obs_se = prod.std(axis=0, ddof=1) / np.sqrt(B)
    return BiasEstimate(w_cv_hat=float(per_obs.mean()), per_obs_C=per_obs,
                        mc_se=mc_se, per_obs_mc_se=per_obs_se, method=method)


def _reduce_nested(l: np.ndarray, Y: np.ndarray, method: str) -> BiasEstimate:
    B1 = l.shape[0]
    lc = l - l.mean(axis=1, keepdims=True)
    yc = Y - Y.mean(axis=1, keepdims=True)
    C_ib1 = (lc * yc).mean(axis=1)  # (B1, n): inner-sample covariances
    per_obs = C_ib1.mean(axis=0)
    g_b1 = C_ib1.mean(axis=1)
    mc_se = float(g_b1.std(ddof=1) / np.sqrt(B1))
    per_obs_se = C_ib1.std(axis=0, ddof=1) / np.sqrt(B1)
    return BiasEstimate(w_cv_hat=float(per_obs.mean()), per_obs_C=per_obs,
                        mc_se=mc_se, per_obs_mc_se=per_obs_se, method=method)


def _zero_estimate(n: int, method: str) -> BiasEstimate:
    return BiasEstimate(w_cv_hat=0.0, per_obs_C=np.zeros(n), mc_se=0.0,
                        per_obs_mc_se=np.zeros(n), method=method, degenerate=True)


def _is_degenerate(fit: FittedGLMM, K_tilde=None) -> bool:
    if fit.structure == "clustered":
        return fit.sigma_u_sq <= 0 and fit.sigma_s_sq <= 0
    if fit.structure == "spatial":
        if K_tilde is not None:
            return float(np.max(np.abs(K_tilde))) < 1e-14
        return fit.kernel.sigma_out_sq <= 0
    return True


# --------------------------------------------------------------------------
# Linear-predictor draws under each structure and refit path
# --------------------------------------------------------------------------


def _fast_lp_single(data, fit, mm, plan, draws: _SingleLoopDraws) -> np.ndarray:
    ops = _fold_ops(data.X, mm, plan)
    LP = np.empty_like(draws.Y)
    for k in range(1, plan.K + 1):
        op = ops[k - 1]
        out = plan.fold_rows(k)
        Btilde = fit.beta_hat[None, :] + (draws.Y[:, op.in_rows] - op.mu_in) @ op.A.T
        LP[:, out] = Btilde @ data.X[out].T
    return LP


def _fast_lp_nested(data, fit, mm, plan, draws: _NestedDraws) -> np.ndarray:
    cl = data.clusters
    ops = _fold_ops(data.X, mm, plan)
    B1, B2, n = draws.Y.shape
    LP = np.empty((B1, B2, n))
    for k in range(1, plan.K + 1):
        op = ops[k - 1]
        out = plan.fold_rows(k)
        mask = np.ones(n, dtype=bool)
        mask[op.in_rows] = False
        ent_out = cl.entity[out]
        for b1 in range(B1):
            for b2 in range(B2):
                y_b = draws.Y[b1, b2]
                beta_t = fit.beta_hat + op.A @ (y_b[op.in_rows] - op.mu_in)
                eta_b = np.concatenate([draws.u[b1], draws.s[b1, b2]])
                eta_t, _ = taylor_eta(eta_b, mask, y_b, beta_t, fit, data)
                LP[b1, b2, out] = data.X[out] @ beta_t + eta_t[ent_out - 1]
    return LP


def _empirical_lp_single(data, fit, learner, plan, draws: _SingleLoopDraws) -> np.ndarray:
    LP = np.empty_like(draws.Y)
    for k in range(1, plan.K + 1):
        in_rows = plan.train_rows(k)
        out = plan.fold_rows(k)
        sub = data.subset(in_rows)
        for b in range(draws.Y.shape[0]):
            model = fresh_learner(learner).fit(sub.with_response(draws.Y[b, in_rows]))
            LP[b, out] = model.predict_linear(data.X[out])
    return LP


def _empirical_lp_nested(data, fit, learner, plan, draws: _NestedDraws) -> np.ndarray:
    cl = data.clusters
    B1, B2, n = draws.Y.shape
    LP = np.empty((B1, B2, n))
    for k in range(1, plan.K + 1):
        in_rows = plan.train_rows(k)
        out = plan.fold_rows(k)
        sub = data.subset(in_rows)
        ent_out = cl.entity[out]
        for b1 in range(B1):
            for b2 in range(B2):
                model = fresh_learner(learner).fit(
                    sub.with_response(draws.Y[b1, b2, in_rows]))
                LP[b1, b2, out] = model.predict_linear(data.X[out], entities=ent_out)
    return LP


def linear_predictor_draws(data: Dataset, fit: FittedGLMM, cfg: BootstrapConfig,
                           structure: str, plan: FoldPlan, mm: MarginalMoments = None,
                           learner=None, k_tilde: AdjustedCovariance = None):
    """Run the applicable bootstrap; return (LP, Y, nested_flag).

    Exactly one of ``mm`` (fast one-step refits) or ``learner`` (full refits)
    must be given.  LP holds the held-out linear predictors of every
    replicate; responses are drawn identically in both modes.
    """
    if structure not in STRUCTURES:
        raise ValueError(f"structure must be one of {STRUCTURES}")
    if (mm is None) == (learner is None):
        raise ValueError("exactly one of mm/learner must be provided")

    if structure == "spatial":
        if data.spatial is None:
            raise ValueError("spatial structure requires a spatial index")
        adj = k_tilde if k_tilde is not None else build_k_tilde(data.spatial, fit.kernel)
        draws = _draw_single_spatial(fit, data, cfg, adj.K_tilde)
        lp = (_fast_lp_single(data, fit, mm, plan, draws) if mm is not None
              else _empirical_lp_single(data, fit, learner, plan, draws))
        return lp, draws.Y, False

    if data.clusters is None:
        raise ValueError("clustered structures require a cluster index")
    if structure == "clustered_new":
        draws = _draw_single_clustered(fit, data, cfg)
        lp = (_fast_lp_single(data, fit, mm, plan, draws) if mm is not None
              else _empirical_lp_single(data, fit, learner, plan, draws))
        return lp, draws.Y, False

    draws = _draw_nested_clustered(fit, data, cfg)
    lp = (_fast_lp_nested(data, fit, mm, plan, draws) if mm is not None
          else _empirical_lp_nested(data, fit, learner, plan, draws))
    return lp, draws.Y, True


def _wcv_from_lp(lp, Y, nested, loss: LossSpec, fit: FittedGLMM,
                 method: str) -> BiasEstimate:
    l = loss.L2(prediction_from_linear(loss, fit.family, lp))
    if nested:
        return _reduce_nested(l, Y, method)
    return _reduce_single(l, Y, method)


# --------------------------------------------------------------------------
# Public bias estimators
# --------------------------------------------------------------------------


def empirical_wcv_clustered(data: Dataset, learner, plan: FoldPlan, loss: LossSpec,
                            fit: FittedGLMM, cfg: BootstrapConfig,
                            scenario: str = "new_all") -> BiasEstimate:
    """Parametric-bootstrap bias estimate with full learner refits (clustered).

    ``new_all`` runs the single-loop variant (the test-side covariance term
    vanishes); ``shared_entities`` runs the nested loop: entity draws
    outside, day draws inside, covariances taken within the inner loop.
    """
    if fit.structure != "clustered":
        raise UnsupportedConfigError("empirical_wcv_clustered requires a clustered fit")
    if _is_degenerate(fit):
        return _zero_estimate(data.n, "empirical")
    structure = "clustered_new" if scenario == "new_all" else "clustered_shared"
    if scenario not in ("new_all", "shared_entities"):
        raise ValueError(f"unknown scenario {scenario!r}")
    lp, Y, nested = linear_predictor_draws(data, fit, cfg, structure, plan,
                                           learner=learner)
    return _wcv_from_lp(lp, Y, nested, loss, fit, "empirical")


def empirical_wcv_spatial(data: Dataset, learner, plan: FoldPlan, loss: LossSpec,
                          fit: FittedGLMM, cfg: BootstrapConfig,
                          k_tilde: AdjustedCovariance = None) -> BiasEstimate:
    """Single-loop spatial bootstrap with full learner refits."""
    if fit.structure != "spatial":
        raise UnsupportedConfigError("empirical_wcv_spatial requires a spatial fit")
    adj = k_tilde if k_tilde is not None else build_k_tilde(data.spatial, fit.kernel)
    if _is_degenerate(fit, adj.K_tilde):
        return _zero_estimate(data.n, "empirical")
    lp, Y, nested = linear_predictor_draws(data, fit, cfg, "spatial", plan,
                                           learner=learner, k_tilde=adj)
    return _wcv_from_lp(lp, Y, nested, loss, fit, "empirical")


def fast_wcv(data: Dataset, loss: LossSpec, fit: FittedGLMM, mm: MarginalMoments,
             cfg: BootstrapConfig, structure: str, plan: FoldPlan,
             k_tilde: AdjustedCovariance = None) -> BiasEstimate:
    """Bias estimate with one-step refits instead of full learner refits."""
    adj = None
    if structure == "spatial":
        adj = k_tilde if k_tilde is not None else build_k_tilde(data.spatial, fit.kernel)
        degenerate = _is_degenerate(fit, adj.K_tilde)
    else:
        degenerate = _is_degenerate(fit)
    if degenerate:
        est = _zero_estimate(data.n, "fast")
        return BiasEstimate(est.w_cv_hat, est.per_obs_C, est.mc_se,
                            w_cv_tilde=0.0, per_obs_mc_se=est.per_obs_mc_se,
                            method="fast", degenerate=True)
    lp, Y, nested = linear_predictor_draws(data, fit, cfg, structure, plan,
                                           mm=mm, k_tilde=adj)
    est = _wcv_from_lp(lp, Y, nested, loss, fit, "fast")
    return BiasEstimate(est.w_cv_hat, est.per_obs_C, est.mc_se,
                        w_cv_tilde=est.w_cv_hat, per_obs_mc_se=est.per_obs_mc_se,
                        method="fast")


def canonical_c_tilde(data: Dataset, fit: FittedGLMM, mm: MarginalMoments,
                      cfg: BootstrapConfig, plan: FoldPlan,
                      structure: str = None, k_tilde: AdjustedCovariance = None) -> BiasEstimate:
    """Reduced-variance estimate for canonical links and likelihood losses.

    When the loss's L2 at the model prediction is the linear predictor
    itself (cross-entropy with sigmoid, Poisson NLL with log link, and the
    natural-parameter half of squared loss), the per-observation covariance
    reduces to a projection of the covariance between conditional means, so
    no response draws are needed.  For squared loss the returned value is on
    the natural-parameter scale: multiply by 2 to match ``fast_wcv``.
    """
    if not fit.family.is_canonical:
        raise UnsupportedConfigError("canonical_c_tilde requires a canonical family/link")
    if structure is None:
        structure = "spatial" if fit.structure == "spatial" else "clustered_new"
    if structure == "clustered_shared":
        raise UnsupportedConfigError(
            "canonical_c_tilde covers the new-random-effects scenarios only")

    if structure == "spatial":
        adj = k_tilde if k_tilde is not None else build_k_tilde(data.spatial, fit.kernel)
        if _is_degenerate(fit, adj.K_tilde):
            return _zero_estimate(data.n, "canonical")
        w, U = np.linalg.eigh(0.5 * (adj.K_tilde + adj.K_tilde.T))
        root = U * np.sqrt(np.maximum(w, 0.0))
        draw = lambda rng: root @ rng.standard_normal(data.n)  # noqa: E731
    else:
        if fit.structure != "clustered":
            raise UnsupportedConfigError("clustered structure requires a clustered fit")
        if _is_degenerate(fit):
            return _zero_estimate(data.n, "canonical")
        cl = data.clusters
        su = np.sqrt(max(fit.sigma_u_sq, 0.0))
        ss = np.sqrt(max(fit.sigma_s_sq, 0.0))

        def draw(rng):
            u = su * rng.standard_normal(cl.q1)
            s = ss * rng.standard_normal(cl.q2)
            return u[cl.entity - 1] + s[cl.day - 1]

    eta0 = data.X @ fit.beta_hat
    M = np.empty((cfg.B, data.n))
    for b in range(cfg.B):
        rng = substream(cfg.seed, STREAM_BOOT, b)
        M[b] = fit.family.mean(eta0 + draw(rng))
    Mc = M - M.mean(axis=0)

    ops = _fold_ops(data.X, mm, plan)
    prod = np.empty((cfg.B, data.n))
    for k in range(1, plan.K + 1):
        op = ops[k - 1]
        out = plan.fold_rows(k)
        W = data.X[out] @ op.A          # n_out x n_in
        U_rep = Mc[:, op.in_rows] @ W.T  # B x n_out
        prod[:, out] = U_rep * Mc[:, out]
    per_obs = prod.mean(axis=0)
    g_b = prod.mean(axis=1)
    return BiasEstimate(
        w_cv_hat=float(per_obs.mean()), per_obs_C=per_obs,
        mc_se=float(g_b.std(ddof=1) / np.sqrt(cfg.B)),
        per_obs_mc_se=prod.std(axis=0, ddof=1) / np.sqrt(cfg.B),
        method="canonical")


def analytic_cov_terms(data: Dataset, fit: FittedGLMM, plan: FoldPlan,
                       cov_adj: np.ndarray, i: int) -> AnalyticCovTerms:
    """h_i and ktilde_i for observation ``i`` under a Gaussian-identity fit."""
    V = model_covariance(fit, data)
    k = int(plan.fold_of[i])
    in_rows = plan.train_rows(k)
    V_in = V[np.ix_(in_rows, in_rows)]
    Vf = cho_factor(V_in, lower=True)
    ViX = cho_solve(Vf, data.X[in_rows])
    G = data.X[in_rows].T @ ViX
    h = ViX @ np.linalg.solve(G, data.X[i])
    return AnalyticCovTerms(h=h, k_tilde_vec=cov_adj[in_rows, i])


def lmm_analytic_wcv(data: Dataset, fit: FittedGLMM, plan: FoldPlan,
                     cov_adj) -> float:
    """Closed-form bias for Gaussian-identity models with squared loss.

    Computes (2/n) sum_i h_i' ktilde_i, conditioning on the observed design
    and coordinates (plug-in value for the expectation over X).  ``cov_adj``
    is the adjusted covariance driving the bootstrap: an
    ``AdjustedCovariance`` for spatial data or the clustered random-effect
    covariance matrix.
    """
    if fit.family.distribution != "gaussian" or fit.family.link.name != "identity":
        raise UnsupportedConfigError("lmm_analytic_wcv requires Gaussian identity")
    C = cov_adj.K_tilde if isinstance(cov_adj, AdjustedCovariance) else np.asarray(cov_adj)
    V = model_covariance(fit, data)
    total = 0.0
    for k in range(1, plan.K + 1):
        in_rows = plan.train_rows(k)
        out = plan.fold_rows(k)
        V_in = V[np.ix_(in_rows, in_rows)]
        Vf = cho_factor(V_in, lower=True)
        ViX = cho_solve(Vf, data.X[in_rows])
        G = data.X[in_rows].T @ ViX
        T = np.linalg.solve(G, ViX.T @ C[np.ix_(in_rows, out)])  # p x n_out
        total += float(np.einsum("ip,pi->i", data.X[out], T).sum())
    return 2.0 * total / data.n


def last_layer_wcv(features, data: Dataset, fit: FittedGLMM, mm: MarginalMoments,
                   cfg: BootstrapConfig, structure: str, plan: FoldPlan,
                   loss: LossSpec) -> BiasEstimate:
    """Fast bias estimate with the covariates replaced by a fixed feature map.

    ``fit`` and ``mm`` must describe the output layer fitted on ``features``.
    This is the entry point for models whose final layer is generalized
    linear: everything upstream of the features is held fixed.
    """
    return fast_wcv(data.with_covariates(features), loss, fit, mm, cfg,
                    structure, plan)
