"""Mixed-model fitters with an sklearn-style estimator API.

Two estimators cover the model families:

* ``LmmRegressor`` -- Gaussian-identity models.  Variance components maximize
  the Gaussian marginal likelihood (profiled over the coefficients); the
  coefficient vector is the GLS solution at the optimum.  Clustered
  components are found by simplex search over log-parameters, spatial kernel
  parameters by a log-grid plus coordinate descent.

* ``GlmmRegressor`` -- any family, fitted by penalized quasi-likelihood:
  alternate (a) penalized IRLS for the coefficients and random effects at
  fixed variance components with (b) an EM/REML-type variance update on the
  working responses.  Dispersion is fixed at 1 for Bernoulli and Poisson.

Both estimators accept a ``Dataset`` in ``fit`` and expose the fitted state
as a ``FittedGLMM``; ``get_params``/``set_params`` come from sklearn's
``BaseEstimator`` so they compose with ``clone`` and friends.  Any object
with the same ``fit``/``predict_linear``/``predict_mean`` surface can stand
in as a learner for the CV engine and the bias estimators.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy.linalg import cho_factor, cho_solve
from scipy.optimize import minimize, minimize_scalar
from sklearn.base import BaseEstimator

from .covariance import clustered_effect_cov, kernel_matrix
from .data import Dataset, KernelParams
from .exceptions import ConvergenceError, RankDeficiencyError, UnsupportedConfigError
from .families import ModelFamily, gaussian_identity
from .validation import check_matrix

__all__ = ["FittedGLMM", "LmmRegressor", "GlmmRegressor", "fit_lmm", "fit_glmm",
           "predict_response", "predict_random_effects", "model_covariance"]

_VAR_FLOOR = 1e-12
_SNAP_TO_ZERO = 1e-10


@dataclass(frozen=True)
class FittedGLMM:
    """Fitted state of a mixed model.

    ``sigma_u_sq``/``sigma_s_sq`` are set for clustered fits, ``kernel`` for
    spatial fits; iid fits carry neither.  Spatial fits keep no
    realization-specific predictor, so ``u_hat``/``s_hat`` are empty.
    """

    family: ModelFamily
    beta_hat: np.ndarray
    phi_hat: float
    sigma_u_sq: Optional[float] = None
    sigma_s_sq: Optional[float] = None
    kernel: Optional[KernelParams] = None
    u_hat: np.ndarray = field(default_factory=lambda: np.zeros(0))
    s_hat: np.ndarray = field(default_factory=lambda: np.zeros(0))
    n_iter: int = 0
    score_norm: float = 0.0
    converged: bool = True

    def __post_init__(self):
        object.__setattr__(self, "beta_hat", np.asarray(self.beta_hat, dtype=float))
        for name in ("sigma_u_sq", "sigma_s_sq"):
            v = getattr(self, name)
            if v is not None and v < 0:
                raise ValueError(f"{name} must be >= 0")
        if not self.phi_hat > 0:
            raise ValueError("phi_hat must be > 0")

    @property
    def structure(self) -> str:
        if self.sigma_u_sq is not None:
            return "clustered"
        if self.kernel is not None:
            return "spatial"
        return "iid"

    def linear_predictor(self, X, entities=None) -> np.ndarray:
        X = check_matrix(X, "X")
        eta = X @ self.beta_hat
        if entities is not None:
            entities = np.asarray(entities, dtype=int)
            if self.u_hat.size == 0:
                raise IndexError("fit carries no entity effects")
            if np.any(entities < 1) or np.any(entities > self.u_hat.size):
                raise IndexError("unknown entity id")
            eta = eta + self.u_hat[entities - 1]
        return eta

    def to_json_dict(self) -> dict:
        out = {
            "family": self.family.distribution,
            "link": self.family.link.name,
            "beta_hat": self.beta_hat,
            "phi_hat": self.phi_hat,
            "structure": self.structure,
            "convergence": {
                "iterations": self.n_iter,
                "final_gradient_norm": self.score_norm,
                "converged": self.converged,
            },
        }
        if self.structure == "clustered":
            out["sigma_u_sq"] = self.sigma_u_sq
            out["sigma_s_sq"] = self.sigma_s_sq
            out["u_hat"] = self.u_hat
            out["s_hat"] = self.s_hat
        elif self.structure == "spatial":
            out["sigma_out_sq"] = self.kernel.sigma_out_sq
            out["sigma_in_sq"] = self.kernel.sigma_in_sq
        return out


def model_covariance(fit: FittedGLMM, data: Dataset) -> np.ndarray:
    """Marginal covariance of the linear-scale response: random part + phi*I."""
    n = data.n
    if fit.structure == "clustered":
        C = clustered_effect_cov(data.clusters, fit.sigma_u_sq, fit.sigma_s_sq)
    elif fit.structure == "spatial":
        C = kernel_matrix(fit.kernel, data.spatial)
    else:
        C = np.zeros((n, n))
    return C + fit.phi_hat * np.eye(n)


# --------------------------------------------------------------------------
# Gaussian marginal likelihood machinery
# --------------------------------------------------------------------------


def _gls_beta(X, y, V):
    """GLS coefficients and the V^{-1} factor; raises on rank deficiency."""
    try:
        Vf = cho_factor(V, lower=True)
    except np.linalg.LinAlgError as exc:
        raise RankDeficiencyError(f"covariance matrix not positive definite: {exc}")
    Vinv_X = cho_solve(Vf, X)
    G = X.T @ Vinv_X
    if np.linalg.cond(G) > 1e12:
        raise RankDeficiencyError("X^T V^-1 X is singular (rank-deficient design)")
    beta = np.linalg.solve(G, X.T @ cho_solve(Vf, y))
    return beta, Vf


def _profile_nll(X, y, V) -> float:
    """Gaussian marginal NLL profiled over the coefficients."""
    beta, Vf = _gls_beta(X, y, V)
    r = y - X @ beta
    logdet = 2.0 * np.sum(np.log(np.diag(Vf[0])))
    return 0.5 * (logdet + float(r @ cho_solve(Vf, r)))


def _fit_lmm_clustered(data: Dataset, fixed: dict, max_iter: int):
    clusters = data.clusters
    y = data.y

    def components(theta_free):
        vals, j = {}, 0
        for name in ("sigma_u_sq", "sigma_s_sq", "phi"):
            if name in fixed:
                vals[name] = float(fixed[name])
            else:
                vals[name] = float(np.exp(theta_free[j]))
                j += 1
        return vals

    free_names = [n for n in ("sigma_u_sq", "sigma_s_sq", "phi") if n not in fixed]
    var0 = max(float(np.var(y)), 1e-4)

    def nll(theta_free):
        c = components(theta_free)
        V = (clustered_effect_cov(clusters, c["sigma_u_sq"], c["sigma_s_sq"])
             if clusters is not None else np.zeros((data.n, data.n)))
        V = V + max(c["phi"], _VAR_FLOOR) * np.eye(data.n)
        return _profile_nll(data.X, y, V)

    if free_names:
        x0 = np.log(np.full(len(free_names), var0 / 3.0))
        res = minimize(nll, x0, method="Nelder-Mead",
                       options={"maxiter": 400 * len(free_names),
                                "xatol": 1e-9, "fatol": 1e-12})
        theta = res.x
        n_iter = int(res.nit)
        converged = bool(res.success)
    else:
        theta = np.zeros(0)
        n_iter, converged = 0, True
    c = components(theta)
    for name in ("sigma_u_sq", "sigma_s_sq"):
        if c[name] < _SNAP_TO_ZERO:
            c[name] = 0.0
    c["phi"] = max(c["phi"], _VAR_FLOOR)
    V = (clustered_effect_cov(clusters, c["sigma_u_sq"], c["sigma_s_sq"])
         if clusters is not None else np.zeros((data.n, data.n)))
    V = V + c["phi"] * np.eye(data.n)
    beta, _ = _gls_beta(data.X, y, V)
    return beta, c, n_iter, converged


def _fit_lmm_spatial(data: Dataset, fixed: dict, max_iter: int):
    coords = data.spatial.coords
    d2 = np.sum((coords[:, None, :] - coords[None, :, :]) ** 2, axis=-1)
    X, y, n = data.X, data.y, data.n

    def nll(sout, sin, phi):
        V = sout * np.exp(-sin * d2) + max(phi, _VAR_FLOOR) * np.eye(n)
        return _profile_nll(X, y, V)

    def profile_phi(sout, sin):
        if "phi" in fixed:
            return float(fixed["phi"]), nll(sout, sin, float(fixed["phi"]))
        res = minimize_scalar(lambda lp: nll(sout, sin, np.exp(lp)),
                              bounds=(np.log(1e-8), np.log(1e4)), method="bounded",
                              options={"xatol": 1e-10})
        return float(np.exp(res.x)), float(res.fun)

    grid = np.geomspace(1e-2, 1e2, 7)
    best = None
    for sout in ([float(fixed["sigma_out_sq"])] if "sigma_out_sq" in fixed else grid):
        for sin in ([float(fixed["sigma_in_sq"])] if "sigma_in_sq" in fixed else grid):
            phi, val = profile_phi(sout, sin)
            if best is None or val < best[0]:
                best = (val, sout, sin, phi)
    val, sout, sin, phi = best

    # coordinate descent on the log scale
    n_cycles = 0
    for _ in range(max_iter):
        n_cycles += 1
        prev = np.array([sout, sin, phi, val])
        if "sigma_out_sq" not in fixed:
            res = minimize_scalar(lambda t: nll(np.exp(t), sin, phi),
                                  bounds=(np.log(1e-8), np.log(1e6)),
                                  method="bounded", options={"xatol": 1e-10})
            sout = float(np.exp(res.x))
        if "sigma_in_sq" not in fixed:
            res = minimize_scalar(lambda t: nll(sout, np.exp(t), phi),
                                  bounds=(np.log(1e-8), np.log(1e6)),
                                  method="bounded", options={"xatol": 1e-10})
            sin = float(np.exp(res.x))
        if "phi" not in fixed:
            res = minimize_scalar(lambda t: nll(sout, sin, np.exp(t)),
                                  bounds=(np.log(1e-8), np.log(1e4)),
                                  method="bounded", options={"xatol": 1e-10})
            phi = float(np.exp(res.x))
        val = nll(sout, sin, phi)
        rel = np.max(np.abs(np.array([sout, sin, phi, val]) - prev)
                     / np.maximum(np.abs(prev), 1e-12))
        if rel < 1e-8:
            break
    V = sout * np.exp(-sin * d2) + max(phi, _VAR_FLOOR) * np.eye(n)
    beta, _ = _gls_beta(X, y, V)
    comps = {"sigma_out_sq": max(sout, _VAR_FLOOR), "sigma_in_sq": max(sin, 0.0),
             "phi": max(phi, _VAR_FLOOR)}
    return beta, comps, n_cycles, True


# --------------------------------------------------------------------------
# Penalized IRLS core (shared by PQL fits, random-effect prediction,
# and bootstrap refits)
# --------------------------------------------------------------------------


def _penalized_irls(X, y, Q, penalty, family, offset=0.0, beta_fixed=None,
                    init=None, ridge=1e-8, max_iter=100, tol=1e-10):
    """Solve the penalized working-response equations for (beta, eta).

    ``Q`` is the random-effect design (may have zero columns), ``penalty``
    the precision of eta: a 1-D diagonal or a full matrix.  Columns with
    infinite penalty must be removed by the caller.  With ``beta_fixed`` the
    coefficients are held and only eta is updated.  Returns
    (beta, eta, n_iter, score_norm).
    """
    n, p = X.shape
    q = Q.shape[1]
    solve_beta = beta_fixed is None
    beta = (np.zeros(p) if init is None else np.asarray(init[0], float).copy()) \
        if solve_beta else np.asarray(beta_fixed, float)
    eta = np.zeros(q) if init is None else np.asarray(init[1], float).copy()
    pen = np.diag(penalty) if np.ndim(penalty) == 1 else np.asarray(penalty, float)

    link = family.link
    score_norm = np.inf
    for it in range(1, max_iter + 1):
        lp = offset + X @ beta + Q @ eta
        if not np.all(np.isfinite(lp)) or np.max(np.abs(lp)) > 1e4:
            raise ConvergenceError("working response overflow (diverging fit)",
                                   trace=[{"iteration": it, "max_lp": float(np.max(np.abs(lp)))}])
        m = link.g(lp)
        d = np.maximum(link.gprime(lp), 1e-12)
        vc = np.maximum(family.conditional_variance(m), 1e-12)
        w = d * d / vc
        z = (lp - offset) + (y - m) / d

        Xw = X * w[:, None]
        Qw = Q * w[:, None]
        if solve_beta:
            A = np.block([[X.T @ Xw, X.T @ Qw],
                          [Qw.T @ X, Q.T @ Qw + pen]])
            rhs = np.concatenate([Xw.T @ z, Qw.T @ z])
        else:
            A = Q.T @ Qw + pen
            rhs = Qw.T @ (z - X @ beta)
        A_r = A + ridge * np.eye(A.shape[0])
        try:
            sol = np.linalg.solve(A_r, rhs)
        except np.linalg.LinAlgError as exc:
            raise RankDeficiencyError(f"penalized normal matrix singular: {exc}")
        if solve_beta:
            beta_new, eta_new = sol[:p], sol[p:]
        else:
            beta_new, eta_new = beta, sol
        delta = max(
            np.max(np.abs(beta_new - beta)) if solve_beta and p else 0.0,
            np.max(np.abs(eta_new - eta)) if q else 0.0,
        )
        scale = max(np.max(np.abs(beta_new)) if p else 0.0,
                    np.max(np.abs(eta_new)) if q else 0.0, 1.0)
        beta, eta = beta_new, eta_new
        if delta / scale < tol:
            # quasi-score at the solution, for reporting
            lp = offset + X @ beta + Q @ eta
            m = link.g(lp)
            d = np.maximum(link.gprime(lp), 1e-12)
            vc = np.maximum(family.conditional_variance(m), 1e-12)
            su = X.T @ (d / vc * (y - m)) if solve_beta else np.zeros(0)
            se = Q.T @ (d / vc * (y - m)) - pen @ eta if q else np.zeros(0)
            score_norm = float(np.linalg.norm(np.concatenate([su, se])))
            return beta, eta, it, score_norm
    raise ConvergenceError(f"penalized IRLS did not converge in {max_iter} iterations",
                           trace=[{"iteration": max_iter, "last_step": float(delta)}])


def _pql_fit(data: Dataset, family: ModelFamily, fixed: dict, ridge: float,
             max_iter: int, tol: float):
    """PQL for clustered (or iid) data: IRLS + EM variance updates."""
    X, y = data.X, data.y
    clusters = data.clusters
    if clusters is not None:
        q1, q2 = clusters.q1, clusters.q2
        if q1 + q2 >= data.n:
            raise ValueError(f"q1+q2 = {q1 + q2} >= n = {data.n}: "
                             "random effects are not identifiable")
        Z = clusters.one_hot()
    else:
        q1 = q2 = 0
        Z = np.zeros((data.n, 0))

    su2 = float(fixed.get("sigma_u_sq", 0.1))
    ss2 = float(fixed.get("sigma_s_sq", 0.1))
    estimate_u = "sigma_u_sq" not in fixed and q1 > 0
    estimate_s = "sigma_s_sq" not in fixed and q2 > 0

    beta = np.zeros(data.p)
    eta_full = np.zeros(q1 + q2)
    n_iter = 0
    score_norm = 0.0
    converged = True
    outer_max = max_iter if (estimate_u or estimate_s) else 1
    for outer in range(1, outer_max + 1):
        n_iter = outer
        # active random columns: blocks with positive variance
        active = np.zeros(q1 + q2, dtype=bool)
        if su2 > 0:
            active[:q1] = True
        if ss2 > 0:
            active[q1:] = True
        Qa = Z[:, active]
        pen = np.concatenate([
            np.full(q1, 1.0 / max(su2, _VAR_FLOOR)) if su2 > 0 else np.zeros(0),
            np.full(q2, 1.0 / max(ss2, _VAR_FLOOR)) if ss2 > 0 else np.zeros(0),
        ])
        beta, eta_a, _, score_norm = _penalized_irls(
            X, y, Qa, pen, family, init=(beta, eta_full[active]),
            ridge=ridge, tol=tol)
        eta_full = np.zeros(q1 + q2)
        eta_full[active] = eta_a

        if not (estimate_u or estimate_s):
            break
        # EM/REML-type update on the working responses
        lp = X @ beta + Z @ eta_full
        m = family.link.g(lp)
        d = np.maximum(family.link.gprime(lp), 1e-12)
        vc = np.maximum(family.conditional_variance(m), 1e-12)
        w = d * d / vc
        Xw = X * w[:, None]
        Qw = Qa * w[:, None]
        A = np.block([[X.T @ Xw, X.T @ Qw], [Qw.T @ X, Qa.T @ Qw + np.diag(pen)]])
        C = np.linalg.inv(A + ridge * np.eye(A.shape[0]))
        C_eta = np.diag(C)[data.p:]
        new_su2, new_ss2 = su2, ss2
        k = 0
        if su2 > 0:
            n_u = int(active[:q1].sum())
            u_part = eta_a[:n_u]
            if estimate_u:
                new_su2 = float((u_part @ u_part + C_eta[:n_u].sum()) / q1)
            k = n_u
        if ss2 > 0 and estimate_s:
            s_part = eta_a[k:]
            new_ss2 = float((s_part @ s_part + C_eta[k:].sum()) / q2)
        rel = max(abs(new_su2 - su2) / max(su2, 1e-8),
                  abs(new_ss2 - ss2) / max(ss2, 1e-8))
        su2, ss2 = max(new_su2, _VAR_FLOOR), max(new_ss2, _VAR_FLOOR)
        if rel < 1e-8:
            break
    else:
        converged = False

    if estimate_u and su2 < _SNAP_TO_ZERO:
        su2 = 0.0
    if estimate_s and ss2 < _SNAP_TO_ZERO:
        ss2 = 0.0
    su2 = float(fixed.get("sigma_u_sq", su2))
    ss2 = float(fixed.get("sigma_s_sq", ss2))
    phi = float(fixed.get("phi", family.dispersion_phi))
    return beta, eta_full[:q1], eta_full[q1:], su2, ss2, phi, n_iter, score_norm, converged


def _pql_fit_spatial(data: Dataset, family: ModelFamily, fixed: dict, ridge: float,
                     max_iter: int, tol: float):
    """PQL for spatial data: field penalized by the kernel precision."""
    X, y = data.X, data.y
    coords = data.spatial.coords
    d2 = np.sum((coords[:, None, :] - coords[None, :, :]) ** 2, axis=-1)
    sout = float(fixed.get("sigma_out_sq", max(np.var(y), 0.1)))
    sin = float(fixed.get("sigma_in_sq", 1.0))
    estimate = ("sigma_out_sq" not in fixed) or ("sigma_in_sq" not in fixed)

    beta = np.zeros(data.p)
    delta = np.zeros(data.n)
    n_iter, score_norm, converged = 0, 0.0, True
    outer_max = max_iter if estimate else 1
    for outer in range(1, outer_max + 1):
        n_iter = outer
        K = sout * np.exp(-sin * d2)
        pen = np.linalg.inv(K + 1e-8 * max(sout, 1.0) * np.eye(data.n))
        beta, delta, _, score_norm = _penalized_irls(
            X, y, np.eye(data.n), pen, family, init=(beta, delta),
            ridge=ridge, tol=tol)
        if not estimate:
            break
        # working-response marginal likelihood for the kernel parameters
        lp = X @ beta + delta
        m = family.link.g(lp)
        d = np.maximum(family.link.gprime(lp), 1e-12)
        vc = np.maximum(family.conditional_variance(m), 1e-12)
        z = lp + (y - m) / d
        Winv = np.diag(vc / (d * d))

        def wnll(so, si):
            V = so * np.exp(-si * d2) + Winv
            return _profile_nll(X, z, V)

        prev = (sout, sin)
        if "sigma_out_sq" not in fixed:
            res = minimize_scalar(lambda t: wnll(np.exp(t), sin),
                                  bounds=(np.log(1e-8), np.log(1e6)),
                                  method="bounded", options={"xatol": 1e-9})
            sout = float(np.exp(res.x))
        if "sigma_in_sq" not in fixed:
            res = minimize_scalar(lambda t: wnll(sout, np.exp(t)),
                                  bounds=(np.log(1e-8), np.log(1e6)),
                                  method="bounded", options={"xatol": 1e-9})
            sin = float(np.exp(res.x))
        rel = max(abs(sout - prev[0]) / max(prev[0], 1e-8),
                  abs(sin - prev[1]) / max(prev[1], 1e-8))
        if rel < 1e-8:
            break
    else:
        converged = False
    phi = float(fixed.get("phi", family.dispersion_phi))
    kp = KernelParams(max(sout, _VAR_FLOOR), max(sin, 0.0))
    return beta, kp, phi, n_iter, score_norm, converged


# --------------------------------------------------------------------------
# Estimators
# --------------------------------------------------------------------------


class _MixedPredictorMixin:
    """Prediction surface shared by the fitted estimators."""

    fit_result_: FittedGLMM

    def predict_linear(self, X, entities=None) -> np.ndarray:
        return self.fit_result_.linear_predictor(X, entities)

    def predict_mean(self, X, entities=None) -> np.ndarray:
        fit = self.fit_result_
        return fit.family.mean(fit.linear_predictor(X, entities))

    def predict(self, X, entities=None) -> np.ndarray:
        return self.predict_mean(X, entities)

    def fit_report(self) -> dict:
        return self.fit_result_.to_json_dict()


class LmmRegressor(BaseEstimator, _MixedPredictorMixin):
    """Gaussian-identity mixed model fitted by marginal maximum likelihood.

    Parameters
    ----------
    fixed_components : dict, optional
        Any of ``sigma_u_sq``, ``sigma_s_sq``, ``phi`` (clustered) or
        ``sigma_out_sq``, ``sigma_in_sq``, ``phi`` (spatial) to hold fixed;
        the rest are estimated.
    max_iter : int
        Cap on optimizer cycles.
    """

    def __init__(self, fixed_components=None, max_iter=200):
        self.fixed_components = fixed_components
        self.max_iter = max_iter

    def fit(self, data: Dataset) -> "LmmRegressor":
        fixed = dict(self.fixed_components or {})
        if data.n <= data.p:
            raise ValueError("fit_lmm requires n > p")
        if data.structure == "spatial":
            beta, comps, n_iter, conv = _fit_lmm_spatial(data, fixed, self.max_iter)
            fit = FittedGLMM(
                family=gaussian_identity(comps["phi"]), beta_hat=beta,
                phi_hat=comps["phi"],
                kernel=KernelParams(comps["sigma_out_sq"], comps["sigma_in_sq"]),
                n_iter=n_iter, converged=conv)
        else:
            if data.structure == "iid":
                fixed.setdefault("sigma_u_sq", 0.0)
                fixed.setdefault("sigma_s_sq", 0.0)
            beta, comps, n_iter, conv = _fit_lmm_clustered(data, fixed, self.max_iter)
            fit = FittedGLMM(
                family=gaussian_identity(comps["phi"]), beta_hat=beta,
                phi_hat=comps["phi"], sigma_u_sq=comps["sigma_u_sq"],
                sigma_s_sq=comps["sigma_s_sq"], n_iter=n_iter, converged=conv)
            if data.clusters is not None:
                u, s = predict_random_effects(fit, data)
                fit = FittedGLMM(
                    family=fit.family, beta_hat=beta, phi_hat=fit.phi_hat,
                    sigma_u_sq=fit.sigma_u_sq, sigma_s_sq=fit.sigma_s_sq,
                    u_hat=u, s_hat=s, n_iter=n_iter, converged=conv)
        self.fit_result_ = fit
        return self


class GlmmRegressor(BaseEstimator, _MixedPredictorMixin):
    """GLMM fitted by penalized quasi-likelihood.

    Parameters
    ----------
    family : str or ModelFamily
        ``bernoulli``, ``poisson`` or ``gaussian`` (canonical links by
        default).
    fixed_components : dict, optional
        Variance components to hold fixed (see ``LmmRegressor``).  Gaussian
        fits require all components fixed; use ``LmmRegressor`` to estimate
        them.
    ridge : float
        Safeguard added to the penalized normal matrix (separation,
        collinearity).
    """

    def __init__(self, family="bernoulli", fixed_components=None, max_iter=200,
                 tol=1e-8, ridge=1e-8):
        self.family = family
        self.fixed_components = fixed_components
        self.max_iter = max_iter
        self.tol = tol
        self.ridge = ridge

    def _resolved_family(self) -> ModelFamily:
        if isinstance(self.family, ModelFamily):
            return self.family
        return ModelFamily(self.family)

    def fit(self, data: Dataset) -> "GlmmRegressor":
        family = self._resolved_family()
        fixed = dict(self.fixed_components or {})
        if family.distribution == "gaussian":
            needed = ({"sigma_out_sq", "sigma_in_sq"} if data.structure == "spatial"
                      else {"sigma_u_sq", "sigma_s_sq"} if data.structure == "clustered"
                      else set())
            if not needed <= set(fixed):
                raise UnsupportedConfigError(
                    "Gaussian variance components are estimated by LmmRegressor; "
                    "GlmmRegressor requires them fixed")
            if "phi" in fixed:
                family = gaussian_identity(fixed["phi"])
        if data.structure == "spatial":
            beta, kp, phi, n_iter, score_norm, conv = _pql_fit_spatial(
                data, family, fixed, self.ridge, self.max_iter, self.tol)
            self.fit_result_ = FittedGLMM(
                family=family, beta_hat=beta, phi_hat=phi, kernel=kp,
                n_iter=n_iter, score_norm=score_norm, converged=conv)
        else:
            beta, u, s, su2, ss2, phi, n_iter, score_norm, conv = _pql_fit(
                data, family, fixed, self.ridge, self.max_iter, self.tol)
            if data.structure == "iid":
                self.fit_result_ = FittedGLMM(
                    family=family, beta_hat=beta, phi_hat=phi,
                    n_iter=n_iter, score_norm=score_norm, converged=conv)
            else:
                self.fit_result_ = FittedGLMM(
                    family=family, beta_hat=beta, phi_hat=phi,
                    sigma_u_sq=su2, sigma_s_sq=ss2, u_hat=u, s_hat=s,
                    n_iter=n_iter, score_norm=score_norm, converged=conv)
        return self


def fit_lmm(data: Dataset, fixed_components=None, max_iter=200) -> FittedGLMM:
    return LmmRegressor(fixed_components, max_iter).fit(data).fit_result_


def fit_glmm(data: Dataset, family, fixed_components=None, max_iter=200,
             tol=1e-8, ridge=1e-8) -> FittedGLMM:
    return GlmmRegressor(family, fixed_components, max_iter, tol,
                         ridge).fit(data).fit_result_


def predict_random_effects(fit: FittedGLMM, data: Dataset):
    """Joint-likelihood maximizer (u_hat, s_hat) given the fitted parameters.

    For Gaussian-identity this is the BLUP closed form; otherwise the
    penalized IRLS iteration on the random effects only.
    """
    if fit.structure != "clustered" or data.clusters is None:
        raise UnsupportedConfigError("random-effect prediction requires a clustered fit")
    clusters = data.clusters
    q1, q2 = clusters.q1, clusters.q2
    Z = clusters.one_hot()
    su2, ss2 = fit.sigma_u_sq, fit.sigma_s_sq
    if su2 <= 0 and ss2 <= 0:
        return np.zeros(q1), np.zeros(q2)
    active = np.zeros(q1 + q2, dtype=bool)
    if su2 > 0:
        active[:q1] = True
    if ss2 > 0:
        active[q1:] = True
    pen = np.concatenate([
        np.full(q1, 1.0 / su2) if su2 > 0 else np.zeros(0),
        np.full(q2, 1.0 / ss2) if ss2 > 0 else np.zeros(0),
    ])
    if fit.family.distribution == "gaussian":
        # BLUP: one weighted penalized solve
        Qa = Z[:, active]
        r = data.y - data.X @ fit.beta_hat
        A = Qa.T @ Qa / fit.phi_hat + np.diag(pen)
        sol = np.linalg.solve(A, Qa.T @ r / fit.phi_hat)
    else:
        _, sol, _, _ = _penalized_irls(
            data.X, data.y, Z[:, active], pen, fit.family,
            beta_fixed=fit.beta_hat, max_iter=200)
    eta = np.zeros(q1 + q2)
    eta[active] = sol
    return eta[:q1], eta[q1:]


def predict_response(fit: FittedGLMM, x, mode: str = "new_entity",
                     entity: int | None = None) -> float:
    """Predict one response: g(x' beta [+ u_hat_entity])."""
    x = np.asarray(x, dtype=float)
    eta = float(x @ fit.beta_hat)
    if mode == "known_entity":
        if entity is None:
            raise ValueError("known_entity mode requires an entity id")
        if fit.u_hat.size == 0 or not 1 <= entity <= fit.u_hat.size:
            raise IndexError(f"unknown entity id {entity}")
        eta += float(fit.u_hat[entity - 1])
    elif mode != "new_entity":
        raise ValueError(f"unknown prediction mode {mode!r}")
    return float(fit.family.mean(np.asarray(eta)))
