"""Weighting-based causal effect estimation.

Three weight constructions (inverse propensity, balance-constrained
propensity, and a cross-validated stacked ensemble of propensity models)
feed a weighted negative binomial outcome regression. Binary treatments use
propensity scores; continuous treatments use a Gaussian conditional density.
All weights are stabilized, truncated at the 99th percentile, and normalized
to mean 1.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass
from typing import Callable, Mapping, Sequence

import numpy as np
from scipy.optimize import minimize
from scipy.special import ndtr

from .errors import (
    CandidateDropWarning,
    ConvergenceError,
    DataError,
    PositivityError,
    PositivityWarning,
)
from .negbin import fit_nb_glm
from .panel import DesignTable

METHOD_IPTW = "iptw"
METHOD_CBPS = "cbps"
METHOD_SUPER_LEARNER = "super_learner"

_PROP_FLOOR = 1e-3
_PROP_CEIL = 1.0 - 1e-3
# Hard caps on stabilized weights trade bias for variance; capping the top 1%
# measurably biases effect estimates under moderate confounding, so the
# default only reins in the most extreme 0.1%. Configurable per constructor.
TRUNCATE_PERCENTILE_DEFAULT = 99.9


@dataclass(frozen=True, eq=False)
class WeightSet:
    """Per-observation causal weights plus balance diagnostics.

    ``balance`` maps covariate name to the weighted standardized mean
    difference (binary treatment) or weighted treatment-covariate correlation
    (continuous treatment). ``ess`` is the effective sample size.
    """

    weights: np.ndarray
    method: str
    treatment_name: str
    treatment_type: str
    balance: dict
    ess: float
    n_truncated: int
    diagnostics: dict

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=np.float64)
        if (w <= 0).any():
            raise DataError("weights must be positive")
        if abs(w.mean() - 1.0) > 1e-12:
            raise DataError("weights must be normalized to mean 1")
        if self.ess > len(w) + 1e-9:
            raise DataError("effective sample size cannot exceed N")
        object.__setattr__(self, "weights", w)


@dataclass(frozen=True)
class CausalEstimate:
    method: str
    treatment: str
    estimate: float
    se: float
    z: float
    p: float

    def __post_init__(self):
        if not self.se > 0:
            raise DataError("SE must be positive")


# ---------------------------------------------------------------------------
# Internals


def _as_matrix(covariates: Mapping[str, np.ndarray]) -> tuple[list[str], np.ndarray]:
    names = list(covariates)
    if not names:
        raise DataError("at least one covariate is required")
    cols = [np.asarray(covariates[n], dtype=np.float64) for n in names]
    n = len(cols[0])
    if any(len(c) != n for c in cols):
        raise DataError("covariate columns must share a length")
    X = np.column_stack(cols)
    if np.isnan(X).any():
        raise DataError("covariates contain missing values")
    return names, X


def _standardize(X: np.ndarray) -> np.ndarray:
    mean = X.mean(axis=0)
    sd = X.std(axis=0, ddof=1)
    if (sd <= 0).any():
        raise DataError("covariates must have nonzero variance")
    return (X - mean) / sd


def _infer_treatment_type(T: np.ndarray, declared: str | None) -> str:
    if declared is not None:
        if declared not in ("binary", "continuous"):
            raise DataError(f"treatment_type must be 'binary' or 'continuous', got {declared!r}")
        return declared
    return "binary" if set(np.unique(T)).issubset({0.0, 1.0}) else "continuous"


def _logistic_fit(F: np.ndarray, T: np.ndarray, max_iter=100, tol=1e-10):
    """Unpenalized logistic regression by Newton's method.

    Raises PositivityError when coefficients diverge (perfect separation).
    """
    beta = np.zeros(F.shape[1])

    def nll(b):
        eta = F @ b
        return float(np.logaddexp(0.0, eta).sum() - T @ eta)

    cur = nll(beta)
    for _ in range(max_iter):
        eta = F @ beta
        e = 1.0 / (1.0 + np.exp(-eta))
        grad = F.T @ (T - e)
        W = np.maximum(e * (1.0 - e), 1e-12)
        H = F.T @ (W[:, None] * F)
        try:
            step = np.linalg.solve(H, grad)
        except np.linalg.LinAlgError:
            step = np.linalg.solve(H + 1e-8 * np.eye(len(beta)), grad)
        frac = 1.0
        while frac > 1e-8:
            cand = beta + frac * step
            val = nll(cand)
            if np.isfinite(val) and val <= cur + 1e-12 * abs(cur):
                break
            frac *= 0.5
        delta = float(np.abs(frac * step).max())
        beta = beta + frac * step
        cur = nll(beta)
        if np.abs(beta).max() > 1e2:
            raise PositivityError(
                "propensity model diverged (perfect separation / positivity violation)"
            )
        if delta < tol:
            break
    e = 1.0 / (1.0 + np.exp(-(F @ beta)))
    return beta, e


def _ols_fit(F: np.ndarray, T: np.ndarray):
    gamma, *_ = np.linalg.lstsq(F, T, rcond=None)
    resid = T - F @ gamma
    s2 = float(resid @ resid) / len(T)
    if s2 <= 0:
        raise DataError("degenerate conditional density (zero residual variance)")
    return gamma, s2


def _normal_pdf(x, mean, var):
    return np.exp(-((x - mean) ** 2) / (2.0 * var)) / math.sqrt(2.0 * math.pi * var)


def _stabilized_binary(T, e):
    p_bar = float(T.mean())
    return np.where(T == 1, p_bar / e, (1.0 - p_bar) / (1.0 - e))


def _stabilized_continuous(T, cond_mean, cond_var):
    marg_mean = float(T.mean())
    marg_var = float(T.var())
    if marg_var <= 0:
        raise DataError("continuous treatment has zero variance")
    return _normal_pdf(T, marg_mean, marg_var) / _normal_pdf(T, cond_mean, cond_var)


def _truncate_and_normalize(w: np.ndarray, percentile: float) -> tuple[np.ndarray, int]:
    cap = float(np.percentile(w, percentile))
    n_truncated = int((w > cap).sum())
    w = np.minimum(w, cap)
    return w / w.mean(), n_truncated


def _check_positivity(e: np.ndarray):
    frac = float(((e < _PROP_FLOOR) | (e > _PROP_CEIL)).mean())
    if frac > 0.05:
        warnings.warn(
            f"{frac:.1%} of propensities fall outside [{_PROP_FLOOR}, {_PROP_CEIL}]",
            PositivityWarning,
        )


def _ess(w: np.ndarray) -> float:
    return float(w.sum() ** 2 / (w @ w))


def _balance_binary(T, X, names, w) -> dict:
    out = {}
    treated = T == 1
    for j, name in enumerate(names):
        x = X[:, j]
        m1 = float(np.average(x[treated], weights=w[treated]))
        m0 = float(np.average(x[~treated], weights=w[~treated]))
        pooled = math.sqrt((x[treated].var(ddof=1) + x[~treated].var(ddof=1)) / 2.0)
        out[name] = abs(m1 - m0) / pooled if pooled > 0 else 0.0
    return out


def _balance_continuous(T, X, names, w) -> dict:
    out = {}
    t_mean = float(np.average(T, weights=w))
    t_sd = math.sqrt(float(np.average((T - t_mean) ** 2, weights=w)))
    for j, name in enumerate(names):
        x = X[:, j]
        x_mean = float(np.average(x, weights=w))
        x_sd = math.sqrt(float(np.average((x - x_mean) ** 2, weights=w)))
        cov = float(np.average((T - t_mean) * (x - x_mean), weights=w))
        out[name] = cov / (t_sd * x_sd) if t_sd > 0 and x_sd > 0 else 0.0
    return out


def _validate_treatment(T: np.ndarray, kind: str):
    if kind == "binary":
        if not set(np.unique(T)).issubset({0.0, 1.0}):
            raise DataError("binary treatment must be coded 0/1")
        if T.min() == T.max():
            raise DataError("treatment has a single arm; both arms are required")
    else:
        if T.var() <= 0:
            raise DataError("continuous treatment has zero variance")


def _finish(method, T, Xs_names, X_raw, kind, raw_weights, treatment_name, diagnostics,
            truncate_percentile):
    w, n_truncated = _truncate_and_normalize(raw_weights, truncate_percentile)
    balance = (_balance_binary if kind == "binary" else _balance_continuous)(T, X_raw, Xs_names, w)
    return WeightSet(
        weights=w,
        method=method,
        treatment_name=treatment_name,
        treatment_type=kind,
        balance=balance,
        ess=_ess(w),
        n_truncated=n_truncated,
        diagnostics=diagnostics,
    )


# ---------------------------------------------------------------------------
# Weight constructors


def iptw_weights(
    treatment: np.ndarray,
    covariates: Mapping[str, np.ndarray],
    treatment_name: str = "treatment",
    treatment_type: str | None = None,
    truncate_percentile: float = TRUNCATE_PERCENTILE_DEFAULT,
) -> WeightSet:
    """Stabilized inverse-propensity weights.

    Binary treatments fit a logistic propensity; continuous treatments fit a
    Gaussian linear conditional density and weight by the marginal-to-
    conditional density ratio.
    """
    T = np.asarray(treatment, dtype=np.float64)
    names, X = _as_matrix(covariates)
    kind = _infer_treatment_type(T, treatment_type)
    _validate_treatment(T, kind)
    F = np.column_stack([np.ones(len(T)), _standardize(X)])
    if kind == "binary":
        _, e = _logistic_fit(F, T)
        _check_positivity(e)
        raw = _stabilized_binary(T, e)
        diag = {"propensity": e}
    else:
        gamma, s2 = _ols_fit(F, T)
        raw = _stabilized_continuous(T, F @ gamma, s2)
        diag = {"conditional_mean": F @ gamma, "conditional_var": s2}
    return _finish(METHOD_IPTW, T, names, X, kind, raw, treatment_name, diag, truncate_percentile)


def _cbps_moments_binary(gamma, F, T):
    eta = F @ gamma
    e = 1.0 / (1.0 + np.exp(-eta))
    e = np.clip(e, 1e-12, 1.0 - 1e-12)
    n = len(T)
    g_score = F.T @ (T - e) / n
    g_balance = F.T @ (T / e - (1.0 - T) / (1.0 - e)) / n
    return np.concatenate([g_score, g_balance]), e


def cbps_weights(
    treatment: np.ndarray,
    covariates: Mapping[str, np.ndarray],
    treatment_name: str = "treatment",
    treatment_type: str | None = None,
    tol: float = 1e-8,
    truncate_percentile: float = TRUNCATE_PERCENTILE_DEFAULT,
) -> WeightSet:
    """Balance-constrained propensity weights.

    The propensity parameters solve stacked moment conditions: the score
    equations of the propensity model plus exact-balance moments (equal
    weighted covariate means across arms for binary treatments; zero weighted
    treatment-covariate covariance for continuous ones). The over-identified
    system is solved by minimizing the squared norm of the moment vector.
    """
    T = np.asarray(treatment, dtype=np.float64)
    names, X = _as_matrix(covariates)
    kind = _infer_treatment_type(T, treatment_type)
    _validate_treatment(T, kind)
    F = np.column_stack([np.ones(len(T)), _standardize(X)])
    n = len(T)

    if kind == "binary":
        gamma0, _ = _logistic_fit(F, T)

        def objective(gamma):
            g, e = _cbps_moments_binary(gamma, F, T)
            d_score = -(F.T * (e * (1.0 - e))) @ F / n
            d_balance = -(F.T * (T * (1.0 - e) / e + (1.0 - T) * e / (1.0 - e))) @ F / n
            J = np.vstack([d_score, d_balance])
            return float(g @ g), 2.0 * J.T @ g

        res = minimize(objective, gamma0, jac=True, method="L-BFGS-B",
                       options={"maxiter": 500, "ftol": 1e-16, "gtol": tol})
        g_final, e = _cbps_moments_binary(res.x, F, T)
        if not res.success and float(np.abs(res.jac).max()) > 1e-6:
            raise ConvergenceError(
                f"balance optimization did not converge; final moment norm {np.abs(g_final).max():.3e}"
            )
        _check_positivity(e)
        raw = _stabilized_binary(T, e)
        diag = {"propensity": e, "moment_norm": float(np.abs(g_final).max())}
    else:
        gamma0, _ = _ols_fit(F, T)
        Xs = _standardize(X)

        def moments(gamma):
            resid = T - F @ gamma
            s2 = max(float(resid @ resid) / n, 1e-12)
            w = _stabilized_continuous(T, F @ gamma, s2)
            g_score = F.T @ resid / n
            t_mean = float(np.average(T, weights=w))
            x_mean = np.average(Xs, axis=0, weights=w)
            g_balance = (w * (T - t_mean)) @ (Xs - x_mean) / n
            return np.concatenate([g_score, g_balance]), w, s2

        def objective(gamma):
            g, _, _ = moments(gamma)
            return float(g @ g)

        res = minimize(objective, gamma0, method="L-BFGS-B",
                       options={"maxiter": 500, "ftol": 1e-16, "gtol": tol})
        g_final, w_raw, s2 = moments(res.x)
        if not res.success and float(np.abs(g_final).max()) > 1e-6:
            raise ConvergenceError(
                f"balance optimization did not converge; final moment norm {np.abs(g_final).max():.3e}"
            )
        raw = w_raw
        diag = {"conditional_var": s2, "moment_norm": float(np.abs(g_final).max())}

    return _finish(METHOD_CBPS, T, names, X, kind, raw, treatment_name, diag, truncate_percentile)


# ---------------------------------------------------------------------------
# Super learner


@dataclass(frozen=True)
class _Candidate:
    name: str
    expand: Callable  # standardized X -> feature matrix (with intercept)


def _feat_null(Xs):
    return np.ones((len(Xs), 1))


def _feat_main(Xs):
    return np.column_stack([np.ones(len(Xs)), Xs])


def _feat_quad(Xs):
    return np.column_stack([np.ones(len(Xs)), Xs, Xs**2])


DEFAULT_CANDIDATES = (
    _Candidate("main_effects", _feat_main),
    _Candidate("with_squares", _feat_quad),
    _Candidate("intercept_only", _feat_null),
)


def _cv_folds(n: int, folds: int, seed: int):
    order = np.random.default_rng(np.random.SeedSequence([seed, 7])).permutation(n)
    return [np.sort(chunk) for chunk in np.array_split(order, folds)]


def super_learner_weights(
    treatment: np.ndarray,
    covariates: Mapping[str, np.ndarray],
    folds: int = 5,
    seed: int = 0,
    treatment_name: str = "treatment",
    treatment_type: str | None = None,
    candidates: Sequence[_Candidate] = DEFAULT_CANDIDATES,
    truncate_percentile: float = TRUNCATE_PERCENTILE_DEFAULT,
) -> WeightSet:
    """Cross-validated convex stacking of candidate propensity models.

    Candidate predictions are combined with simplex-constrained coefficients
    minimizing cross-validated negative log-likelihood (binary) or squared
    error (continuous); the ensemble propensity then feeds the stabilized
    inverse-propensity weight formula. Candidates that fail on any fold are
    dropped with a warning.
    """
    T = np.asarray(treatment, dtype=np.float64)
    names, X = _as_matrix(covariates)
    kind = _infer_treatment_type(T, treatment_type)
    _validate_treatment(T, kind)
    if len(candidates) < 1:
        raise DataError("at least one candidate propensity model is required")
    Xs = _standardize(X)
    n = len(T)
    fold_rows = _cv_folds(n, folds, seed)

    def fit_predict(feats_train, t_train, feats_test):
        if kind == "binary":
            beta, _ = _logistic_fit(feats_train, t_train)
            return 1.0 / (1.0 + np.exp(-(feats_test @ beta)))
        gamma, _ = _ols_fit(feats_train, t_train)
        return feats_test @ gamma

    cv_preds = {}
    for cand in candidates:
        preds = np.empty(n)
        try:
            feats = cand.expand(Xs)
            for test in fold_rows:
                train = np.setdiff1d(np.arange(n), test)
                if kind == "binary" and len(np.unique(T[train])) < 2:
                    raise DataError("single-arm training fold")
                preds[test] = fit_predict(feats[train], T[train], feats[test])
        except (DataError, PositivityError, np.linalg.LinAlgError) as exc:
            warnings.warn(f"dropping candidate {cand.name!r}: {exc}", CandidateDropWarning)
            continue
        cv_preds[cand.name] = preds
    if not cv_preds:
        raise DataError("all candidate propensity models failed")

    kept = [c for c in candidates if c.name in cv_preds]
    P = np.column_stack([cv_preds[c.name] for c in kept])

    if kind == "binary":
        def cv_loss(coefs):
            p = np.clip(P @ coefs, 1e-10, 1.0 - 1e-10)
            return float(-(T @ np.log(p) + (1.0 - T) @ np.log(1.0 - p)) / n)
    else:
        def cv_loss(coefs):
            return float(((T - P @ coefs) ** 2).mean())

    K = len(kept)
    if K == 1:
        coefs = np.array([1.0])
    else:
        res = minimize(
            cv_loss, np.full(K, 1.0 / K), method="SLSQP",
            bounds=[(0.0, 1.0)] * K,
            constraints=[{"type": "eq", "fun": lambda c: c.sum() - 1.0}],
            options={"maxiter": 500, "ftol": 1e-14},
        )
        coefs = np.clip(res.x, 0.0, 1.0)
        coefs = coefs / coefs.sum()

    full_preds = np.column_stack([fit_predict(c.expand(Xs), T, c.expand(Xs)) for c in kept])
    ensemble = full_preds @ coefs

    diag = {
        "stacking": {c.name: float(w) for c, w in zip(kept, coefs)},
        "cv_loss": cv_loss(coefs),
        "candidate_cv_loss": {
            c.name: cv_loss(np.eye(K)[j]) for j, c in enumerate(kept)
        },
    }
    if kind == "binary":
        e = np.clip(ensemble, 1e-12, 1.0 - 1e-12)
        _check_positivity(e)
        raw = _stabilized_binary(T, e)
        diag["propensity"] = e
    else:
        resid = T - ensemble
        s2 = max(float(resid @ resid) / n, 1e-12)
        raw = _stabilized_continuous(T, ensemble, s2)
        diag["conditional_var"] = s2
    return _finish(METHOD_SUPER_LEARNER, T, names, X, kind, raw, treatment_name, diag, truncate_percentile)


# ---------------------------------------------------------------------------
# Effect estimation


def weighted_effect(
    outcome: np.ndarray,
    treatment: np.ndarray,
    weights: WeightSet,
    controls: Mapping[str, np.ndarray] | None = None,
    population: np.ndarray | None = None,
) -> CausalEstimate:
    """Weight-multiplied negative binomial regression of a count outcome.

    The estimate is the treatment coefficient with a heteroskedasticity-robust
    sandwich SE; the offset is log population when populations are supplied.
    """
    y = np.asarray(outcome, dtype=np.float64)
    T = np.asarray(treatment, dtype=np.float64)
    names = [weights.treatment_name]
    cols = [T]
    for name, col in (controls or {}).items():
        names.append(name)
        cols.append(np.asarray(col, dtype=np.float64))
    offset = np.log(np.asarray(population, dtype=np.float64)) if population is not None else None
    design = DesignTable.from_arrays(y, np.column_stack(cols), names, offset=offset)
    fit = fit_nb_glm(design, weights=weights.weights, robust_cluster="rows")
    if not fit.convergence.converged:
        raise ConvergenceError(f"weighted outcome regression did not converge: {fit.convergence.status}")
    j = fit.terms.index(weights.treatment_name)
    est = float(fit.beta[j])
    se = float(fit.robust_se[j])
    z = est / se
    p = 2.0 * (1.0 - ndtr(abs(z)))
    return CausalEstimate(
        method=weights.method,
        treatment=weights.treatment_name,
        estimate=est,
        se=se,
        z=z,
        p=float(p),
    )


def weighted_mean_difference(outcome, treatment, weights: WeightSet) -> float:
    """Weighted difference in outcome means between arms (binary treatments)."""
    if weights.treatment_type != "binary":
        raise DataError("weighted_mean_difference requires a binary treatment")
    y = np.asarray(outcome, dtype=np.float64)
    T = np.asarray(treatment, dtype=np.float64)
    w = weights.weights
    treated = T == 1
    return float(np.average(y[treated], weights=w[treated]) - np.average(y[~treated], weights=w[~treated]))
