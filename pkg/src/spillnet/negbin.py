"""Negative binomial count models with log link and offsets.

Two fitters share the same mean-dispersion parameterization,
Var(y) = mu + alpha * mu^2, with the dispersion reported as ln(alpha):

  fit_nb_glm    fixed effects only; alternating IRLS for the coefficients and
                Newton steps for ln(alpha).
  fit_nb_mixed  adds nested Gaussian random intercepts (group and/or region).
                The marginal likelihood is approximated by the Laplace method
                with an exact analytic gradient of the approximated objective,
                optimized by L-BFGS-B.

Sandwich (cluster-robust) standard errors are available for both.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Mapping, Sequence

import numpy as np
from scipy.linalg import qr as _qr_pivot
from scipy.optimize import minimize
from scipy.special import digamma, gammaln, ndtr, polygamma

from .errors import ColumnError, ConvergenceError, DataError, RankError
from .panel import DesignTable

LN_ALPHA_MIN = math.log(1e-8)
LN_ALPHA_MAX = math.log(1e6)
LOG_VAR_MIN = math.log(1e-10)
LOG_VAR_MAX = math.log(1e4)

_MAX_ETA = 690.0  # exp() overflow guard


@dataclass(frozen=True)
class ConvergenceRecord:
    status: str
    iterations: int
    grad_norm: float
    boundary: tuple[str, ...] = ()
    notes: tuple[str, ...] = ()

    @property
    def converged(self) -> bool:
        return self.status.startswith("converged")


@dataclass(frozen=True, eq=False)
class FitResult:
    """Fitted negative binomial model.

    ``mu`` holds fixed-effects-only fitted means; for mixed fits
    ``mu_conditional`` additionally includes the estimated random-intercept
    modes. ``z`` and ``p`` use robust SEs when available, model SEs otherwise.
    """

    model: str
    terms: tuple[str, ...]
    beta: np.ndarray
    se: np.ndarray
    robust_se: np.ndarray | None
    z: np.ndarray
    p: np.ndarray
    ln_alpha: float
    ln_alpha_se: float
    variance_components: dict
    loglik: float
    mu: np.ndarray
    mu_conditional: np.ndarray | None
    group_effects: dict | None
    region_effects: dict | None
    convergence: ConvergenceRecord
    n_obs: int
    cluster_level: str | None

    def __post_init__(self):
        pnum = len(self.terms)
        if not (len(self.beta) == len(self.se) == len(self.z) == len(self.p) == pnum):
            raise DataError("coefficient vectors must match the term list")
        if self.robust_se is not None and len(self.robust_se) != pnum:
            raise DataError("robust_se length must match the term list")
        if (np.asarray(self.se) <= 0).any():
            raise DataError("model SEs must be positive")
        if self.robust_se is not None and (np.asarray(self.robust_se) <= 0).any():
            raise DataError("robust SEs must be positive")
        for level, (est, _se) in self.variance_components.items():
            if est < 0:
                raise DataError(f"variance component for {level!r} is negative")
        if (self.mu <= 0).any():
            raise DataError("fitted means must be positive")

    @property
    def alpha(self) -> float:
        return math.exp(self.ln_alpha)


# ---------------------------------------------------------------------------
# NB2 likelihood pieces


def _nb_ll_terms(y, eta, k):
    mu = np.exp(np.minimum(eta, _MAX_ETA))
    return gammaln(y + k) - gammaln(k) - gammaln(y + 1.0) + k * np.log(k) + y * eta - (y + k) * np.log(k + mu)


def _eta_derivs(y, mu, k):
    """Per-observation first and (negated) second derivatives in eta.

    Written in ratio form (mu/(k+mu) and k/(k+mu) are bounded in [0,1]) so
    nothing overflows even when the optimizer probes extreme linear predictors.
    """
    f = mu / (k + mu)
    g = 1.0 - f
    s = y * g - k * f
    w = (y + k) * f * g
    return s, w


def _dispersion_derivs(y, mu, k, wts):
    """Weighted d/dk and d2/dk2 of the log-likelihood at fixed eta."""
    denom = k + mu
    f1 = wts @ (digamma(y + k) - digamma(k) + np.log(k) - np.log(denom) + 1.0 - (y + k) / denom)
    f2 = wts @ (polygamma(1, y + k) - polygamma(1, k) + 1.0 / k - 1.0 / denom - (mu - y) / denom / denom)
    return float(f1), float(f2)


def loglik_and_score(y, X, offset, beta, ln_alpha, weights=None):
    """Weighted NB2 log-likelihood and analytic score in (beta, ln_alpha)."""
    y = np.asarray(y, dtype=np.float64)
    X = np.asarray(X, dtype=np.float64)
    offset = np.asarray(offset, dtype=np.float64)
    wts = np.ones_like(y) if weights is None else np.asarray(weights, dtype=np.float64)
    k = math.exp(-ln_alpha)
    eta = X @ beta + offset
    mu = np.exp(np.minimum(eta, _MAX_ETA))
    ll = float(wts @ _nb_ll_terms(y, eta, k))
    s, _ = _eta_derivs(y, mu, k)
    grad_beta = X.T @ (wts * s)
    f1, _ = _dispersion_derivs(y, mu, k, wts)
    grad_t = -k * f1
    return ll, np.concatenate([grad_beta, [grad_t]])


# ---------------------------------------------------------------------------
# Rank and input validation


def _check_full_rank(X, names):
    if not np.isfinite(X).all():
        raise DataError("design matrix contains non-finite values")
    svals = np.linalg.svd(X, compute_uv=False)
    tol = svals[0] * max(X.shape) * np.finfo(float).eps if svals[0] > 0 else 0.0
    rank = int((svals > tol).sum())
    if rank == X.shape[1]:
        return
    _, _, piv = _qr_pivot(X, mode="economic", pivoting=True)
    dependent = list(piv[rank:])
    involved = {names[j] for j in dependent}
    indep = list(piv[:rank])
    Xi = X[:, indep]
    for j in dependent:
        coef, *_ = np.linalg.lstsq(Xi, X[:, j], rcond=None)
        scale = max(1.0, float(np.abs(X[:, j]).max()))
        for cval, idx in zip(coef, indep):
            if abs(cval) > 1e-8 * scale:
                involved.add(names[idx])
    raise RankError(f"design is rank deficient; collinear columns: {sorted(involved)}")


def _validate_outcome(y):
    if (y < 0).any():
        raise DataError("outcome counts must be nonnegative")
    if not (y > 0).any():
        raise DataError("outcome is all zero; nothing to fit")


# ---------------------------------------------------------------------------
# Fixed-effects GLM


def _poisson_irls(y, X, offset, wts, names, max_iter=100, tol=1e-10):
    beta = np.zeros(X.shape[1])
    if "const" in names:
        mean_rate = float(wts @ y) / max(float(wts @ np.exp(np.minimum(offset, _MAX_ETA))), 1e-300)
        beta[names.index("const")] = math.log(max(mean_rate, 1e-300))

    def pois_ll(b):
        eta = X @ b + offset
        mu = np.exp(np.minimum(eta, _MAX_ETA))
        return float(wts @ (y * eta - mu))

    ll = pois_ll(beta)
    for _ in range(max_iter):
        eta = X @ beta + offset
        mu = np.exp(np.minimum(eta, _MAX_ETA))
        W = wts * mu
        z = (eta - offset) + (y - mu) / mu
        new = _wls_solve(X, W, z, [])
        step = 1.0
        for _ in range(40):
            cand = beta + step * (new - beta)
            ll_new = pois_ll(cand)
            if np.isfinite(ll_new) and ll_new >= ll - 1e-12 * abs(ll):
                break
            step *= 0.5
        delta = float(np.abs(step * (new - beta)).max())
        beta = beta + step * (new - beta)
        ll = ll_new
        if delta < tol:
            break
    return beta


def _wls_solve(X, W, z, notes):
    A = X.T @ (W[:, None] * X)
    b = X.T @ (W * z)
    try:
        return np.linalg.solve(A, b)
    except np.linalg.LinAlgError:
        ridge = 1e-8 * max(float(np.trace(A)) / A.shape[0], 1.0)
        notes.append("ridge applied to near-singular weighted normal equations")
        return np.linalg.solve(A + ridge * np.eye(A.shape[0]), b)


def _irls_nb(y, X, offset, k, beta, wts, notes, max_iter=100, tol=1e-10):
    def nb_ll(b):
        return float(wts @ _nb_ll_terms(y, X @ b + offset, k))

    ll = nb_ll(beta)
    for _ in range(max_iter):
        eta = X @ beta + offset
        mu = np.exp(np.minimum(eta, _MAX_ETA))
        W = wts * k * (mu / (k + mu))
        z = (eta - offset) + (y - mu) / mu
        new = _wls_solve(X, W, z, notes)
        step = 1.0
        for _ in range(40):
            cand = beta + step * (new - beta)
            ll_new = nb_ll(cand)
            if np.isfinite(ll_new) and ll_new >= ll - 1e-12 * abs(ll):
                break
            step *= 0.5
        delta = float(np.abs(step * (new - beta)).max())
        beta = beta + step * (new - beta)
        ll = ll_new
        if delta < tol:
            break
    return beta


def _newton_ln_alpha(y, mu, t, wts, max_iter=100, tol=1e-10):
    def nb_ll_t(tv):
        kv = math.exp(-tv)
        return float(wts @ (gammaln(y + kv) - gammaln(kv) + kv * math.log(kv)
                            + y * np.log(mu) - (y + kv) * np.log(kv + mu)))

    ll = nb_ll_t(t)
    at_bound = False
    for _ in range(max_iter):
        k = math.exp(-t)
        f1, f2 = _dispersion_derivs(y, mu, k, wts)
        score = -k * f1
        hess = k * k * f2 + k * f1
        step = -score / hess if hess < -1e-12 else math.copysign(0.1, score)
        t_new = min(max(t + step, LN_ALPHA_MIN), LN_ALPHA_MAX)
        frac = 1.0
        while frac > 1e-8:
            cand = t + frac * (t_new - t)
            ll_new = nb_ll_t(cand)
            if np.isfinite(ll_new) and ll_new >= ll - 1e-12 * abs(ll):
                break
            frac *= 0.5
        cand = t + frac * (t_new - t)
        delta = abs(cand - t)
        t = cand
        ll = nb_ll_t(t)
        if delta < tol:
            break
    # alpha <= 1e-7 is numerically the equidispersed (Poisson) limit: the
    # surface flattens there and the step can stall just above the hard bound
    at_bound = t <= max(LN_ALPHA_MIN + 1e-8, math.log(1e-7)) or t >= LN_ALPHA_MAX - 1e-8
    return t, at_bound


_CLUSTER_LEVELS = ("rows", "group", "region")


def _cluster_codes(design: DesignTable, level: str) -> np.ndarray:
    if level == "rows":
        return np.arange(design.n, dtype=np.int64)
    if level == "group":
        return design.group_codes
    if level == "region":
        return design.region_codes
    raise DataError(f"cluster level must be one of {_CLUSTER_LEVELS}, got {level!r}")


def _glm_sandwich(X, per_row_scores, W, clusters):
    n_clusters = int(clusters.max()) + 1 if len(clusters) else 0
    if n_clusters < 2:
        raise DataError("robust SEs need at least 2 clusters")
    A = X.T @ (W[:, None] * X)
    S = np.zeros((n_clusters, X.shape[1]))
    np.add.at(S, clusters, X * per_row_scores[:, None])
    B = S.T @ S
    Ainv = np.linalg.inv(A)
    V = Ainv @ B @ Ainv * (n_clusters / (n_clusters - 1))
    return np.sqrt(np.diag(V))


def _z_and_p(beta, se):
    z = beta / se
    p = 2.0 * (1.0 - ndtr(np.abs(z)))
    return z, p


def fit_nb_glm(
    design: DesignTable,
    weights: np.ndarray | None = None,
    robust_cluster: str | None = "rows",
    tol: float = 1e-8,
    max_outer: int = 200,
    init_ln_alpha: float = math.log(0.5),
) -> FitResult:
    """Maximum likelihood NB2 GLM with log link and the design's offset.

    Convergence: the max absolute parameter change across one alternation of
    IRLS (coefficients) and Newton (ln alpha) falls below ``tol``, up to
    ``max_outer`` alternations. Non-convergence is reported in the result's
    convergence record, not raised.
    """
    y, X, offset = design.y, design.X, design.offset
    _validate_outcome(y)
    _check_full_rank(X, list(design.x_names))
    wts = np.ones_like(y) if weights is None else np.asarray(weights, dtype=np.float64)
    if (wts < 0).any():
        raise DataError("observation weights must be nonnegative")

    notes: list[str] = []
    beta = _poisson_irls(y, X, offset, wts, list(design.x_names))
    t = min(max(init_ln_alpha, LN_ALPHA_MIN), LN_ALPHA_MAX)

    status = "max_iterations"
    iterations = max_outer
    at_bound = False
    for outer in range(1, max_outer + 1):
        k = math.exp(-t)
        beta_new = _irls_nb(y, X, offset, k, beta, wts, notes)
        mu = np.exp(np.minimum(X @ beta_new + offset, _MAX_ETA))
        t_new, at_bound = _newton_ln_alpha(y, mu, t, wts)
        delta = max(float(np.abs(beta_new - beta).max()), abs(t_new - t))
        beta, t = beta_new, t_new
        if delta < tol:
            status = "converged"
            iterations = outer
            break

    k = math.exp(-t)
    eta = X @ beta + offset
    mu = np.exp(np.minimum(eta, _MAX_ETA))
    ll, score = loglik_and_score(y, X, offset, beta, t, wts)
    grad = score.copy()
    if at_bound:
        grad[-1] = 0.0  # projected at the dispersion bound
    grad_norm = float(np.abs(grad).max())

    s, _ = _eta_derivs(y, mu, k)
    W = wts * k * (mu / (k + mu))
    A = X.T @ (W[:, None] * X)
    cov = np.linalg.inv(A)
    se = np.sqrt(np.diag(cov))

    f1, f2 = _dispersion_derivs(y, mu, k, wts)
    hess_t = k * k * f2 + k * f1
    ln_alpha_se = math.sqrt(-1.0 / hess_t) if (hess_t < 0 and not at_bound) else float("nan")

    robust = None
    if robust_cluster is not None:
        clusters = _cluster_codes(design, robust_cluster)
        robust = _glm_sandwich(X, wts * s, W, clusters)

    z, p = _z_and_p(beta, robust if robust is not None else se)
    boundary = ("ln_alpha",) if at_bound else ()
    return FitResult(
        model="nb_glm",
        terms=design.x_names,
        beta=beta,
        se=se,
        robust_se=robust,
        z=z,
        p=p,
        ln_alpha=t,
        ln_alpha_se=ln_alpha_se,
        variance_components={},
        loglik=ll,
        mu=mu,
        mu_conditional=None,
        group_effects=None,
        region_effects=None,
        convergence=ConvergenceRecord(status, iterations, grad_norm, boundary, tuple(notes)),
        n_obs=design.n,
        cluster_level=robust_cluster,
    )


# ---------------------------------------------------------------------------
# Laplace-approximate nested random intercepts


@dataclass
class _Block:
    """Rows belonging to one top-level cluster, with local region coding."""

    label: str
    rows: np.ndarray
    X: np.ndarray
    y: np.ndarray
    offset: np.ndarray
    reg: np.ndarray | None      # local region codes, None for 1-level models
    region_labels: tuple[str, ...]
    n_regions: int


def _build_blocks(design: DesignTable, levels: tuple[str, ...]) -> list[_Block]:
    if levels == ("group", "region"):
        top_codes, top_labels = design.group_codes, design.group_labels
        region_group = {}
        for rc, gc in zip(design.region_codes, design.group_codes):
            if region_group.setdefault(int(rc), int(gc)) != int(gc):
                raise DataError(
                    f"region {design.region_labels[rc]!r} appears in multiple groups; "
                    "regions must be nested in groups"
                )
    elif levels == ("group",):
        top_codes, top_labels = design.group_codes, design.group_labels
    elif levels == ("region",):
        top_codes, top_labels = design.region_codes, design.region_labels
    else:
        raise DataError(f"unsupported random levels {levels!r}")

    blocks = []
    for code in range(int(top_codes.max()) + 1):
        rows = np.nonzero(top_codes == code)[0]
        if len(rows) == 0:
            continue
        reg = None
        region_labels: tuple[str, ...] = ()
        n_regions = 0
        if levels == ("group", "region"):
            local: dict[int, int] = {}
            reg = np.empty(len(rows), dtype=np.int64)
            for j, i in enumerate(rows):
                rc = int(design.region_codes[i])
                if rc not in local:
                    local[rc] = len(local)
                reg[j] = local[rc]
            n_regions = len(local)
            region_labels = tuple(design.region_labels[rc] for rc in local)
        blocks.append(_Block(
            label=top_labels[code],
            rows=rows,
            X=design.X[rows],
            y=design.y[rows],
            offset=design.offset[rows],
            reg=reg,
            region_labels=region_labels,
            n_regions=n_regions,
        ))
    return blocks


def _arrow_solve(c, D, schur, rhs_u, rhs_v):
    du = (rhs_u - float((c * rhs_v / D).sum())) / schur
    dv = (rhs_v - c * du) / D
    return du, dv


def _find_mode_two(block, beta, k, s2u, s2v, u, v, tol=1e-11, max_iter=200):
    a0 = block.X @ beta + block.offset
    y, reg, R = block.y, block.reg, block.n_regions

    def pen_ll(uv, vv):
        eta = a0 + uv + vv[reg]
        ll = float(_nb_ll_terms(y, eta, k).sum())
        return ll - uv * uv / (2 * s2u) - float(vv @ vv) / (2 * s2v)

    P = pen_ll(u, v)
    if not np.isfinite(P):
        u, v = 0.0, np.zeros(R)
        P = pen_ll(u, v)
    for _ in range(max_iter):
        eta = a0 + u + v[reg]
        mu = np.exp(np.minimum(eta, _MAX_ETA))
        s, w = _eta_derivs(y, mu, k)
        gu = float(s.sum()) - u / s2u
        gv = np.bincount(reg, weights=s, minlength=R) - v / s2v
        if max(abs(gu), float(np.abs(gv).max()) if R else 0.0) < tol:
            break
        c = np.bincount(reg, weights=w, minlength=R)
        D = c + 1.0 / s2v
        h00 = float(w.sum()) + 1.0 / s2u
        schur = h00 - float((c * c / D).sum())
        du, dv = _arrow_solve(c, D, schur, gu, gv)
        step = 1.0
        improved = False
        while step > 1e-10:
            P_new = pen_ll(u + step * du, v + step * dv)
            if np.isfinite(P_new) and P_new >= P - 1e-13 * abs(P):
                improved = True
                break
            step *= 0.5
        if not improved:
            break
        u, v = u + step * du, v + step * dv
        P = P_new
    return u, v


def _laplace_two(block, beta, t, au, av, mode, want_grad):
    """Laplace log-likelihood (and exact gradient) for one two-level block."""
    k = math.exp(-t)
    s2u, s2v = math.exp(au), math.exp(av)
    u, v = _find_mode_two(block, beta, k, s2u, s2v, *mode)
    X, y, reg, R = block.X, block.y, block.reg, block.n_regions

    eta = X @ beta + block.offset + u + v[reg]
    mu = np.exp(np.minimum(eta, _MAX_ETA))
    denom = k + mu
    P = float(_nb_ll_terms(y, eta, k).sum()) - u * u / (2 * s2u) - float(v @ v) / (2 * s2v)

    s, w = _eta_derivs(y, mu, k)
    c = np.bincount(reg, weights=w, minlength=R)
    D = c + 1.0 / s2v
    h00 = float(w.sum()) + 1.0 / s2u
    cD = c / D
    schur = h00 - float(c @ cD)
    logdet = math.log(schur) + float(np.log(D).sum())
    ll = P - 0.5 * logdet - 0.5 * au - 0.5 * R * av

    if not want_grad:
        return ll, None, (u, v)

    # H^{-1} entries on the arrow sparsity
    Hi00 = 1.0 / schur
    Hi0r = -cD / schur
    Hirr = 1.0 / D + cD * cD / schur
    coefr = 2.0 * Hi0r + Hirr

    f = mu / denom
    g = 1.0 - f
    fg = f * g
    d = (y + k) * fg * (g - f)
    q = -fg * (y - mu)
    m = -fg * (y * (f - g) + 2.0 * k * f)
    dll_dk = digamma(y + k) - digamma(k) + math.log(k) - np.log(denom) + 1.0 - (y + k) / denom

    delta_r = np.bincount(reg, weights=d, minlength=R)
    T_u = Hi00 * float(delta_r.sum()) + float(coefr @ delta_r)
    T_v = delta_r * (Hi00 + 2.0 * Hi0r + Hirr)
    lam_u, lam_v = _arrow_solve(c, D, schur, T_u, T_v)

    p = X.shape[1]
    GammaR = np.zeros((R, p))
    np.add.at(GammaR, reg, d[:, None] * X)
    WXR = np.zeros((R, p))
    np.add.at(WXR, reg, w[:, None] * X)
    trace_beta = Hi00 * GammaR.sum(axis=0) + coefr @ GammaR
    shift_beta = -(lam_u * WXR.sum(axis=0) + lam_v @ WXR)
    g_beta = X.T @ s - 0.5 * (trace_beta + shift_beta)

    M_r = np.bincount(reg, weights=m, minlength=R)
    trace_t = Hi00 * float(M_r.sum()) + float(coefr @ M_r)
    q_r = np.bincount(reg, weights=q, minlength=R)
    shift_t = lam_u * float(q.sum()) + float(lam_v @ q_r)
    g_t = -k * float(dll_dk.sum()) - 0.5 * (trace_t + shift_t)

    trace_au = -Hi00 / s2u
    g_au = u * u / (2 * s2u) - 0.5 - 0.5 * (trace_au + lam_u * u / s2u)

    trace_av = -float(Hirr.sum()) / s2v
    g_av = float(v @ v) / (2 * s2v) - 0.5 * R - 0.5 * (trace_av + float(lam_v @ v) / s2v)

    return ll, np.concatenate([g_beta, [g_t, g_au, g_av]]), (u, v)


def _find_mode_one(block, beta, k, s2, u, tol=1e-11, max_iter=200):
    a0 = block.X @ beta + block.offset
    y = block.y

    def pen_ll(uv):
        return float(_nb_ll_terms(y, a0 + uv, k).sum()) - uv * uv / (2 * s2)

    P = pen_ll(u)
    if not np.isfinite(P):
        u = 0.0
        P = pen_ll(u)
    for _ in range(max_iter):
        mu = np.exp(np.minimum(a0 + u, _MAX_ETA))
        s, w = _eta_derivs(y, mu, k)
        g = float(s.sum()) - u / s2
        if abs(g) < tol:
            break
        h = float(w.sum()) + 1.0 / s2
        du = g / h
        step = 1.0
        improved = False
        while step > 1e-10:
            P_new = pen_ll(u + step * du)
            if np.isfinite(P_new) and P_new >= P - 1e-13 * abs(P):
                improved = True
                break
            step *= 0.5
        if not improved:
            break
        u += step * du
        P = P_new
    return u


def _laplace_one(block, beta, t, a, mode, want_grad):
    """Laplace log-likelihood (and exact gradient) for one single-level block."""
    k = math.exp(-t)
    s2 = math.exp(a)
    u = _find_mode_one(block, beta, k, s2, mode[0])
    X, y = block.X, block.y

    eta = X @ beta + block.offset + u
    mu = np.exp(np.minimum(eta, _MAX_ETA))
    denom = k + mu
    P = float(_nb_ll_terms(y, eta, k).sum()) - u * u / (2 * s2)
    s, w = _eta_derivs(y, mu, k)
    h = float(w.sum()) + 1.0 / s2
    ll = P - 0.5 * math.log(h) - 0.5 * a

    if not want_grad:
        return ll, None, (u,)

    f = mu / denom
    g = 1.0 - f
    fg = f * g
    d = (y + k) * fg * (g - f)
    q = -fg * (y - mu)
    m = -fg * (y * (f - g) + 2.0 * k * f)
    dll_dk = digamma(y + k) - digamma(k) + math.log(k) - np.log(denom) + 1.0 - (y + k) / denom

    lam = float(d.sum()) / (h * h)  # H^{-1} tr(H^{-1} dH/du)

    g_beta = X.T @ s - 0.5 * ((X.T @ d) / h + lam * (-(X.T @ w)))
    g_t = -k * float(dll_dk.sum()) - 0.5 * (float(m.sum()) / h + lam * float(q.sum()))
    g_a = u * u / (2 * s2) - 0.5 - 0.5 * ((-1.0 / s2) / h + lam * u / s2)

    return ll, np.concatenate([g_beta, [g_t, g_a]]), (u,)


class _MixedObjective:
    """Total Laplace log-likelihood over blocks with warm-started modes."""

    def __init__(self, blocks, two_level):
        self.blocks = blocks
        self.two = two_level
        self.modes = {
            b.label: ((0.0, np.zeros(b.n_regions)) if two_level else (0.0,))
            for b in blocks
        }

    def value_and_grad(self, theta, want_grad=True):
        p = self.blocks[0].X.shape[1]
        beta = theta[:p]
        t = theta[p]
        total = 0.0
        grad = np.zeros(len(theta)) if want_grad else None
        for block in self.blocks:
            if self.two:
                ll, g, mode = _laplace_two(block, beta, t, theta[p + 1], theta[p + 2],
                                           self.modes[block.label], want_grad)
            else:
                ll, g, mode = _laplace_one(block, beta, t, theta[p + 1],
                                           self.modes[block.label], want_grad)
            self.modes[block.label] = mode
            total += ll
            if want_grad:
                grad += g
        return total, grad

    def per_block_grads(self, theta):
        p = self.blocks[0].X.shape[1]
        beta, t = theta[:p], theta[p]
        out = []
        for block in self.blocks:
            if self.two:
                _, g, _ = _laplace_two(block, beta, t, theta[p + 1], theta[p + 2],
                                       self.modes[block.label], True)
            else:
                _, g, _ = _laplace_one(block, beta, t, theta[p + 1],
                                       self.modes[block.label], True)
            out.append(g)
        return np.array(out)


def laplace_loglik(design: DesignTable, beta, ln_alpha: float, log_variances: Sequence[float]) -> float:
    """Laplace-approximate marginal log-likelihood at the given parameters."""
    levels = design.spec.random_levels
    if not levels:
        raise DataError("design spec has no random levels")
    blocks = _build_blocks(design, levels)
    obj = _MixedObjective(blocks, two_level=len(levels) == 2)
    theta = np.concatenate([np.asarray(beta, dtype=np.float64), [ln_alpha], np.asarray(log_variances, dtype=np.float64)])
    ll, _ = obj.value_and_grad(theta, want_grad=False)
    return ll


def _projected_grad(grad, theta, lower, upper, eps=1e-9):
    proj = grad.copy()
    at_lo = theta <= lower + eps
    at_hi = theta >= upper - eps
    proj[at_lo & (proj < 0)] = 0.0
    proj[at_hi & (proj > 0)] = 0.0
    return proj


def _fd_hessian(obj, theta, free):
    """Central differences of the analytic gradient, free coordinates only."""
    H = np.zeros((len(theta), len(theta)))
    for j in range(len(theta)):
        if not free[j]:
            continue
        h = 1e-5 * max(1.0, abs(theta[j]))
        tp, tm = theta.copy(), theta.copy()
        tp[j] += h
        tm[j] -= h
        _, gp = obj.value_and_grad(tp)
        _, gm = obj.value_and_grad(tm)
        H[:, j] = (gp - gm) / (2 * h)
    return 0.5 * (H + H.T)


def fit_nb_mixed(
    design: DesignTable,
    robust_cluster: str | None = "top",
    tol_grad: float = 1e-6,
    max_iter: int = 500,
    init_ln_alpha: float = math.log(0.5),
    init_log_var: float = math.log(0.1),
) -> FitResult:
    """NB2 model with nested Gaussian random intercepts via Laplace approximation.

    The outer optimization runs L-BFGS-B over (beta, ln alpha, log variances)
    with an exact analytic gradient of the Laplace objective; convergence is
    declared when the projected gradient infinity-norm falls below
    ``tol_grad``. Predictors are standardized internally (gradients and the
    tolerance live on that scale) and estimates are mapped back. Variance
    components collapsing to the lower bound are reported as boundary fits,
    not failures. Robust SEs cluster at the top nesting level.
    """
    levels = design.spec.random_levels
    if not levels:
        raise DataError("design spec has no random levels; use fit_nb_glm")
    y, X = design.y, design.X
    _validate_outcome(y)
    _check_full_rank(X, list(design.x_names))

    two = len(levels) == 2
    n_var = 2 if two else 1
    p = X.shape[1]

    # standardize predictors for a well-conditioned outer problem
    const_idx = design.x_names.index("const") if "const" in design.x_names else None
    center = np.zeros(p)
    scale = np.ones(p)
    for j in range(p):
        if j == const_idx:
            continue
        sd = float(X[:, j].std())
        if sd > 0:
            scale[j] = sd
            if const_idx is not None:
                center[j] = float(X[:, j].mean())
    Xs = (X - center) / scale
    design_std = replace(design, X=Xs)
    blocks = _build_blocks(design_std, levels)

    # beta_orig = Tmat @ beta_std
    Tmat = np.diag(1.0 / scale)
    if const_idx is not None:
        Tmat[const_idx, :] = -center / scale
        Tmat[const_idx, const_idx] = 1.0
    T_full = np.eye(p + 1 + n_var)
    T_full[:p, :p] = Tmat

    wts = np.ones_like(y)
    beta0 = _poisson_irls(y, Xs, design.offset, wts, list(design.x_names))
    theta0 = np.concatenate([beta0, [init_ln_alpha], [init_log_var] * n_var])
    lower = np.concatenate([np.full(p, -np.inf), [LN_ALPHA_MIN], [LOG_VAR_MIN] * n_var])
    upper = np.concatenate([np.full(p, np.inf), [LN_ALPHA_MAX], [LOG_VAR_MAX] * n_var])
    bounds = list(zip(lower, upper))

    obj = _MixedObjective(blocks, two)

    def negative(theta):
        ll, grad = obj.value_and_grad(theta)
        return -ll, -grad

    res = minimize(
        negative, theta0, jac=True, method="L-BFGS-B", bounds=bounds,
        options={"maxiter": max_iter, "maxfun": max_iter * 10, "ftol": 1e-14, "gtol": tol_grad},
    )
    theta = res.x
    nit = int(res.nit)
    ll, grad = obj.value_and_grad(theta)

    var_names = ["log_var_" + lv for lv in levels]
    theta_names = list(design.x_names) + ["ln_alpha"] + var_names

    def boundary_mask(th):
        # a variance within two log units of the floor is an effectively-zero
        # component: the surface is flat there and its gradient is noise
        names = []
        for j in range(p, len(th)):
            near_lo = th[j] <= lower[j] + (2.0 if j > p else 1e-8)
            if j == p:
                near_lo = near_lo or th[j] <= math.log(1e-7)
            if near_lo or th[j] >= upper[j] - 1e-8:
                names.append(theta_names[j])
        return names

    def free_mask(th):
        bnames = boundary_mask(th)
        return np.array([theta_names[j] not in bnames for j in range(len(th))])

    def convergence_norm(th, g):
        proj = _projected_grad(g, th, lower, upper)
        return float(np.abs(proj[free_mask(th)]).max())

    grad_norm = convergence_norm(theta, grad)
    # a fresh L-BFGS memory often shaves the last decade off the gradient
    for _ in range(3):
        if grad_norm <= tol_grad or not res.success:
            break
        res = minimize(
            negative, theta, jac=True, method="L-BFGS-B", bounds=bounds,
            options={"maxiter": max_iter, "maxfun": max_iter * 10, "ftol": 1e-16, "gtol": tol_grad},
        )
        theta = res.x
        nit += int(res.nit)
        ll, grad = obj.value_and_grad(theta)
        grad_norm = convergence_norm(theta, grad)

    notes = [f"optimizer: {res.message if isinstance(res.message, str) else res.message.decode()}"]

    boundary = boundary_mask(theta)
    free = free_mask(theta)
    H = _fd_hessian(obj, theta, free)

    # Newton polish: the quasi-Newton stops on f-precision before the gradient
    # target; a couple of exact Newton steps finish the job
    for _ in range(5):
        if grad_norm <= tol_grad:
            break
        info_try = -H[np.ix_(free, free)]
        try:
            step = np.linalg.solve(info_try, grad[free])
        except np.linalg.LinAlgError:
            break
        cand = theta.copy()
        cand[free] = cand[free] + step
        cand = np.clip(cand, lower, upper)
        ll_new, grad_new = obj.value_and_grad(cand)
        if not np.isfinite(ll_new) or ll_new < ll - 1e-8 * abs(ll):
            break
        theta, ll, grad = cand, ll_new, grad_new
        boundary = boundary_mask(theta)
        free = free_mask(theta)
        grad_norm = convergence_norm(theta, grad)
        H = _fd_hessian(obj, theta, free)

    if grad_norm <= tol_grad:
        status = "converged"
    elif res.success:
        status = "converged (ftol)"
    else:
        status = "max_iterations" if nit >= max_iter else "failed"

    info = -H[np.ix_(free, free)]

    def to_original_se(cov_free_std):
        cov_std = np.zeros((len(theta), len(theta)))
        cov_std[np.ix_(free, free)] = cov_free_std
        cov = T_full @ cov_std @ T_full.T
        diag = np.diag(cov).copy()
        diag[diag < 0] = np.nan
        se = np.sqrt(diag)
        se[~free] = np.nan
        return se

    se_full = np.full(len(theta), np.nan)
    cov_free = None
    try:
        cov_free = np.linalg.inv(info)
        se_full = to_original_se(cov_free)
    except np.linalg.LinAlgError:
        notes.append("observed information not invertible; model SEs unavailable")

    se_beta = se_full[:p]
    if np.isnan(se_beta).any():
        notes.append("ridge fallback for coefficient SEs")
        fallback = np.sqrt(np.abs(1.0 / np.maximum(np.diag(-H)[:p], 1e-8))) / scale
        se_beta = np.where(np.isnan(se_beta), fallback, se_beta)

    # variance components on the variance scale (delta method for SEs)
    variance_components = {}
    for idx, lv in enumerate(levels):
        j = p + 1 + idx
        s2 = math.exp(theta[j])
        se_a = se_full[j]
        variance_components[lv] = (s2, s2 * se_a if np.isfinite(se_a) else float("nan"))

    robust = None
    cluster_name = levels[0] if robust_cluster == "top" else robust_cluster
    if robust_cluster is not None:
        G = len(blocks)
        if G >= 2 and cov_free is not None:
            scores = obj.per_block_grads(theta)[:, free]
            B = scores.T @ scores
            V = cov_free @ B @ cov_free * (G / (G - 1))
            rfull = to_original_se(V)
            robust = rfull[:p]
            if np.isnan(robust).any():
                robust = None
                notes.append("robust covariance not positive; robust SEs unavailable")
        else:
            notes.append("fewer than 2 top-level clusters; robust SEs skipped")

    beta = Tmat @ theta[:p]
    t = float(theta[p])
    mu_fixed = np.exp(np.minimum(X @ beta + design.offset, _MAX_ETA))

    # conditional means from the final modes
    u_by_label = {}
    v_by_label = {}
    eta_cond = X @ beta + design.offset
    for block in blocks:
        mode = obj.modes[block.label]
        u_by_label[block.label] = float(mode[0])
        eta_cond[block.rows] += mode[0]
        if two:
            v = mode[1]
            for lab, val in zip(block.region_labels, v):
                v_by_label[lab] = float(val)
            eta_cond[block.rows] += v[block.reg]
    mu_cond = np.exp(np.minimum(eta_cond, _MAX_ETA))

    if levels == ("region",):
        group_effects, region_effects = None, u_by_label
    elif levels == ("group",):
        group_effects, region_effects = u_by_label, None
    else:
        group_effects, region_effects = u_by_label, v_by_label

    ln_alpha_se = se_full[p] if np.isfinite(se_full[p]) else float("nan")
    z, pvals = _z_and_p(beta, robust if robust is not None else se_beta)

    return FitResult(
        model="nb_mixed",
        terms=design.x_names,
        beta=beta,
        se=se_beta,
        robust_se=robust,
        z=z,
        p=pvals,
        ln_alpha=t,
        ln_alpha_se=ln_alpha_se,
        variance_components=variance_components,
        loglik=ll,
        mu=mu_fixed,
        mu_conditional=mu_cond,
        group_effects=group_effects,
        region_effects=region_effects,
        convergence=ConvergenceRecord(status, nit, grad_norm, tuple(boundary), tuple(notes)),
        n_obs=design.n,
        cluster_level=cluster_name if robust is not None else None,
    )


# ---------------------------------------------------------------------------
# Shared operations


def predict_mu(fit: FitResult, design: DesignTable, include_random_effects: bool = False) -> np.ndarray:
    """Fitted means for a design; random effects default to 0 (fixed effects only).

    With ``include_random_effects`` the estimated modes are added where the
    row's group/region was seen in the fit; unseen labels contribute 0.
    """
    if design.x_names != fit.terms:
        raise ColumnError(f"design columns {design.x_names} do not match fit terms {fit.terms}")
    eta = design.X @ fit.beta + design.offset
    if include_random_effects:
        if fit.group_effects:
            eta = eta + np.array([fit.group_effects.get(design.group_labels[c], 0.0)
                                  for c in design.group_codes])
        if fit.region_effects:
            eta = eta + np.array([fit.region_effects.get(design.region_labels[c], 0.0)
                                  for c in design.region_codes])
    return np.exp(np.minimum(eta, _MAX_ETA))


def robust_se(fit: FitResult, design: DesignTable, cluster_level: str = "group") -> np.ndarray:
    """Sandwich standard errors for the coefficient block.

    GLM fits accept 'rows', 'group', or 'region' clustering; mixed fits are
    clustered at their top nesting level.
    """
    if not fit.convergence.converged:
        raise ConvergenceError("robust SEs require a converged fit")
    if fit.model == "nb_glm":
        k = math.exp(-fit.ln_alpha)
        mu = np.exp(np.minimum(design.X @ fit.beta + design.offset, _MAX_ETA))
        s, _ = _eta_derivs(design.y, mu, k)
        W = k * (mu / (k + mu))
        clusters = _cluster_codes(design, cluster_level)
        return _glm_sandwich(design.X, s, W, clusters)
    levels = design.spec.random_levels
    if cluster_level not in ("top", levels[0]):
        raise DataError(f"mixed-model robust SEs cluster at the top level {levels[0]!r}")
    refit = fit_nb_mixed(design, robust_cluster="top")
    if refit.robust_se is None:
        raise DataError("robust SEs unavailable (fewer than 2 clusters)")
    return refit.robust_se


# ---------------------------------------------------------------------------
# Export


def fit_to_json_dict(fit: FitResult, provenance: Mapping | None = None) -> dict:
    out = {
        "model": fit.model,
        "n_obs": fit.n_obs,
        "terms": list(fit.terms),
        "beta": [float(b) for b in fit.beta],
        "se": [float(s) for s in fit.se],
        "robust_se": [float(s) for s in fit.robust_se] if fit.robust_se is not None else None,
        "z": [float(v) for v in fit.z],
        "p": [float(v) for v in fit.p],
        "ln_alpha": float(fit.ln_alpha),
        "ln_alpha_se": float(fit.ln_alpha_se),
        "variance_components": {
            lv: {"estimate": float(est), "se": float(se)} for lv, (est, se) in fit.variance_components.items()
        },
        "loglik": float(fit.loglik),
        "cluster_level": fit.cluster_level,
        "convergence": {
            "status": fit.convergence.status,
            "iterations": fit.convergence.iterations,
            "grad_norm": float(fit.convergence.grad_norm),
            "boundary": list(fit.convergence.boundary),
            "notes": list(fit.convergence.notes),
        },
    }
    if provenance:
        out["provenance"] = dict(provenance)
    return out


def fit_to_csv_bytes(fit: FitResult, provenance: Mapping | None = None) -> bytes:
    lines = []
    if provenance:
        lines.append("# " + " ".join(f"{k}={provenance[k]}" for k in sorted(provenance)))
    lines.append("term,beta,se,robust_se,z,p")
    for j, term in enumerate(fit.terms):
        rob = repr(float(fit.robust_se[j])) if fit.robust_se is not None else ""
        lines.append(
            f"{term},{float(fit.beta[j])!r},{float(fit.se[j])!r},{rob},{float(fit.z[j])!r},{float(fit.p[j])!r}"
        )
    return ("\n".join(lines) + "\n").encode("utf-8")
