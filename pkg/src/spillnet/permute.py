"""Bounded percentage-style model error (MAAPE) and permutation-based
predictor importance.

A predictor matters when shuffling it across observations degrades in-sample
fit: the report's ``proportion_lower`` is the fraction of permuted refits
whose error is strictly lower than the observed fit's error. Ties count
against significance.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass
from typing import Mapping

import numpy as np

from .errors import ColumnError, ConvergenceError, DataError, DegeneratePredictorWarning
from .negbin import fit_nb_glm, fit_nb_mixed
from .panel import DesignTable

HALF_PI = math.pi / 2.0


def maape(y, yhat) -> float:
    """Mean arctangent absolute percentage error.

    Per-observation term arctan(|y - yhat| / y), which stays bounded when the
    observed value is 0: a zero observation with a zero prediction contributes
    0, any other prediction contributes pi/2. Result is in [0, pi/2].
    """
    y = np.asarray(y, dtype=np.float64)
    yhat = np.asarray(yhat, dtype=np.float64)
    if y.shape != yhat.shape or y.ndim != 1:
        raise DataError(f"maape needs equal-length 1-d inputs, got {y.shape} and {yhat.shape}")
    if len(y) == 0:
        raise DataError("maape needs at least one observation")
    if (y < 0).any():
        raise DataError("maape expects nonnegative observed counts")
    terms = np.empty_like(y)
    zero = y == 0
    terms[zero] = np.where(yhat[zero] == 0, 0.0, HALF_PI)
    nz = ~zero
    with np.errstate(over="ignore"):  # subnormal y: ratio -> inf, arctan -> pi/2
        terms[nz] = np.arctan(np.abs(y[nz] - yhat[nz]) / y[nz])
    return float(terms.mean())


@dataclass(frozen=True)
class PermutationReport:
    predictor: str
    observed_maape: float
    permuted_maapes: tuple[float, ...]
    proportion_lower: float
    n_permutations: int
    n_failed: int
    seed: int

    def __post_init__(self):
        if not 0.0 <= self.proportion_lower <= 1.0:
            raise DataError("proportion_lower must lie in [0, 1]")

    def to_json_dict(self, provenance: Mapping | None = None) -> dict:
        out = {
            "predictor": self.predictor,
            "observed_maape": self.observed_maape,
            "proportion_lower": self.proportion_lower,
            "n_permutations": self.n_permutations,
            "n_failed": self.n_failed,
            "seed": self.seed,
            "permuted_maapes": list(self.permuted_maapes),
        }
        if provenance:
            out["provenance"] = dict(provenance)
        return out


def _fit_for_spec(design: DesignTable):
    if design.spec.random_levels:
        return fit_nb_mixed(design, robust_cluster=None)
    return fit_nb_glm(design, robust_cluster=None)


def _permutation_rng(seed: int, index: int) -> np.random.Generator:
    # one independent stream per permutation, derived from (seed, index)
    return np.random.default_rng(np.random.SeedSequence([seed, index]))


def permutation_test(
    design: DesignTable,
    predictor: str,
    n_permutations: int = 100,
    seed: int = 0,
    within_period: bool = False,
) -> PermutationReport:
    """Shuffle one predictor column, refit, and compare in-sample MAAPE.

    The shuffle spans all rows by default; ``within_period`` restricts it to
    rows sharing a period label, preserving temporal structure. Predictions
    use fixed effects only, so observed and permuted fits are compared on
    identical footing. Permutation fits that fail to converge are excluded
    and counted; more than 20% failures aborts the test.
    """
    if predictor not in design.x_names:
        raise ColumnError(f"predictor {predictor!r} is not a design column")
    if predictor == "const":
        raise ColumnError("cannot permute the intercept")
    if n_permutations < 1:
        raise DataError("n_permutations must be positive")

    baseline = _fit_for_spec(design)
    if not baseline.convergence.converged:
        raise ConvergenceError(f"baseline fit did not converge: {baseline.convergence.status}")
    observed = maape(design.y, baseline.mu)

    column = design.column(predictor)
    if np.ptp(column) == 0:
        warnings.warn(
            f"predictor {predictor!r} is constant; permutation cannot change the fit",
            DegeneratePredictorWarning,
        )

    period_groups = None
    if within_period:
        labels = {}
        for lab in design.row_period:
            labels.setdefault(lab, len(labels))
        codes = np.array([labels[lab] for lab in design.row_period])
        period_groups = [np.nonzero(codes == c)[0] for c in range(len(labels))]

    permuted = []
    n_failed = 0
    for index in range(n_permutations):
        rng = _permutation_rng(seed, index)
        shuffled = column.copy()
        if period_groups is None:
            shuffled = column[rng.permutation(len(column))]
        else:
            for rows in period_groups:
                shuffled[rows] = column[rows][rng.permutation(len(rows))]
        perm_design = design.with_column(predictor, shuffled)
        try:
            fit = _fit_for_spec(perm_design)
        except (DataError, ConvergenceError):
            n_failed += 1
            continue
        if not fit.convergence.converged:
            n_failed += 1
            continue
        permuted.append(maape(perm_design.y, fit.mu))

    if n_failed > 0.2 * n_permutations:
        raise ConvergenceError(
            f"{n_failed}/{n_permutations} permutation fits failed; test unreliable"
        )
    n_valid = len(permuted)
    lower = sum(1 for m in permuted if m < observed)
    return PermutationReport(
        predictor=predictor,
        observed_maape=observed,
        permuted_maapes=tuple(permuted),
        proportion_lower=lower / n_valid if n_valid else 0.0,
        n_permutations=n_permutations,
        n_failed=n_failed,
        seed=seed,
    )
