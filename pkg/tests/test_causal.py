import math
import warnings

import numpy as np
import pytest

from spillnet.errors import CandidateDropWarning, DataError, PositivityError, PositivityWarning
from spillnet.causal import (
    DEFAULT_CANDIDATES,
    WeightSet,
    cbps_weights,
    iptw_weights,
    super_learner_weights,
    weighted_effect,
    weighted_mean_difference,
    _Candidate,
)


def confounded_binary(seed, n, slope=1.0, effect=2.0, out_slope=3.0):
    rng = np.random.default_rng(seed)
    X = rng.standard_normal(n)
    T = (rng.random(n) < 1.0 / (1.0 + np.exp(-slope * X))).astype(float)
    Y = effect * T + out_slope * X + rng.standard_normal(n)
    return X, T, Y


class TestIptw:
    def test_randomized_treatment_gives_unit_weights(self):
        rng = np.random.default_rng(0)
        n = 4000
        X = rng.standard_normal(n)
        T = (rng.random(n) < 0.5).astype(float)
        ws = iptw_weights(T, {"x": X})
        assert np.abs(ws.weights - 1.0).max() < 0.15
        assert ws.ess > 0.99 * n

    def test_confounded_recovery(self):
        X, T, Y = confounded_binary(1, 6000)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            ws = iptw_weights(T, {"x": X})
        est = weighted_mean_difference(Y, T, ws)
        naive = Y[T == 1].mean() - Y[T == 0].mean()
        assert abs(est - 2.0) < 0.15
        assert naive - 2.0 > 0.5

    def test_perfect_separation_raises_positivity_error(self):
        rng = np.random.default_rng(2)
        X = rng.standard_normal(500)
        T = (X > 0).astype(float)
        with pytest.raises(PositivityError):
            iptw_weights(T, {"x": X})

    def test_single_arm_rejected(self):
        rng = np.random.default_rng(3)
        X = rng.standard_normal(50)
        with pytest.raises(DataError, match="single arm"):
            iptw_weights(np.ones(50), {"x": X})

    def test_extreme_propensities_warn(self):
        rng = np.random.default_rng(4)
        n = 2000
        X = rng.standard_normal(n)
        T = (rng.random(n) < 1.0 / (1.0 + np.exp(-4.0 * X))).astype(float)
        with pytest.warns(PositivityWarning):
            iptw_weights(T, {"x": X})

    def test_zero_variance_covariate_rejected(self):
        T = np.array([0.0, 1.0] * 10)
        with pytest.raises(DataError, match="variance"):
            iptw_weights(T, {"x": np.ones(20)})

    def test_continuous_treatment_density_ratio(self):
        rng = np.random.default_rng(5)
        n = 5000
        X = rng.standard_normal(n)
        T = 0.8 * X + rng.standard_normal(n)
        ws = iptw_weights(T, {"x": X})
        assert ws.treatment_type == "continuous"
        assert abs(ws.weights.mean() - 1.0) < 1e-12
        # weighting should decorrelate treatment from the covariate
        raw_corr = np.corrcoef(T, X)[0, 1]
        assert abs(ws.balance["x"]) < abs(raw_corr) / 3

    def test_weight_invariants(self):
        X, T, _ = confounded_binary(6, 3000)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            ws = iptw_weights(T, {"x": X})
        assert (ws.weights > 0).all()
        assert abs(ws.weights.mean() - 1.0) < 1e-12
        assert ws.ess <= len(T)


class TestCbps:
    def test_balance_beats_iptw_under_misspecification(self):
        # true propensity depends on |X| but the model sees only X
        rng = np.random.default_rng(7)
        n = 6000
        X = rng.standard_normal(n)
        e_true = 1.0 / (1.0 + np.exp(-(1.2 * np.abs(X) - 0.8)))
        T = (rng.random(n) < e_true).astype(float)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            cov = {"x": X, "x_abs": np.abs(X)}
            ws_iptw = iptw_weights(T, {"x": X})
            ws_cbps = cbps_weights(T, {"x": X})

        def smd(ws, col):
            w = ws.weights
            m1 = np.average(col[T == 1], weights=w[T == 1])
            m0 = np.average(col[T == 0], weights=w[T == 0])
            pooled = math.sqrt((col[T == 1].var(ddof=1) + col[T == 0].var(ddof=1)) / 2)
            return abs(m1 - m0) / pooled

        assert smd(ws_cbps, X) < smd(ws_iptw, X)
        assert ws_cbps.balance["x"] < 0.05

    def test_already_balanced_data_gives_near_uniform_weights(self):
        rng = np.random.default_rng(8)
        n = 20000
        X = rng.standard_normal(n)
        T = (rng.random(n) < 0.5).astype(float)
        ws = cbps_weights(T, {"x": X})
        assert np.abs(ws.weights - 1.0).max() < 0.05

    def test_confounded_recovery(self):
        X, T, Y = confounded_binary(9, 6000)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            ws = cbps_weights(T, {"x": X})
        assert abs(weighted_mean_difference(Y, T, ws) - 2.0) < 0.15

    def test_continuous_treatment_balance_moment(self):
        # identity-weighted GMM trades the score moments against balance, so
        # assert a large balance improvement rather than an absolute level
        rng = np.random.default_rng(10)
        n = 4000
        X = rng.standard_normal(n)
        T = 0.7 * X + rng.standard_normal(n)
        ws = cbps_weights(T, {"x": X})
        raw_corr = abs(np.corrcoef(T, X)[0, 1])
        assert abs(ws.balance["x"]) < raw_corr / 3
        assert abs(ws.weights.mean() - 1.0) < 1e-12


class TestSuperLearner:
    def test_single_candidate_identical_to_iptw(self):
        X, T, _ = confounded_binary(11, 3000)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            a = iptw_weights(T, {"x": X})
            b = super_learner_weights(T, {"x": X}, candidates=DEFAULT_CANDIDATES[:1])
        assert np.array_equal(a.weights, b.weights)

    def test_stacking_coefficients_live_on_simplex(self):
        X, T, _ = confounded_binary(12, 2000)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            ws = super_learner_weights(T, {"x": X}, seed=3)
        coefs = np.array(list(ws.diagnostics["stacking"].values()))
        assert coefs.sum() == pytest.approx(1.0, abs=1e-9)
        assert ((coefs >= 0) & (coefs <= 1)).all()

    def test_quadratic_confounding_ensemble_beats_main_effects(self):
        rng = np.random.default_rng(13)
        n = 5000
        X = rng.standard_normal(n)
        e_true = 1.0 / (1.0 + np.exp(-(X**2 - 1.0)))
        T = (rng.random(n) < e_true).astype(float)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            ws = super_learner_weights(T, {"x": X}, seed=4)
        losses = ws.diagnostics["candidate_cv_loss"]
        assert ws.diagnostics["cv_loss"] <= losses["main_effects"] + 1e-9
        assert ws.diagnostics["stacking"]["with_squares"] > 0.5

    def test_failing_candidate_dropped_with_warning(self):
        X, T, _ = confounded_binary(14, 1000)

        def explode(Xs):
            raise np.linalg.LinAlgError("synthetic failure")

        candidates = (DEFAULT_CANDIDATES[0], _Candidate("broken", explode))
        with pytest.warns(CandidateDropWarning):
            ws = super_learner_weights(T, {"x": X}, candidates=candidates)
        assert list(ws.diagnostics["stacking"]) == ["main_effects"]

    def test_all_candidates_failing_rejected(self):
        X, T, _ = confounded_binary(15, 500)

        def explode(Xs):
            raise np.linalg.LinAlgError("synthetic failure")

        with pytest.raises(DataError, match="all candidate"), pytest.warns(CandidateDropWarning):
            super_learner_weights(T, {"x": X}, candidates=(_Candidate("broken", explode),))

    def test_deterministic_given_seed(self):
        X, T, _ = confounded_binary(16, 1500)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            a = super_learner_weights(T, {"x": X}, seed=7)
            b = super_learner_weights(T, {"x": X}, seed=7)
        assert np.array_equal(a.weights, b.weights)


class TestWeightedEffect:
    def test_uniform_weights_match_unweighted_fit_exactly(self):
        from spillnet.negbin import fit_nb_glm
        from spillnet.panel import DesignTable

        rng = np.random.default_rng(17)
        n = 1500
        T = (rng.random(n) < 0.5).astype(float)
        pop = rng.integers(5000, 40000, n).astype(float)
        mu = np.exp(np.log(pop) - 6.0 + 0.4 * T)
        k = 2.0
        y = rng.poisson(rng.gamma(k, mu / k)).astype(float)
        ws = WeightSet(
            weights=np.ones(n), method="iptw", treatment_name="t",
            treatment_type="binary", balance={}, ess=float(n), n_truncated=0, diagnostics={},
        )
        est = weighted_effect(y, T, ws, population=pop)
        design = DesignTable.from_arrays(y, T[:, None], ["t"], offset=np.log(pop))
        unweighted = fit_nb_glm(design, robust_cluster="rows")
        assert est.estimate == unweighted.beta[1]
        assert est.se == unweighted.robust_se[1]

    def test_multiplicative_effect_recovery_with_iptw(self):
        rng = np.random.default_rng(18)
        n = 8000
        X = rng.standard_normal(n)
        T = (rng.random(n) < 1.0 / (1.0 + np.exp(-0.8 * X))).astype(float)
        pop = rng.integers(5000, 50000, n).astype(float)
        mu = np.exp(np.log(pop) - 6.0 + 0.7 * T + 0.5 * X)
        k = 2.0
        y = rng.poisson(rng.gamma(k, mu / k)).astype(float)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            ws = iptw_weights(T, {"x": X})
        est = weighted_effect(y, T, ws, population=pop)
        assert abs(est.estimate - 0.7) < 0.1
        assert est.p < 0.05

    def test_estimator_agreement_on_correct_specification(self):
        rng = np.random.default_rng(19)
        n = 6000
        X = rng.standard_normal(n)
        T = (rng.random(n) < 1.0 / (1.0 + np.exp(-0.7 * X))).astype(float)
        pop = rng.integers(5000, 50000, n).astype(float)
        mu = np.exp(np.log(pop) - 6.0 + 0.5 * T + 0.4 * X)
        y = rng.poisson(rng.gamma(2.0, mu / 2.0)).astype(float)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            estimates = []
            for builder in (iptw_weights, cbps_weights, super_learner_weights):
                ws = builder(T, {"x": X})
                estimates.append(weighted_effect(y, T, ws, population=pop))
        for i in range(len(estimates)):
            for j in range(i + 1, len(estimates)):
                gap = abs(estimates[i].estimate - estimates[j].estimate)
                combined = math.hypot(estimates[i].se, estimates[j].se)
                assert gap < 2 * combined

    def test_controls_enter_regression(self):
        rng = np.random.default_rng(20)
        n = 2000
        X = rng.standard_normal(n)
        T = (rng.random(n) < 0.5).astype(float)
        pop = np.full(n, 10_000.0)
        mu = np.exp(np.log(pop) - 6.0 + 0.3 * T + 0.6 * X)
        y = rng.poisson(rng.gamma(2.0, mu / 2.0)).astype(float)
        ws = iptw_weights(T, {"x": X})
        with_controls = weighted_effect(y, T, ws, controls={"x": X}, population=pop)
        assert abs(with_controls.estimate - 0.3) < 0.1

    def test_weighted_mean_difference_requires_binary(self):
        ws = WeightSet(
            weights=np.ones(4), method="iptw", treatment_name="t",
            treatment_type="continuous", balance={}, ess=4.0, n_truncated=0, diagnostics={},
        )
        with pytest.raises(DataError, match="binary"):
            weighted_mean_difference(np.ones(4), np.arange(4.0), ws)


class TestWeightSetInvariants:
    def test_nonpositive_weights_rejected(self):
        with pytest.raises(DataError, match="positive"):
            WeightSet(weights=np.array([1.0, 0.0]), method="iptw", treatment_name="t",
                      treatment_type="binary", balance={}, ess=1.0, n_truncated=0, diagnostics={})

    def test_unnormalized_weights_rejected(self):
        with pytest.raises(DataError, match="mean 1"):
            WeightSet(weights=np.array([1.0, 3.0]), method="iptw", treatment_name="t",
                      treatment_type="binary", balance={}, ess=1.0, n_truncated=0, diagnostics={})

    def test_ess_cannot_exceed_n(self):
        with pytest.raises(DataError, match="sample size"):
            WeightSet(weights=np.ones(3), method="iptw", treatment_name="t",
                      treatment_type="binary", balance={}, ess=5.0, n_truncated=0, diagnostics={})
