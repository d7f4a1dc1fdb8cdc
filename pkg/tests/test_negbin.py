import math

import numpy as np
import pytest

from spillnet.errors import ColumnError, ConvergenceError, DataError, RankError
from spillnet.panel import DesignTable, ModelSpec
from spillnet.negbin import (
    fit_nb_glm,
    fit_nb_mixed,
    fit_to_csv_bytes,
    fit_to_json_dict,
    laplace_loglik,
    loglik_and_score,
    predict_mu,
    robust_se,
)

from oracles import gauss_hermite_loglik, rowwise_predict, rowwise_sandwich


def nb_draw(rng, mu, alpha):
    if alpha <= 0:
        return rng.poisson(mu)
    k = 1.0 / alpha
    return rng.poisson(rng.gamma(k, alpha * mu))


def glm_design(y, X, names, offset=None, group=None):
    spec = ModelSpec(outcome="cases", predictors=tuple(names), random_levels=())
    return DesignTable.from_arrays(np.asarray(y, float), X, names, offset=offset, group=group, spec=spec)


def nested_design(y, X, names, offset, groups, regions):
    spec = ModelSpec(outcome="cases", predictors=tuple(names), random_levels=("group", "region"))
    return DesignTable.from_arrays(np.asarray(y, float), X, names, offset=offset,
                                   group=groups, region=regions, spec=spec)


def simulate_nested(seed, n_groups=12, regions_per=6, periods=5, beta=(-5.5, 0.4),
                    alpha=0.5, s2g=0.25, s2r=0.4):
    rng = np.random.default_rng(seed)
    groups, regions = [], []
    for g in range(n_groups):
        for r in range(regions_per):
            for _ in range(periods):
                groups.append(f"g{g}")
                regions.append(f"g{g}r{r}")
    n = len(groups)
    x = rng.standard_normal(n)
    off = np.log(rng.uniform(2000, 30000, n))
    gi = np.repeat(np.arange(n_groups), regions_per * periods)
    ri = np.repeat(np.arange(n_groups * regions_per), periods)
    u = rng.normal(0, math.sqrt(s2g), n_groups) if s2g > 0 else np.zeros(n_groups)
    v = rng.normal(0, math.sqrt(s2r), n_groups * regions_per) if s2r > 0 else np.zeros(n_groups * regions_per)
    mu = np.exp(beta[0] + beta[1] * x + off + u[gi] + v[ri])
    y = nb_draw(rng, mu, alpha).astype(float)
    return y, x, off, groups, regions


class TestGlmBasics:
    def test_intercept_only_closed_form(self):
        d = glm_design(np.full(40, 5.0), np.empty((40, 0)), [], offset=np.log(np.full(40, 1000.0)))
        fit = fit_nb_glm(d, robust_cluster=None)
        assert fit.beta[0] == pytest.approx(math.log(5 / 1000), abs=1e-8)
        assert fit.convergence.boundary == ("ln_alpha",)
        assert fit.alpha <= 1e-7

    def test_duplicate_predictor_names_both_columns(self):
        rng = np.random.default_rng(0)
        x = rng.standard_normal(50)
        X = np.column_stack([x, x])
        with pytest.raises(RankError) as err:
            fit_nb_glm(glm_design(rng.poisson(5.0, 50), X, ["left", "right"]))
        assert "left" in str(err.value) and "right" in str(err.value)

    def test_all_zero_outcome_rejected(self):
        with pytest.raises(DataError, match="all zero"):
            fit_nb_glm(glm_design(np.zeros(20), np.empty((20, 0)), []))

    def test_negative_outcome_rejected(self):
        with pytest.raises(DataError, match="nonnegative"):
            fit_nb_glm(glm_design(np.array([-1.0, 2.0]), np.empty((2, 0)), []))

    def test_simulation_recovery_within_3_se(self):
        rng = np.random.default_rng(7)
        n = 5000
        x = rng.standard_normal(n)
        off = np.log(rng.uniform(1, 3, n))
        y = nb_draw(rng, np.exp(0.5 + 1.2 * x + off), 0.8)
        fit = fit_nb_glm(glm_design(y, x[:, None], ["x"], offset=off))
        for est, se, truth in [
            (fit.beta[0], fit.se[0], 0.5),
            (fit.beta[1], fit.se[1], 1.2),
            (fit.ln_alpha, fit.ln_alpha_se, math.log(0.8)),
        ]:
            assert abs(est - truth) < 3 * se

    def test_analytic_score_matches_finite_differences(self):
        rng = np.random.default_rng(3)
        n = 200
        X = np.column_stack([np.ones(n), rng.standard_normal(n)])
        off = np.log(rng.uniform(100, 1000, n))
        y = nb_draw(rng, np.exp(-2.0 + 0.3 * X[:, 1] + off), 0.5).astype(float)
        for _ in range(20):
            params = np.concatenate([rng.normal(-2, 0.5, 1), rng.normal(0, 0.5, 1), rng.normal(-0.5, 0.5, 1)])
            _, score = loglik_and_score(y, X, off, params[:2], params[2])
            fd = np.zeros(3)
            for j in range(3):
                h = 1e-6 * max(1, abs(params[j]))
                up, dn = params.copy(), params.copy()
                up[j] += h
                dn[j] -= h
                fd[j] = (loglik_and_score(y, X, off, up[:2], up[2])[0]
                         - loglik_and_score(y, X, off, dn[:2], dn[2])[0]) / (2 * h)
            rel = np.abs(score - fd) / np.maximum(np.abs(fd), 1e-8)
            assert rel.max() < 1e-5

    def test_poisson_limit_matches_poisson_glm_oracle(self):
        import statsmodels.api as sm

        rng = np.random.default_rng(11)
        n = 4000
        x = rng.standard_normal(n)
        off = np.log(rng.uniform(50, 500, n))
        y = rng.poisson(np.exp(-1.0 + 0.6 * x + off))
        fit = fit_nb_glm(glm_design(y, x[:, None], ["x"], offset=off))
        oracle = sm.GLM(y, np.column_stack([np.ones(n), x]), family=sm.families.Poisson(),
                        offset=off).fit()
        assert np.abs(fit.beta - oracle.params).max() < 1e-3

    def test_offset_contract_population_scaling(self):
        rng = np.random.default_rng(5)
        n = 1500
        x = rng.standard_normal(n)
        pop = rng.uniform(1000, 9000, n)
        y = nb_draw(rng, np.exp(-4.0 + 0.5 * x + np.log(pop)), 0.4)
        fit1 = fit_nb_glm(glm_design(y, x[:, None], ["x"], offset=np.log(pop)), robust_cluster=None)
        fit2 = fit_nb_glm(glm_design(y, x[:, None], ["x"], offset=np.log(7.0 * pop)), robust_cluster=None)
        assert fit2.beta[0] - fit1.beta[0] == pytest.approx(-math.log(7.0), abs=1e-6)
        assert fit2.beta[1] == pytest.approx(fit1.beta[1], abs=1e-6)

    def test_nonconvergence_reported_not_raised(self):
        rng = np.random.default_rng(1)
        n = 400
        x = rng.standard_normal(n)
        y = nb_draw(rng, np.exp(1.0 + 0.5 * x), 0.7)
        fit = fit_nb_glm(glm_design(y, x[:, None], ["x"]), max_outer=1)
        assert fit.convergence.status == "max_iterations"
        assert not fit.convergence.converged


class TestRobustSe:
    def _confounded_fit(self, seed=23, n=1200):
        rng = np.random.default_rng(seed)
        x = rng.standard_normal(n)
        off = np.log(rng.uniform(500, 5000, n))
        y = nb_draw(rng, np.exp(-3.0 + 0.4 * x + off), 0.6)
        design = glm_design(y, x[:, None], ["x"], offset=off)
        return design, fit_nb_glm(design, robust_cluster="rows")

    def test_rowwise_matches_dense_oracle(self):
        design, fit = self._confounded_fit()
        mine = robust_se(fit, design, cluster_level="rows")
        oracle = rowwise_sandwich(design.X, design.y, fit.mu, fit.alpha)
        np.testing.assert_allclose(mine, oracle, rtol=1e-10)
        np.testing.assert_allclose(fit.robust_se, oracle, rtol=1e-10)

    def test_iid_robust_close_to_model_se(self):
        rng = np.random.default_rng(29)
        n = 6000
        x = rng.standard_normal(n)
        y = nb_draw(rng, np.exp(1.2 + 0.5 * x), 0.5)
        fit = fit_nb_glm(glm_design(y, x[:, None], ["x"]))
        ratio = fit.robust_se / fit.se
        assert np.all(np.abs(ratio - 1) < 0.15)

    def test_duplicated_rows_leave_estimate_unchanged(self):
        design, fit = self._confounded_fit()
        y2 = np.concatenate([design.y, design.y])
        X2 = np.vstack([design.X[:, 1:], design.X[:, 1:]])
        off2 = np.concatenate([design.offset, design.offset])
        d2 = glm_design(y2, X2, ["x"], offset=off2)
        fit2 = fit_nb_glm(d2, robust_cluster=None)
        np.testing.assert_allclose(fit2.beta, fit.beta, atol=1e-7)

    def test_fewer_than_two_clusters_errors(self):
        design, fit = self._confounded_fit()
        one_cluster = glm_design(design.y, design.X[:, 1:], ["x"], offset=design.offset,
                                 group=["G"] * design.n)
        fit_oc = fit_nb_glm(one_cluster, robust_cluster=None)
        with pytest.raises(DataError, match="2 clusters"):
            robust_se(fit_oc, one_cluster, cluster_level="group")

    def test_requires_converged_fit(self):
        design, _ = self._confounded_fit()
        bad = fit_nb_glm(design, max_outer=1, robust_cluster=None)
        with pytest.raises(ConvergenceError):
            robust_se(bad, design, cluster_level="rows")


class TestPredictMu:
    def test_zero_beta_returns_offset_scale(self):
        d = glm_design(np.full(10, 3.0), np.empty((10, 0)), [], offset=np.log(np.full(10, 1000.0)))
        fit = fit_nb_glm(d, robust_cluster=None)
        forced = predict_mu(fit, d)
        assert forced.shape == (10,)
        # with beta = 0 the mean is exactly the offset scale
        zeroed = DesignTable.from_arrays(np.full(10, 3.0), np.empty((10, 0)), [],
                                         offset=np.log(np.full(10, 1000.0)))
        import dataclasses
        fake = dataclasses.replace(fit, beta=np.zeros(1))
        assert predict_mu(fake, zeroed)[0] == pytest.approx(1000.0)

    def test_hand_exponentiation(self):
        d = glm_design(np.full(4, 2.0), np.empty((4, 0)), [], offset=np.zeros(4))
        fit = fit_nb_glm(d, robust_cluster=None)
        import dataclasses
        fake = dataclasses.replace(fit, beta=np.array([0.5]))
        assert predict_mu(fake, d)[0] == pytest.approx(math.exp(0.5))

    def test_matches_rowwise_oracle(self):
        rng = np.random.default_rng(31)
        n = 60
        X = rng.standard_normal((n, 2))
        off = np.log(rng.uniform(10, 100, n))
        y = nb_draw(rng, np.exp(0.2 + X @ [0.3, -0.2] + off), 0.5)
        d = glm_design(y, X, ["a", "b"], offset=off)
        fit = fit_nb_glm(d, robust_cluster=None)
        mine = predict_mu(fit, d)
        oracle = rowwise_predict(d.X, fit.beta, d.offset)
        np.testing.assert_allclose(mine, oracle, rtol=1e-12)

    def test_column_mismatch_rejected(self):
        d = glm_design(np.full(5, 2.0), np.arange(5.0)[:, None], ["a"])
        fit = fit_nb_glm(d, robust_cluster=None)
        other = glm_design(np.full(5, 2.0), np.arange(5.0)[:, None], ["zzz"])
        with pytest.raises(ColumnError):
            predict_mu(fit, other)


class TestMixed:
    def test_degenerate_no_group_structure_matches_glm(self):
        y, x, off, groups, regions = simulate_nested(1, s2g=0.0, s2r=0.0, n_groups=6,
                                                     regions_per=5, periods=4)
        d = nested_design(y, x[:, None], ["x"], off, groups, regions)
        fit_m = fit_nb_mixed(d, robust_cluster=None)
        d_g = glm_design(y, x[:, None], ["x"], offset=off)
        fit_g = fit_nb_glm(d_g, robust_cluster=None)
        assert np.abs(fit_m.beta - fit_g.beta).max() < 1e-4
        assert fit_m.variance_components["group"][0] <= 1e-6
        assert fit_m.variance_components["region"][0] <= 1e-6
        assert "log_var_group" in fit_m.convergence.boundary

    def test_recovery_on_nested_simulation(self):
        y, x, off, groups, regions = simulate_nested(42)
        d = nested_design(y, x[:, None], ["x"], off, groups, regions)
        fit = fit_nb_mixed(d)
        assert fit.convergence.converged
        assert abs(fit.beta[1] - 0.4) < 3 * fit.se[1]
        assert abs(fit.beta[0] + 5.5) < 3 * fit.se[0]
        assert fit.variance_components["group"][0] == pytest.approx(0.25, rel=0.6)
        assert fit.variance_components["region"][0] == pytest.approx(0.4, rel=0.5)
        assert abs(fit.alpha - 0.5) < 0.15

    def test_single_group_flags_boundary_and_returns_beta(self):
        y, x, off, _, regions = simulate_nested(12, n_groups=5, regions_per=4, periods=4)
        d = nested_design(y, x[:, None], ["x"], off, ["G"] * len(y), regions)
        fit = fit_nb_mixed(d)
        assert "log_var_group" in fit.convergence.boundary
        assert np.isfinite(fit.beta).all()
        assert fit.robust_se is None  # 1 cluster, skipped with a note

    def test_determinism_bit_identical(self):
        y, x, off, groups, regions = simulate_nested(8, n_groups=6, regions_per=4, periods=4)
        d = nested_design(y, x[:, None], ["x"], off, groups, regions)
        fit1 = fit_nb_mixed(d)
        fit2 = fit_nb_mixed(d)
        assert np.array_equal(fit1.beta, fit2.beta)
        assert fit1.loglik == fit2.loglik
        assert np.array_equal(fit1.se, fit2.se)

    def test_conditional_means_use_modes(self):
        y, x, off, groups, regions = simulate_nested(9, n_groups=6, regions_per=4, periods=4)
        d = nested_design(y, x[:, None], ["x"], off, groups, regions)
        fit = fit_nb_mixed(d, robust_cluster=None)
        cond = predict_mu(fit, d, include_random_effects=True)
        np.testing.assert_allclose(cond, fit.mu_conditional, rtol=1e-10)
        # conditional fit should be no worse in-sample than fixed-only
        assert np.abs(np.log(fit.mu_conditional) - np.log(y + 0.5)).mean() <= \
            np.abs(np.log(fit.mu) - np.log(y + 0.5)).mean() + 0.05

    def test_mixed_gradient_matches_finite_differences(self):
        from spillnet.negbin import _build_blocks, _MixedObjective

        y, x, off, groups, regions = simulate_nested(4, n_groups=4, regions_per=3, periods=4)
        d = nested_design(y, x[:, None], ["x"], off, groups, regions)
        for levels, extra in [(("group", "region"), 2), (("group",), 1), (("region",), 1)]:
            spec = ModelSpec(outcome="cases", predictors=("x",), random_levels=levels)
            dd = DesignTable.from_arrays(d.y, d.X[:, 1:], ["x"], offset=d.offset,
                                         group=groups, region=regions, spec=spec)
            blocks = _build_blocks(dd, levels)
            obj = _MixedObjective(blocks, two_level=len(levels) == 2)
            theta = np.concatenate([[-5.2, 0.3], [math.log(0.6)], [math.log(0.3)] * extra])
            _, grad = obj.value_and_grad(theta)
            fd = np.zeros_like(theta)
            for j in range(len(theta)):
                h = 1e-6 * max(1, abs(theta[j]))
                up, dn = theta.copy(), theta.copy()
                up[j] += h
                dn[j] -= h
                fd[j] = (obj.value_and_grad(up, want_grad=False)[0]
                         - obj.value_and_grad(dn, want_grad=False)[0]) / (2 * h)
            assert np.abs(grad - fd).max() / max(np.abs(fd).max(), 1.0) < 1e-5

    def test_laplace_agrees_with_gauss_hermite(self):
        rng = np.random.default_rng(12)
        groups, rows_per = 5, 4
        labels = [f"g{g}" for g in range(groups) for _ in range(rows_per)]
        n = len(labels)
        x = rng.standard_normal(n)
        off = np.log(rng.uniform(800, 3000, n))
        gi = np.repeat(np.arange(groups), rows_per)
        u = rng.normal(0, math.sqrt(0.4), groups)
        y = nb_draw(rng, np.exp(-4.5 + 0.3 * x + off + u[gi]), 0.6).astype(float)
        spec = ModelSpec(outcome="cases", predictors=("x",), random_levels=("group",))
        d = DesignTable.from_arrays(y, x[:, None], ["x"], offset=off, group=labels,
                                    region=labels, spec=spec)
        beta = np.array([-4.4, 0.28])
        for alpha, s2 in [(0.6, 0.4), (1.0, 0.8)]:
            lap = laplace_loglik(d, beta, math.log(alpha), [math.log(s2)])
            mu0 = [np.exp(d.X[gi == g] @ beta + d.offset[gi == g]) for g in range(groups)]
            gh = gauss_hermite_loglik([y[gi == g] for g in range(groups)], mu0, alpha, s2)
            assert abs(lap - gh) / abs(gh) < 0.02

    def test_region_nested_in_multiple_groups_rejected(self):
        y = np.array([3.0, 4.0, 5.0, 6.0])
        spec = ModelSpec(outcome="cases", predictors=(), random_levels=("group", "region"))
        d = DesignTable.from_arrays(y, np.empty((4, 0)), [], group=["g1", "g1", "g2", "g2"],
                                    region=["r", "r", "r", "r"], spec=spec)
        with pytest.raises(DataError, match="nested"):
            fit_nb_mixed(d)


class TestExport:
    def test_csv_and_json_round_out(self):
        rng = np.random.default_rng(2)
        n = 300
        x = rng.standard_normal(n)
        y = nb_draw(rng, np.exp(1.0 + 0.3 * x), 0.5)
        fit = fit_nb_glm(glm_design(y, x[:, None], ["x"]))
        blob = fit_to_csv_bytes(fit, provenance={"seed": 2})
        lines = blob.decode().strip().split("\n")
        assert lines[0].startswith("#")
        assert lines[1] == "term,beta,se,robust_se,z,p"
        assert len(lines) == 2 + len(fit.terms)
        payload = fit_to_json_dict(fit)
        assert payload["model"] == "nb_glm"
        assert payload["convergence"]["status"] == "converged"
        assert len(payload["beta"]) == len(fit.terms)
