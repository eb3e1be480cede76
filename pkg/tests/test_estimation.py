"""Link transforms, maximum-likelihood fitting, AIC, model selection."""

import numpy as np
import pytest

from pamscr.estimation import (
    FitConfig,
    aic,
    aic_value,
    default_start,
    finite_difference_gradient,
    fit,
    model_select,
)
from pamscr.density import build_design_matrix, parse_formula, log_density
from pamscr.likelihood import LikelihoodEvaluator
from pamscr.params import ParamSpec, ParamVector
from pamscr.validation import DataError

from conftest import small_problem


@pytest.fixture(scope="module")
def problem():
    return small_problem(seed=3)


@pytest.fixture(scope="module")
def fitted(problem):
    return fit(problem["dataset"], problem["array"], problem["formula"],
               problem["grids"], problem["t_r"], source_level_mode="fixed",
               bearing_mode="mixture", standardize=False)


class TestTransforms:
    def spec(self, n_beta=2):
        return ParamSpec("variable", "mixture", n_beta)

    def test_logit_center(self):
        pv = ParamVector(g0=0.5, beta_r=15.0, sigma_r=3.0, mu_s=160.0, sigma_s=5.0,
                         kappa=1.0, delta_kappa=20.0, psi_kappa=0.5,
                         beta=np.array([0.0, 1.0]))
        x = self.spec().transform(pv)
        assert x[0] == 0.0  # logit(0.5)
        assert x[self.spec().names.index("psi_kappa")] == 0.0

    def test_reported_link_scale_pair(self):
        # Link-scale 0.20 corresponds to a real-scale ceiling of ~0.55.
        spec = self.spec()
        pv = spec.untransform(np.array([0.20, np.log(17.05), 1.0, 5.0, 1.6,
                                        -0.26, 3.8, -2.0, 0.0, 0.0]))
        assert pv.g0 == pytest.approx(0.54983399731247795, rel=1e-12)
        assert pv.beta_r == pytest.approx(17.05, rel=1e-12)

    def test_round_trip_identity(self):
        rng = np.random.default_rng(8)
        spec = self.spec()
        for _ in range(25):
            x = np.concatenate([rng.normal(scale=2.0, size=8), rng.normal(size=2)])
            pv = spec.untransform(x)
            np.testing.assert_allclose(spec.transform(pv), x, rtol=1e-12, atol=1e-12)

    def test_domain_errors(self):
        spec = self.spec()
        bad = ParamVector(g0=1.0 - 1e-18, beta_r=-1.0, sigma_r=3.0, mu_s=160.0,
                          sigma_s=5.0, kappa=1.0, delta_kappa=20.0, psi_kappa=0.5,
                          beta=np.array([0.0, 1.0]))
        with pytest.raises(DataError):
            spec.transform(bad)

    def test_mode_layouts(self):
        assert ParamSpec("variable", "mixture", 3).n_free == 11
        assert ParamSpec("fixed", "mixture", 3).n_free == 10
        assert ParamSpec("variable", "single", 1).n_free == 7
        assert ParamSpec("variable", "none", 1).n_free == 6
        assert ParamSpec("fixed", "none", 11).n_free == 15


class TestAic:
    def test_frozen_arithmetic(self):
        assert aic_value(19, -2928.2775) == pytest.approx(5894.555, abs=1e-9)
        assert aic_value(9, -3190.392) == pytest.approx(6398.784, abs=1e-9)

    def test_inert_parameter_adds_two(self):
        rng = np.random.default_rng(1)
        for _ in range(10):
            k, ll = int(rng.integers(1, 30)), float(rng.normal(scale=1000))
            assert aic_value(k + 1, ll) - aic_value(k, ll) == pytest.approx(2.0)

    def test_fit_result_identity(self, fitted):
        assert fitted.aic == pytest.approx(aic(fitted), rel=1e-15)
        assert fitted.aic == pytest.approx(2 * fitted.n_free - 2 * fitted.loglik)


class TestFit:
    def test_converges_and_reports(self, fitted):
        assert fitted.converged
        assert np.isfinite(fitted.loglik)
        assert fitted.abundance > 0
        assert fitted.n_free == 8
        assert fitted.lambda_detected > 0
        assert set(fitted.estimates()) == set(fitted.names)

    def test_refit_from_optimum_is_fixed_point(self, problem, fitted):
        again = fit(problem["dataset"], problem["array"], problem["formula"],
                    problem["grids"], problem["t_r"], source_level_mode="fixed",
                    bearing_mode="mixture", standardize=False,
                    config=FitConfig(start=fitted.params))
        assert again.loglik == pytest.approx(fitted.loglik, abs=1e-5)
        np.testing.assert_allclose(again.transformed, fitted.transformed,
                                   rtol=1e-3, atol=1e-3)

    def test_deterministic_repeat(self, problem):
        runs = [fit(problem["dataset"], problem["array"], problem["formula"],
                    problem["grids"], problem["t_r"], source_level_mode="fixed",
                    bearing_mode="mixture", standardize=False) for _ in range(2)]
        assert runs[0].loglik == runs[1].loglik
        np.testing.assert_array_equal(runs[0].transformed, runs[1].transformed)

    def test_nonconvergence_is_flagged_not_raised(self, problem):
        res = fit(problem["dataset"], problem["array"], problem["formula"],
                  problem["grids"], problem["t_r"], source_level_mode="fixed",
                  bearing_mode="mixture", standardize=False,
                  config=FitConfig(max_iterations=1, max_restarts=0))
        assert not res.converged
        assert res.status

    def test_impossible_start_raises_with_advice(self, problem):
        bad = ParamVector(g0=0.5, beta_r=15.0, sigma_r=3.0, mu_s=1.0, sigma_s=None,
                          kappa=1.0, delta_kappa=15.0, psi_kappa=0.1,
                          beta=np.zeros(1))
        with pytest.raises(DataError, match="start values"):
            fit(problem["dataset"], problem["array"], problem["formula"],
                problem["grids"], problem["t_r"], source_level_mode="fixed",
                bearing_mode="mixture", standardize=False, config=FitConfig(start=bad))

    def test_gradient_consistency_across_step_sizes(self, problem):
        design = build_design_matrix(parse_formula(problem["formula"]),
                                     problem["mesh"], standardize=False)
        ev = LikelihoodEvaluator(problem["dataset"], problem["array"], design,
                                 problem["grids"], problem["t_r"])
        spec = ParamSpec("fixed", "mixture", design.n_columns)
        start = default_start(problem["dataset"], problem["array"], design,
                              problem["grids"], problem["t_r"], "fixed", "mixture")
        x = spec.transform(start)

        def f(v):
            return ev.full_loglik(spec.untransform(v))

        g_default = finite_difference_gradient(f, x)
        fine = np.empty_like(x)
        for i in range(x.size):
            h = max(1e-5, 1e-7 * abs(x[i])) / 8.0
            up, down = x.copy(), x.copy()
            up[i] += h
            down[i] -= h
            fine[i] = (f(up) - f(down)) / (2.0 * h)
        scale = np.maximum(np.abs(fine), 1e-2 * np.abs(fine).max())
        np.testing.assert_allclose(g_default / scale, fine / scale, atol=2e-5)


class TestStandardizationInvariance:
    def test_fitted_surface_agrees(self):
        p = small_problem(seed=11, formula="D ~ v")
        fits = {}
        for standardize in (False, True):
            fits[standardize] = fit(
                p["dataset"], p["array"], "D ~ v", p["grids"], p["t_r"],
                source_level_mode="fixed", bearing_mode="mixture",
                standardize=standardize)
        surfaces = {
            s: log_density(r.params.beta, r.design) for s, r in fits.items()
        }
        np.testing.assert_allclose(surfaces[True], surfaces[False], atol=5e-3)
        assert fits[True].abundance == pytest.approx(fits[False].abundance, rel=5e-3)


class TestModelSelect:
    def test_ranking_and_duplicates(self, problem):
        ranked = model_select(
            problem["dataset"], problem["array"], ["D ~ 1", "D ~ v", "D ~ 1"],
            problem["grids"], problem["t_r"], source_level_mode="fixed",
            bearing_mode="mixture", standardize=False)
        assert len(ranked) == 3
        aics = [r.aic for r in ranked if r.converged]
        assert aics == sorted(aics)
        assert ranked[0].delta_aic == 0.0
        dup = [r for r in ranked if r.formula == "D ~ 1"]
        assert len(dup) == 2
        assert dup[0].aic == pytest.approx(dup[1].aic, abs=1e-4)

    def test_single_candidate(self, problem):
        ranked = model_select(problem["dataset"], problem["array"], ["D ~ 1"],
                              problem["grids"], problem["t_r"],
                              source_level_mode="fixed", bearing_mode="mixture",
                              standardize=False)
        assert len(ranked) == 1
        assert ranked[0].delta_aic == 0.0

    def test_empty_candidates_rejected(self, problem):
        with pytest.raises(DataError):
            model_select(problem["dataset"], problem["array"], [],
                         problem["grids"], problem["t_r"])
