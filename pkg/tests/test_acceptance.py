"""Acceptance suite: every exit criterion at its stated tolerance.

Run with ``pytest tests/test_acceptance.py -v -s`` to see one PASS/FAIL line
per criterion.  The simulation-grid criteria refit tens of replicates and
dominate the runtime.
"""

import json
import math
import os

import numpy as np
import pytest
from scipy.integrate import quad

from pamscr import cli
from pamscr.density import parse_formula
from pamscr.estimation import FitConfig, aic_value, model_select
from pamscr.likelihood import Dataset, LatentGrids
from pamscr.observation import (
    BearingParams,
    SourceLevelPrior,
    poisson_binomial_pmf,
    poisson_binomial_tail,
    source_level_logdensity,
    truncated_normal_logpdf,
    von_mises_mixture_logpdf,
)
from pamscr.simulation import (
    SCENARIO_PARAMS,
    SCENARIO_PERIODS,
    SimConfig,
    replicate_seed,
    run_scenarios,
    scenario_geometry,
    simulate,
)
from pamscr.snr import JanoschekParams, NoiseData, SnrEvaluator, SnrModel

from conftest import make_tiny
from oracles import SnrTinyInstance

ACCEPT_SEED = 20_100_831
REPLICATES = 32
SCENARIO_FIT = FitConfig(loglik_tol=1e-7, max_restarts=1)
WORKERS = 2


def _report(name: str, passed: bool, detail: str):
    print(f"\n[ACCEPTANCE] {name}: {'PASS' if passed else 'FAIL'} ({detail})")
    assert passed, f"{name}: {detail}"


# -- criterion: brute-force oracle equivalence on small instances ------------


class TestOracleEquivalence:
    def test_primary_likelihood_components(self):
        worst = 0.0
        for seed in range(8):
            t = make_tiny(seed=seed, n_calls=3)
            got = t["evaluator"].components(t["pv"])
            oracle = t["oracle"]
            pairs = [
                (got["conditional"],
                 oracle.conditional_loglik(t["omega"], t["bearings"], t["received"])),
                (got["full"],
                 oracle.full_loglik(t["omega"], t["bearings"], t["received"])),
                (got["lambda"], oracle.lam()),
                (got["expected_singletons"], oracle.expected_singletons()),
            ]
            for value, want in pairs:
                worst = max(worst, abs(value - want) / abs(want))
        _report("oracle equivalence (conditional/full/lambda/singletons)",
                worst < 1e-10, f"worst relative error {worst:.2e} over 8 instances")

    def test_snr_likelihood(self):
        worst = 0.0
        for seed in (7, 8, 9):
            t = make_tiny(seed=seed, bearing_mode="single", n_calls=2)
            rng = np.random.default_rng(seed + 100)
            n, k = t["data"].n_calls, t["array"].k
            call_noise = rng.uniform(90.0, 95.0, size=(n, k))
            received = np.where(t["data"].omega.astype(bool),
                                np.maximum(t["data"].received, call_noise + 0.5), np.nan)
            data = Dataset(t["data"].omega, t["data"].bearings, received, m_min=2)
            noise = NoiseData(call_noise, rng.uniform(90.0, 96.0, size=(2, k)))
            jp = JanoschekParams(0.7, 0.04, 2.0)
            pv = t["pv"]
            model = SnrModel(jp, pv.propagation(), pv.prior(), pv.kappa, pv.beta)
            got = SnrEvaluator(data, noise, t["array"], t["design"],
                               t["grids"]).full_loglik(model)
            nodes, weights = t["grids"].nodes_and_weights(pv.prior())
            oracle = SnrTinyInstance(
                sensors=t["array"].positions, cells=t["mesh"].centroids,
                areas_km2=t["mesh"].areas / 1e6,
                log_density=t["mesh"].covariates["v"], sl_nodes=nodes,
                sl_weights=weights, g0=0.5, t_r=96.0, beta_r=pv.beta_r,
                sigma_r=pv.sigma_r, kappa=pv.kappa, m_min=2, theta_u=jp.theta_u,
                theta_r=jp.theta_r, theta_i=jp.theta_i,
                noise_sample=noise.noise_sample)
            want = oracle.snr_full_loglik(t["omega"], t["bearings"], received,
                                          call_noise)
            worst = max(worst, abs(got - want) / abs(want))
        _report("oracle equivalence (SNR full likelihood)", worst < 1e-8,
                f"worst relative error {worst:.2e} over 3 instances")


# -- criterion: Poisson-binomial against full enumeration --------------------


class TestPoissonBinomial:
    def test_thousand_random_vectors(self):
        rng = np.random.default_rng(99)
        worst = 0.0
        for _ in range(1000):
            k = int(rng.integers(2, 11))
            p = rng.uniform(size=k)
            histories = ((np.arange(2**k)[:, None] >> np.arange(k)) & 1).astype(bool)
            probs = np.where(histories, p, 1.0 - p).prod(axis=1)
            counts = histories.sum(axis=1)
            m = int(rng.integers(1, k + 1))
            enum_tail = probs[counts >= m].sum()
            enum_one = probs[counts == 1].sum()
            got_tail = float(poisson_binomial_tail(p, m))
            got_one = float(poisson_binomial_pmf(p)[1])
            worst = max(worst, abs(got_tail - enum_tail), abs(got_one - enum_one))
        _report("Poisson-binomial vs 2^K enumeration", worst < 1e-12,
                f"worst absolute error {worst:.2e} over 1000 vectors, K <= 10")


# -- criterion: density normalization by quadrature --------------------------


class TestDensityNormalization:
    def test_all_observation_densities_integrate_to_one(self):
        rng = np.random.default_rng(1234)
        worst = 0.0
        for _ in range(100):
            mu = rng.uniform(80.0, 130.0)
            sigma = rng.uniform(1.0, 6.0)
            t_r = rng.uniform(90.0, 100.0)
            total, _ = quad(lambda r: math.exp(truncated_normal_logpdf(r, mu, sigma, t_r)),
                            t_r, max(mu, t_r) + 12 * sigma)
            worst = max(worst, abs(total - 1.0))
        for _ in range(100):
            b = BearingParams(rng.uniform(0.0, 3.0), rng.uniform(0.0, 50.0),
                              rng.uniform(0.01, 0.99))
            mu = rng.uniform(0.0, 2 * np.pi)
            total, _ = quad(lambda y: math.exp(von_mises_mixture_logpdf(y, mu, b)),
                            0.0, 2 * np.pi, limit=300)
            worst = max(worst, abs(total - 1.0))
        for _ in range(100):
            prior = SourceLevelPrior(rng.uniform(0.5, 170.0), rng.uniform(0.5, 8.0))
            total, _ = quad(lambda s: math.exp(source_level_logdensity(s, prior)),
                            0.0, prior.mu_s + 12 * prior.sigma_s, limit=300)
            worst = max(worst, abs(total - 1.0))
        _report("density normalization (received/bearing/source level)",
                worst < 1e-6, f"worst |integral - 1| = {worst:.2e} over 300 draws")


# -- criteria: simulation scenario grid ---------------------------------------


@pytest.fixture(scope="session")
def scenario1():
    return run_scenarios(["1a", "1b", "1c", "1e"], replicates=REPLICATES,
                         base_seed=ACCEPT_SEED, fit_config=SCENARIO_FIT,
                         n_workers=WORKERS)


@pytest.fixture(scope="session")
def scenario2():
    return run_scenarios(["2e"], replicates=REPLICATES, base_seed=ACCEPT_SEED,
                         fit_config=SCENARIO_FIT, n_workers=WORKERS)


class TestScenarioGrid:
    def test_scenario_1a_near_unbiased(self, scenario1):
        m = scenario1["1a"]
        _report("scenario 1a |relative bias| <= 0.10",
                m.n_converged >= 30 and abs(m.relative_bias) <= 0.10,
                f"RB={m.relative_bias:+.4f}, CV={m.cv:.3f}, "
                f"converged {m.n_converged}/{m.n_converged + m.n_failed}")

    def test_scenario_1b_strong_negative_bias(self, scenario1):
        m = scenario1["1b"]
        _report("scenario 1b relative bias <= -0.20",
                m.n_converged >= 30 and m.relative_bias <= -0.20,
                f"RB={m.relative_bias:+.4f}, converged {m.n_converged}")

    def test_scenario_1e_severe_positive_bias(self, scenario1):
        m = scenario1["1e"]
        _report("scenario 1e relative bias >= +1.00",
                m.n_converged >= 30 and m.relative_bias >= 1.00,
                f"RB={m.relative_bias:+.4f}, converged {m.n_converged}")

    def test_scenario_2e_severe_positive_bias(self, scenario2):
        m = scenario2["2e"]
        _report("scenario 2e relative bias >= +1.00",
                m.n_converged >= 30 and m.relative_bias >= 1.00,
                f"RB={m.relative_bias:+.4f}, converged {m.n_converged}")

    def test_scenario_1c_more_variance_no_bias(self, scenario1):
        a, c = scenario1["1a"], scenario1["1c"]
        _report("scenario 1c raises CV without |RB| > 0.10",
                c.cv > a.cv and abs(c.relative_bias) <= 0.10,
                f"CV 1c={c.cv:.3f} vs 1a={a.cv:.3f}, RB 1c={c.relative_bias:+.4f}")

    def test_parameter_recovery(self, scenario1):
        m = scenario1["1a"]
        mu_s = float(np.mean(m.mu_s))
        beta_r = float(np.mean(m.beta_r))
        _report("parameter recovery (mu_s within 1.5 dB, beta_r within 1.0)",
                abs(mu_s - 163.0) <= 1.5 and abs(beta_r - 18.0) <= 1.0,
                f"mean mu_s={mu_s:.2f} (truth 163), mean beta_r={beta_r:.2f} (truth 18)")


# -- criterion: SNR step-function bridge --------------------------------------


class TestLimitBridge:
    def test_snr_reduces_to_threshold_likelihood(self):
        worst = 0.0
        for seed in (12, 13):
            t = make_tiny(seed=seed, bearing_mode="single", n_calls=3)
            pv = t["pv"]
            n, k = t["data"].n_calls, t["array"].k
            noise = NoiseData(np.full((n, k), t["t_r"]), np.full((1, k), t["t_r"]))
            jp = JanoschekParams(pv.g0, 1e14, 2.0)
            model = SnrModel(jp, pv.propagation(), pv.prior(), pv.kappa, pv.beta)
            got = SnrEvaluator(t["data"], noise, t["array"], t["design"],
                               t["grids"]).full_loglik(model)
            want = t["evaluator"].full_loglik(pv)
            worst = max(worst, abs(got - want) / abs(want))
        _report("SNR step-limit bridge to the primary likelihood",
                worst < 1e-6, f"worst relative difference {worst:.2e}")


# -- criterion: AIC identity and 35-candidate selection ----------------------


CANDIDATE_FORMULAS = [
    "D ~ 1",
    "D ~ distance_to_coast + distance_to_coast2",
    "D ~ distance_to_coast + distance_to_coast2 + distance_to_coast3",
    "D ~ depth",
    "D ~ depth + depth2",
    "D ~ logdepth",
    "D ~ logdepth + depth + depth2",
    "D ~ logdepth + distance_to_coast + distance_to_coast2 + distance_to_coast3",
    "D ~ logdepth + depth + distance_to_coast + distance_to_coast2",
    "D ~ logdepth + depth + depth2 + distance_to_coast",
    "D ~ depth + distance_to_coast",
    "D ~ depth + distance_to_coast + distance_to_coast2",
    "D ~ depth + depth2 + distance_to_coast",
    "D ~ depth + depth2 + distance_to_coast + distance_to_coast2",
    "D ~ depth + depth2 + distance_to_coast + distance_to_coast2 + distance_to_coast3",
    "D ~ s(depth, k = 3, fx = TRUE)",
    "D ~ s(depth, k = 4, fx = TRUE)",
    "D ~ s(depth, k = 5, fx = TRUE)",
    "D ~ s(depth, k = 6, fx = TRUE)",
    "D ~ s(depth, k = 7, fx = TRUE)",
    "D ~ s(depth, k = 8, fx = TRUE)",
    "D ~ s(depth, k = 6, fx = TRUE) + distance_to_coast",
    "D ~ s(depth, k = 6, fx = TRUE) + distance_to_coast + distance_to_coast2",
    "D ~ s(distance_to_coast, k = 3, fx = TRUE)",
    "D ~ s(distance_to_coast, k = 4, fx = TRUE)",
    "D ~ s(distance_to_coast, k = 5, fx = TRUE)",
    "D ~ s(distance_to_coast, k = 6, fx = TRUE)",
    "D ~ s(distance_to_coast, k = 7, fx = TRUE)",
    "D ~ s(distance_to_coast, k = 8, fx = TRUE)",
    "D ~ s(distance_to_coast, k = 6, fx = TRUE) + depth",
    "D ~ s(distance_to_coast, k = 6, fx = TRUE) + depth + depth2",
    "D ~ s(depth, k = 4, fx = TRUE) + s(distance_to_coast, k = 4, fx = TRUE)",
    "D ~ s(depth, k = 6, fx = TRUE) + s(distance_to_coast, k = 6, fx = TRUE)",
    "D ~ distance_to_coast + depth + depth:distance_to_coast",
    "D ~ distance_to_coast + distance_to_coast2 + depth + depth2 + depth:distance_to_coast",
]


class TestAicAndSelection:
    def test_aic_arithmetic_identity(self):
        value = aic_value(19, -2928.2775)
        ok = abs(value - 5894.555) < 1e-9 and abs(aic_value(9, -3190.392) - 6398.784) < 1e-9
        _report("AIC identity (2k - 2 logL)", ok,
                f"k=19, logL=-2928.2775 -> {value:.3f}")

    def test_thirty_five_candidates_rank(self):
        assert len(CANDIDATE_FORMULAS) == 35
        for text in CANDIDATE_FORMULAS:
            parse_formula(text)
        array, mesh = scenario_geometry(2)
        pv = SCENARIO_PARAMS[2]
        sim = simulate(SimConfig(params=pv, array=array, mesh=mesh,
                                 period=SCENARIO_PERIODS[2],
                                 seed=replicate_seed(ACCEPT_SEED, 2, 999)))
        ranked = model_select(
            sim.dataset, array, CANDIDATE_FORMULAS, LatentGrids(mesh, None), 96.0,
            source_level_mode="fixed", bearing_mode="mixture", standardize=True,
            config=FitConfig(loglik_tol=1e-7, max_restarts=1))
        converged = [r for r in ranked if r.converged]
        aics = [r.aic for r in converged]
        ok = (len(ranked) == 35 and len(converged) >= 1
              and aics == sorted(aics) and converged[0].delta_aic == 0.0)
        _report("model selection over the 35-formula candidate list", ok,
                f"{len(converged)}/35 converged; best: {converged[0].formula!r} "
                f"(AIC {converged[0].aic:.2f}) on n={sim.dataset.n_calls}")


# -- criterion: case-study reproduction (conditional on external data) -------


class TestCaseStudy:
    def test_case_study_reproduction(self):
        directory = os.environ.get("PAMSCR_CASE_STUDY_DIR")
        if not directory:
            print("\n[ACCEPTANCE] case-study reproduction: SKIPPED "
                  "(external six-sensor single-day dataset is not bundled; "
                  "set PAMSCR_CASE_STUDY_DIR to run. The property suites above "
                  "stand in, per the criterion's escape clause.)")
            pytest.skip("case-study dataset not available")
        from pamscr import io
        from pamscr.estimation import fit

        sensors = io.load_sensors(os.path.join(directory, "sensors.csv"))
        field = io.load_covariate_field(os.path.join(directory, "covariates.csv"))
        from pamscr.geometry import build_mesh

        mesh = build_mesh(sensors, field, 10_000.0, 2_500.0, 50_000.0, 5_000.0)
        raw = io.load_raw(os.path.join(directory, "detections.csv"),
                          os.path.join(directory, "bearings.csv"),
                          os.path.join(directory, "received.csv"))
        dataset, report = io.load_and_truncate(raw, t_r=96.0, m_min=2)
        assert report.n_retained == 443
        from pamscr.observation import SourceLevelGrid

        grids = LatentGrids(mesh, SourceLevelGrid(100.0, 220.0, 3.0))
        best = fit(dataset, sensors,
                   "D ~ s(depth, k = 6, fx = TRUE) + s(distance_to_coast, k = 6, fx = TRUE)",
                   grids, 96.0)
        assert abs(best.abundance - 5741.39) / 5741.39 <= 0.02
        assert abs(best.expected_singletons - 570.0) / 570.0 <= 0.05


# -- criterion: determinism of seeded CLI runs --------------------------------


class TestDeterminism:
    def test_identical_seed_identical_artifacts(self, tmp_path):
        import csv as _csv

        from pamscr.simulation import scenario_field

        config_doc = {
            "simulate": {"scenario": 2, "replicates": 1, "period": 6.0},
            "seed": 4242,
        }
        config_path = tmp_path / "sim.json"
        config_path.write_text(json.dumps(config_doc))
        sim_bytes = []
        for run in ("r1", "r2"):
            out = tmp_path / run
            assert cli.main(["simulate", "--config", str(config_path),
                             "--out", str(out)]) == 0
            sim_bytes.append(b"".join(
                (out / "rep_000" / name).read_bytes()
                for name in ("detections.csv", "bearings.csv", "received.csv",
                             "truth.json")))
        sim_ok = sim_bytes[0] == sim_bytes[1]

        # Fit the simulated data twice through the CLI with a fixed config.
        field = scenario_field()
        nodes = []
        for e in np.arange(-92_000.0, 92_001.0, 4_000.0):
            for n in np.arange(-72_000.0, 112_001.0, 4_000.0):
                values = field.sample(np.array([[e, n]]))
                nodes.append([e, n, float(values["depth"][0]), float(values["d"][0])])
        with open(tmp_path / "covariates.csv", "w", newline="") as fh:
            w = _csv.writer(fh)
            w.writerow(["easting", "northing", "depth", "d"])
            w.writerows(nodes)
        array, _ = scenario_geometry(2)
        with open(tmp_path / "sensors.csv", "w", newline="") as fh:
            w = _csv.writer(fh)
            w.writerow(["easting", "northing"])
            w.writerows(array.positions.tolist())
        fit_config = {
            "sensors": str(tmp_path / "sensors.csv"),
            "covariates": str(tmp_path / "covariates.csv"),
            "mesh": {"inner_radius_m": 10_000.0, "inner_spacing_m": 7_000.0,
                     "outer_radius_m": 70_000.0, "outer_spacing_m": 14_000.0},
            "data": {"detections": str(tmp_path / "r1" / "rep_000" / "detections.csv"),
                     "bearings": str(tmp_path / "r1" / "rep_000" / "bearings.csv"),
                     "received": str(tmp_path / "r1" / "rep_000" / "received.csv")},
            "t_r": 96.0,
            "period": 6.0,
            "source_level_mode": "fixed",
            "formula": "D ~ 1",
            "standardize": False,
            "seed": 7,
        }
        fit_path = tmp_path / "fit.json"
        fit_path.write_text(json.dumps(fit_config))
        fit_bytes = []
        for run in ("f1", "f2"):
            out = tmp_path / run
            assert cli.main(["fit", "--config", str(fit_path), "--out", str(out)]) == 0
            fit_bytes.append((out / "fit.json").read_bytes())
        fit_ok = fit_bytes[0] == fit_bytes[1]
        _report("determinism (seeded simulate + fit, bit-identical artifacts)",
                sim_ok and fit_ok,
                f"simulate identical={sim_ok}, fit identical={fit_ok}")
