"""Maximum-likelihood fitting on the unconstrained (link) scale.

A bounded quasi-Newton search (L-BFGS-B) maximizes the full log-likelihood.
Gradients are central finite differences with per-parameter step
``max(1e-5, 1e-7 |theta|)``; convergence requires a relative log-likelihood
change below ``loglik_tol`` and a gradient infinity-norm below
``gradient_tol``.  Optional multi-start jitters the transformed start vector
with deterministic per-start seeds.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import minimize

from .density import DesignMatrix, ModelFormula, build_design_matrix, parse_formula, total_abundance
from .geometry import SensorArray
from .likelihood import Dataset, LatentGrids, LikelihoodEvaluator
from .params import ParamSpec, ParamVector
from .validation import DataError

_BIG = 1e15
# Inactive safety box on the transformed scale; keeps the line search from
# wandering into overflow territory.
_SCALAR_BOUND = 25.0


@dataclass(frozen=True)
class FitConfig:
    max_iterations: int = 500
    loglik_tol: float = 1e-8
    gradient_tol: float = 1e-4
    n_starts: int = 1
    jitter_sd: float = 0.5
    start_seed: int = 0
    start: ParamVector | None = None
    use_bearings: bool = True
    max_restarts: int = 6


@dataclass
class FitResult:
    params: ParamVector
    transformed: np.ndarray
    names: list[str]
    links: list[str]
    loglik: float
    aic: float
    abundance: float
    lambda_detected: float
    expected_singletons: float
    converged: bool
    status: str
    n_iterations: int
    n_evaluations: int
    runtime_s: float
    n_free: int
    formula: str
    design: DesignMatrix = field(repr=False, default=None)
    spec: ParamSpec = field(repr=False, default=None)

    def estimates(self) -> dict:
        """Real-scale and link-scale estimates keyed by parameter name."""
        return {
            name: {"link": link, "real": real, "transformed": float(t)}
            for name, link, t, real in zip(
                self.names, self.links, self.transformed, _real_values(self))
        }


def _real_values(result: FitResult):
    pv = result.params
    for name in result.names:
        if name.startswith("beta["):
            yield float(pv.beta[int(name[5:-1])])
        else:
            yield float(getattr(pv, name))


def aic(result: FitResult) -> float:
    return aic_value(result.n_free, result.loglik)


def aic_value(n_params: int, loglik: float) -> float:
    return 2.0 * n_params - 2.0 * loglik


def finite_difference_gradient(fun, x: np.ndarray) -> np.ndarray:
    """Central differences with step max(1e-5, 1e-7 |x_i|)."""
    grad = np.empty_like(x)
    for i in range(x.size):
        h = max(1e-5, 1e-7 * abs(x[i]))
        up, down = x.copy(), x.copy()
        up[i] += h
        down[i] -= h
        grad[i] = (fun(up) - fun(down)) / (2.0 * h)
    return grad


def default_start(data: Dataset, array: SensorArray, design: DesignMatrix,
                  grids: LatentGrids, t_r: float, source_level_mode: str,
                  bearing_mode: str, use_bearings: bool = True) -> ParamVector:
    """Documented default start values.

    Detection and propagation start at round mid-range values; the mean
    source level starts at the median observed level plus the transmission
    loss over the median sensor spacing.  Density coefficients come from a
    Poisson moment match: calls are soft-assigned to mesh cells under the
    probe parameters and a small Poisson regression of those expected counts
    (with the detected-exposure offset) seeds the full surface.  A flat
    surface with a matched intercept is the fallback; starting flat parks
    inhomogeneous fits in a spurious flat local optimum often enough to
    matter.
    """
    beta_r0, sigma_r0, g00 = 15.0, 3.0, 0.5
    detected = data.omega.astype(bool)
    if detected.any():
        median_r = float(np.median(data.received[detected]))
        mu_s0 = median_r + beta_r0 * np.log10(float(np.median(array.spacings())))
    else:
        mu_s0 = 160.0
    mu_s0 = max(mu_s0, 1.0)
    sigma_s0 = None if source_level_mode == "fixed" else 5.0
    kappa0 = None if bearing_mode == "none" else 1.0
    delta0 = 20.0 if bearing_mode == "mixture" else None
    psi0 = 0.1 if bearing_mode == "mixture" else None

    beta0 = np.zeros(design.n_columns)
    probe = ParamVector(g0=g00, beta_r=beta_r0, sigma_r=sigma_r0, mu_s=mu_s0,
                        sigma_s=sigma_s0, kappa=kappa0, delta_kappa=delta0,
                        psi_kappa=psi0, beta=beta0)
    evaluator = LikelihoodEvaluator(data, array, design, grids, t_r,
                                    use_bearings=use_bearings)
    lambda_unit = evaluator.components(probe)["lambda"]
    if data.n_calls > 0 and lambda_unit > 0:
        beta0[0] = float(np.log(data.n_calls / lambda_unit))
    else:
        beta0[0] = -5.0
    probe = probe.with_beta(beta0)
    if design.n_columns > 1 and data.n_calls >= 3 * design.n_columns:
        counts = evaluator.call_cell_weights(probe).sum(axis=0)
        exposure = evaluator.detected_exposure(probe)
        beta_glm = _poisson_glm(design.matrix, counts, exposure, beta0)
        if beta_glm is not None:
            probe = probe.with_beta(beta_glm)
    return probe


def _poisson_glm(x: np.ndarray, counts: np.ndarray, exposure: np.ndarray,
                 beta0: np.ndarray) -> np.ndarray | None:
    """Ridge-stabilized Newton fit of counts ~ Poisson(exposure * e^{x b})."""
    keep = exposure > 0
    if keep.sum() < x.shape[1]:
        return None
    x, counts, exposure = x[keep], counts[keep], exposure[keep]
    log_e = np.log(exposure)
    beta = beta0.copy()

    def loglik(b):
        eta = log_e + x @ b
        return float(counts @ eta - np.exp(eta).sum())

    current = loglik(beta)
    for _ in range(50):
        mu = np.exp(log_e + x @ beta)
        grad = x.T @ (counts - mu)
        hess = (x * mu[:, None]).T @ x + 1e-8 * np.eye(x.shape[1])
        try:
            step = np.linalg.solve(hess, grad)
        except np.linalg.LinAlgError:
            return None
        scale = 1.0
        for _ in range(30):
            candidate = beta + scale * step
            value = loglik(candidate)
            if np.isfinite(value) and value >= current - 1e-12:
                break
            scale /= 2.0
        else:
            break
        beta, improved = candidate, value - current
        current = value
        if abs(improved) < 1e-9:
            break
    if not np.all(np.isfinite(beta)) or np.abs(beta).max() > 1e3:
        return None
    return beta


def fit(data: Dataset, array: SensorArray, formula, grids: LatentGrids, t_r: float,
        source_level_mode: str = "variable", bearing_mode: str = "mixture",
        standardize: bool = True, config: FitConfig = FitConfig()) -> FitResult:
    """Maximize the full likelihood; returns a flagged (never raising) result.

    ``formula`` may be a formula string, a :class:`ModelFormula`, or a
    prebuilt :class:`DesignMatrix`.  Non-convergence within the iteration
    budget is reported through ``converged``/``status``, not an exception.
    A start value with non-finite likelihood raises, with advice.
    """
    started = time.perf_counter()
    if isinstance(formula, str):
        formula = parse_formula(formula, known_covariates=list(grids.mesh.covariates))
    if isinstance(formula, ModelFormula):
        design = build_design_matrix(formula, grids.mesh, standardize=standardize)
    elif isinstance(formula, DesignMatrix):
        design = formula
    else:
        raise DataError("formula must be a string, ModelFormula, or DesignMatrix")
    use_bearings = config.use_bearings and bearing_mode != "none"
    evaluator = LikelihoodEvaluator(data, array, design, grids, t_r,
                                    use_bearings=use_bearings)
    spec = ParamSpec(source_level_mode, bearing_mode, design.n_columns)
    start_pv = config.start if config.start is not None else default_start(
        data, array, design, grids, t_r, source_level_mode, bearing_mode, use_bearings)

    # The optimizer sees an orthonormalized density-coefficient block (the
    # raw polynomial/spline columns can be badly conditioned); results are
    # mapped back to the design's own basis for reporting.
    n_scalar = len(spec.scalar_names)
    # Dividing by sqrt(M) keeps the orthonormalized coordinates on the same
    # O(1) scale as the link-transformed scalars.
    r_mat = np.linalg.qr(design.matrix, mode="r") / np.sqrt(design.matrix.shape[0])
    if not np.all(np.abs(np.diag(r_mat)) > 1e-12):
        r_mat = np.eye(design.n_columns)

    def to_optimizer(x_raw: np.ndarray) -> np.ndarray:
        return np.concatenate([x_raw[:n_scalar], r_mat @ x_raw[n_scalar:]])

    def to_raw(x_opt: np.ndarray) -> np.ndarray:
        beta = np.linalg.solve(r_mat, x_opt[n_scalar:])
        return np.concatenate([x_opt[:n_scalar], beta])

    x0 = to_optimizer(spec.transform(start_pv))

    n_evaluations = 0

    def objective(x: np.ndarray) -> float:
        nonlocal n_evaluations
        n_evaluations += 1
        try:
            with np.errstate(invalid="ignore", over="ignore"):
                value = evaluator.full_loglik(spec.untransform(to_raw(x)))
        except DataError:
            return _BIG
        return -value if np.isfinite(value) else _BIG

    def gradient(x: np.ndarray) -> np.ndarray:
        return finite_difference_gradient(objective, x)

    if objective(x0) >= _BIG:
        raise DataError(
            "full log-likelihood is not finite at the start values; "
            "supply different start values"
        )

    starts = [x0]
    for s in range(1, config.n_starts):
        rng = np.random.default_rng(np.random.SeedSequence(config.start_seed, spawn_key=(s,)))
        starts.append(x0 + config.jitter_sd * rng.standard_normal(x0.size))

    bounds = ([(-_SCALAR_BOUND, _SCALAR_BOUND)] * n_scalar
              + [(-1e6, 1e6)] * design.n_columns)
    options = {
        "maxiter": config.max_iterations,
        "ftol": config.loglik_tol,
        "gtol": config.gradient_tol,
        "maxfun": 10_000_000,
        "maxcor": 25,
    }

    def solve(x_start):
        """L-BFGS-B with cold restarts.

        The density block can form a long flat ridge; restarting from the
        incumbent clears stale curvature memory and reliably crawls to the
        ridge top instead of stopping partway.
        """
        res = minimize(objective, x_start, jac=gradient, method="L-BFGS-B",
                       bounds=bounds, options=options)
        iters = int(res.nit)
        for _ in range(config.max_restarts):
            again = minimize(objective, res.x, jac=gradient, method="L-BFGS-B",
                             bounds=bounds, options=options)
            iters += int(again.nit)
            improved = res.fun - again.fun
            if again.fun <= res.fun:
                res = again
            if improved <= max(abs(res.fun), 1.0) * 10 * config.loglik_tol:
                break
        return res, iters

    best = None
    total_iter = 0
    for x_start in starts:
        if objective(x_start) >= _BIG:
            continue
        res, iters = solve(x_start)
        total_iter += iters
        if best is None or res.fun < best.fun:
            best = res
    if best is None:
        raise DataError("no start value produced a finite likelihood")

    pv = spec.untransform(to_raw(best.x))
    components = evaluator.components(pv)
    loglik = components["full"]
    result = FitResult(
        params=pv,
        transformed=spec.transform(pv),
        names=spec.names,
        links=spec.links,
        loglik=float(loglik),
        aic=aic_value(spec.n_free, float(loglik)),
        abundance=total_abundance(pv.beta, design, grids.mesh),
        lambda_detected=components["lambda"],
        expected_singletons=components["expected_singletons"],
        converged=bool(best.success),
        status=str(best.message),
        n_iterations=total_iter,
        n_evaluations=n_evaluations,
        runtime_s=time.perf_counter() - started,
        n_free=spec.n_free,
        formula=str(design.formula),
        design=design,
        spec=spec,
    )
    return result


@dataclass
class CandidateResult:
    formula: str
    converged: bool
    abundance: float
    n_free: int
    aic: float
    delta_aic: float
    status: str
    fit: FitResult = field(repr=False, default=None)


def model_select(data: Dataset, array: SensorArray, candidates, grids: LatentGrids,
                 t_r: float, source_level_mode: str = "variable",
                 bearing_mode: str = "mixture", standardize: bool = True,
                 config: FitConfig = FitConfig()) -> list[CandidateResult]:
    """Fit every candidate formula and rank the converged fits by AIC.

    Non-convergent or failing candidates are reported with their status and
    excluded from the ranking (their ``delta_aic`` is NaN and they sort last).
    """
    candidates = list(candidates)
    if not candidates:
        raise DataError("model selection needs at least one candidate formula")
    rows: list[CandidateResult] = []
    for formula in candidates:
        try:
            res = fit(data, array, formula, grids, t_r, source_level_mode,
                      bearing_mode, standardize, config)
            rows.append(CandidateResult(
                formula=res.formula, converged=res.converged, abundance=res.abundance,
                n_free=res.n_free, aic=res.aic, delta_aic=np.nan,
                status=res.status, fit=res))
        except DataError as exc:
            rows.append(CandidateResult(
                formula=str(formula), converged=False, abundance=np.nan,
                n_free=0, aic=np.nan, delta_aic=np.nan, status=str(exc), fit=None))
    ranked = sorted(
        rows,
        key=lambda r: (not r.converged, r.aic if r.converged else np.inf, r.formula),
    )
    best_aic = next((r.aic for r in ranked if r.converged), np.nan)
    for r in ranked:
        if r.converged:
            r.delta_aic = r.aic - best_aic
    return ranked
