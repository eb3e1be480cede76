"""Nonparametric call-resampling bootstrap and its summaries.

Calls are resampled with replacement, the model is refit per replicate
(seeded at the base optimum by default to cut refit cost), and uncertainty
is summarized as standard errors, coefficients of variation, nearest-rank
percentile intervals, and a per-cell quartile coefficient of dispersion of
the fitted density surface.
"""

from __future__ import annotations

from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, replace

import numpy as np

from .estimation import FitConfig, FitResult, fit
from .geometry import Mesh, SensorArray
from .likelihood import Dataset, LatentGrids
from .validation import DataError


def resample_indices(n: int, seed: int, replicate: int) -> np.ndarray:
    """Replicate ``replicate``'s resample of ``n`` calls (with replacement)."""
    rng = np.random.Generator(np.random.Philox(
        np.random.SeedSequence(seed, spawn_key=(replicate,))))
    return rng.integers(0, n, size=n)


def resample_dataset(data: Dataset, indices: np.ndarray) -> Dataset:
    return Dataset(data.omega[indices], data.bearings[indices],
                   data.received[indices], m_min=data.m_min, period=data.period,
                   noise=None if data.noise is None else data.noise[indices])


@dataclass
class BootstrapReplicates:
    names: list[str]
    real: np.ndarray           # (B, P) real-scale estimates, NaN when failed
    transformed: np.ndarray    # (B, P) link-scale estimates
    abundance: np.ndarray      # (B,)
    converged: np.ndarray      # (B,) bool
    betas: np.ndarray          # (B, n_beta) density coefficients

    @property
    def n_replicates(self) -> int:
        return len(self.abundance)


@dataclass
class BootstrapSummary:
    names: list[str]
    point_real: np.ndarray
    point_transformed: np.ndarray
    se_real: np.ndarray
    se_transformed: np.ndarray
    cv_percent: np.ndarray
    ci_real: np.ndarray          # (P, 2)
    ci_transformed: np.ndarray   # (P, 2)
    abundance: float
    abundance_se: float
    abundance_cv_percent: float
    abundance_ci: tuple[float, float]
    qcd: np.ndarray              # per mesh cell
    n_converged: int
    n_failed: int


def _replicate_job(args):
    (rep, seed, data, array, design, grids, t_r, sl_mode, bearing_mode,
     config) = args
    indices = resample_indices(data.n_calls, seed, rep)
    sample = resample_dataset(data, indices)
    try:
        res = fit(sample, array, design, grids, t_r, source_level_mode=sl_mode,
                  bearing_mode=bearing_mode, config=config)
    except DataError:
        return rep, None
    return rep, res


def bootstrap(data: Dataset, array: SensorArray, base: FitResult,
              grids: LatentGrids, t_r: float, b: int, seed: int,
              source_level_mode: str = "variable", bearing_mode: str = "mixture",
              config: FitConfig | None = None, start_from_base: bool = True,
              n_workers: int = 1) -> BootstrapReplicates:
    """Resample the calls ``b`` times and refit each replicate.

    Replicate ``i`` draws its indices from the counter-based stream
    ``(seed, i)``, so results are reproducible and independent of worker
    scheduling.  Non-convergent replicates are recorded, not fatal.
    """
    if b < 1:
        raise DataError("bootstrap needs at least one replicate")
    if data.n_calls < 1:
        raise DataError("cannot bootstrap an empty dataset")
    if config is None:
        config = FitConfig()
    if start_from_base:
        config = replace(config, start=base.params)
    jobs = [(rep, seed, data, array, base.design, grids, t_r,
             source_level_mode, bearing_mode, config) for rep in range(b)]
    if n_workers > 1:
        with ProcessPoolExecutor(max_workers=n_workers) as pool:
            raw = list(pool.map(_replicate_job, jobs, chunksize=4))
    else:
        raw = [_replicate_job(j) for j in jobs]
    raw.sort(key=lambda t: t[0])

    p = len(base.names)
    real = np.full((b, p), np.nan)
    transformed = np.full((b, p), np.nan)
    abundance = np.full(b, np.nan)
    converged = np.zeros(b, dtype=bool)
    betas = np.full((b, base.params.beta.size), np.nan)
    for rep, res in raw:
        if res is None:
            continue
        estimates = res.estimates()
        real[rep] = [estimates[name]["real"] for name in base.names]
        transformed[rep] = [estimates[name]["transformed"] for name in base.names]
        abundance[rep] = res.abundance
        converged[rep] = res.converged
        betas[rep] = res.params.beta
    return BootstrapReplicates(list(base.names), real, transformed, abundance,
                               converged, betas)


def nearest_rank(sorted_values: np.ndarray, q: float) -> float:
    """Nearest-rank percentile: value at rank ceil(q * B) of the sorted sample."""
    b = len(sorted_values)
    rank = int(np.ceil(q * b))
    rank = min(max(rank, 1), b)
    return float(sorted_values[rank - 1])


def _interval(values: np.ndarray, lo: float, hi: float) -> tuple[float, float]:
    ordered = np.sort(values)
    return nearest_rank(ordered, lo), nearest_rank(ordered, hi)


def summarize(replicates: BootstrapReplicates, base: FitResult, mesh: Mesh,
              lower: float = 0.025, upper: float = 0.975) -> BootstrapSummary:
    """SEs, CVs, percentile intervals, and the per-cell density QCD.

    Only converged replicates enter any summary.  The QCD per mesh cell is
    (Q3 - Q1) / (Q3 + Q1) over the replicate density estimates, a relative
    spread measure insensitive to outliers.
    """
    ok = replicates.converged
    if int(ok.sum()) < 2:
        raise DataError("need at least two converged replicates to summarize")
    real = replicates.real[ok]
    transformed = replicates.transformed[ok]
    abundance = replicates.abundance[ok]
    point_real = np.array([base.estimates()[n]["real"] for n in replicates.names])
    point_transformed = np.array(
        [base.estimates()[n]["transformed"] for n in replicates.names])

    se_real = real.std(axis=0, ddof=1)
    se_transformed = transformed.std(axis=0, ddof=1)
    with np.errstate(divide="ignore", invalid="ignore"):
        cv = 100.0 * se_real / np.abs(point_real)
    ci_real = np.array([_interval(real[:, i], lower, upper) for i in range(real.shape[1])])
    ci_transformed = np.array(
        [_interval(transformed[:, i], lower, upper) for i in range(real.shape[1])])

    densities = np.exp(replicates.betas[ok] @ base.design.matrix.T)   # (B_ok, M)
    q1 = np.array([nearest_rank(col, 0.25) for col in np.sort(densities, axis=0).T])
    q3 = np.array([nearest_rank(col, 0.75) for col in np.sort(densities, axis=0).T])
    with np.errstate(invalid="ignore", divide="ignore"):
        qcd = np.where(q1 + q3 > 0, (q3 - q1) / (q3 + q1), 0.0)

    return BootstrapSummary(
        names=list(replicates.names),
        point_real=point_real,
        point_transformed=point_transformed,
        se_real=se_real,
        se_transformed=se_transformed,
        cv_percent=cv,
        ci_real=ci_real,
        ci_transformed=ci_transformed,
        abundance=base.abundance,
        abundance_se=float(abundance.std(ddof=1)),
        abundance_cv_percent=float(100.0 * abundance.std(ddof=1) / abs(base.abundance)),
        abundance_ci=_interval(abundance, lower, upper),
        qcd=qcd,
        n_converged=int(ok.sum()),
        n_failed=int((~ok).sum()),
    )
