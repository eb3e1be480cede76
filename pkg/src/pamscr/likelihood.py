"""Marginal likelihood over the mesh and the source-level grid.

Each detected call contributes a double sum over mesh cells and source-level
nodes.  The bracketed numerator combines the unconditional detection-history
probability, the bearing and received-level log-densities, the cell density
weight and the source-level mass; the shared denominator is the effective
sampled area (density- and source-level-weighted probability of clearing the
minimum-detection threshold).  The conditional normalizing constants cancel
analytically, which is what the implementation exploits.

Everything is evaluated in log space with log-sum-exp reductions;
per-(cell, node) detection quantities are computed once per parameter vector
and shared across calls.  Reduction order is fixed (cells outer, source-level
nodes inner, calls ascending) so repeated evaluations are bit-identical.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import gammaln, log_ndtr, ndtr

from .density import DesignMatrix
from .geometry import Mesh, SensorArray, distances, true_bearings
from .observation import (
    SourceLevelGrid,
    SourceLevelPrior,
    log_bessel_i0,
    poisson_binomial_pmf,
)
from .params import ParamVector
from .validation import DataError, as_float_array

LOG_TWO_PI = float(np.log(2.0 * np.pi))

#: Floor for log detection probabilities inside matrix products; keeps
#: 0 * log(0) from producing NaN while still underflowing to zero mass.
_LOG_FLOOR = -1e30


@dataclass
class Dataset:
    """Detection histories with their bearings and received levels.

    ``omega`` is the (n, K) 0/1 detection matrix.  ``bearings`` (radians) and
    ``received`` (dB) are (n, K) with NaN exactly where ``omega`` is 0.  Every
    row must involve at least ``m_min`` sensors.  ``noise`` optionally carries
    per-call noise levels at all sensors for the SNR likelihood.
    """

    omega: np.ndarray
    bearings: np.ndarray
    received: np.ndarray
    m_min: int = 2
    period: float = 1.0
    noise: np.ndarray | None = None

    def __post_init__(self):
        omega = np.asarray(self.omega)
        if omega.ndim != 2:
            raise DataError("omega must be a 2-d detection matrix")
        if not np.isin(omega, (0, 1)).all():
            raise DataError("omega entries must be 0 or 1")
        self.omega = omega.astype(np.int8)
        n, k = self.omega.shape
        self.bearings = as_float_array(self.bearings, "bearings", ndim=2, shape=(n, k))
        self.received = as_float_array(self.received, "received", ndim=2, shape=(n, k))
        self.m_min = int(self.m_min)
        if self.m_min < 1:
            raise DataError("m_min must be at least 1")
        if n and self.omega.sum(axis=1).min() < self.m_min:
            raise DataError(f"every call must involve at least m_min={self.m_min} sensors")
        detected = self.omega.astype(bool)
        for name, mat in (("bearings", self.bearings), ("received", self.received)):
            if np.any(np.isnan(mat[detected])):
                raise DataError(f"{name} missing at a detecting sensor")
            if np.any(~np.isnan(mat[~detected])):
                raise DataError(f"{name} present at a non-detecting sensor")
        if not np.all((self.bearings[detected] >= 0) & (self.bearings[detected] < 2 * np.pi)):
            raise DataError("bearings must lie in [0, 2*pi) radians")
        if self.noise is not None:
            self.noise = as_float_array(self.noise, "noise", ndim=2, shape=(n, k))
            if not np.all(np.isfinite(self.noise)):
                raise DataError("noise matrix contains non-finite values")
        if not self.period > 0:
            raise DataError("study period must be positive")

    @property
    def n_calls(self) -> int:
        return self.omega.shape[0]

    @property
    def n_sensors(self) -> int:
        return self.omega.shape[1]


@dataclass(frozen=True)
class LatentGrids:
    """Discretization of the latent space: mesh cells x source-level nodes.

    ``sl_grid`` is ``None`` in fixed source-level mode, where the grid
    degenerates to a point mass at the fixed level.
    """

    mesh: Mesh
    sl_grid: SourceLevelGrid | None = None

    def nodes_and_weights(self, prior: SourceLevelPrior,
                          check_coverage: bool = False) -> tuple[np.ndarray, np.ndarray]:
        if prior.fixed:
            return np.array([prior.mu_s]), np.array([1.0])
        if self.sl_grid is None:
            raise DataError("variable source-level mode requires a source-level grid")
        nodes, weights = sl_weights(prior, self.sl_grid, check_coverage=check_coverage)
        return nodes, weights


def sl_weights(prior: SourceLevelPrior, grid: SourceLevelGrid,
               check_coverage: bool = True) -> tuple[np.ndarray, np.ndarray]:
    """Rectangle-rule masses of the source-level prior at the grid nodes.

    Masses are renormalized to sum to one, which removes the discretization
    bias of the plain rectangle rule.  With ``check_coverage`` the grid must
    capture all but 1e-6 of the prior mass, otherwise the caller is told to
    widen the grid.  Returns ``(nodes, weights)``.
    """
    if prior.fixed:
        return np.array([prior.mu_s]), np.array([1.0])
    nodes = grid.nodes
    z = (nodes - prior.mu_s) / prior.sigma_s
    log_mass = np.where(nodes > 0.0, -0.5 * z * z, -np.inf)
    with np.errstate(over="ignore"):
        mass = np.exp(log_mass - log_mass.max()) if np.any(np.isfinite(log_mass)) else np.zeros_like(log_mass)
    total = mass.sum()
    if not np.isfinite(total) or total <= 0:
        raise DataError("source-level grid carries no prior mass; widen the grid")
    if check_coverage:
        lo = max(0.0, grid.lower - grid.step / 2.0)
        hi = grid.upper + grid.step / 2.0
        z0 = ndtr(prior.mu_s / prior.sigma_s)
        covered = (ndtr((hi - prior.mu_s) / prior.sigma_s)
                   - ndtr((lo - prior.mu_s) / prior.sigma_s)) / z0
        if covered < 1.0 - 1e-6:
            raise DataError(
                f"source-level grid covers only {covered:.8f} of the prior mass; "
                "widen the grid"
            )
    return nodes, mass / total


def _logsumexp(x: np.ndarray, axis: int = -1) -> np.ndarray:
    """Plain log-sum-exp; tolerates -inf blocks without NaN."""
    m = np.max(x, axis=axis, keepdims=True)
    m_safe = np.where(np.isfinite(m), m, 0.0)
    with np.errstate(divide="ignore"):
        out = np.log(np.sum(np.exp(x - m_safe), axis=axis)) + np.squeeze(m_safe, axis=axis)
    return np.where(np.isfinite(np.squeeze(m, axis=axis)), out, -np.inf)


class LikelihoodEvaluator:
    """Caches the data-side quantities and evaluates likelihood components.

    Geometry (distances, true bearings) and the per-detection index arrays
    are computed once.  Per-(cell, node) detection quantities depend only on
    the observation parameters and are cached across evaluations until those
    parameters change (finite-difference gradients mostly perturb one block
    at a time); within one evaluation they are shared across all calls.
    """

    def __init__(self, data: Dataset, array: SensorArray, design: DesignMatrix,
                 grids: LatentGrids, t_r: float, use_bearings: bool = True):
        if data.n_sensors != array.k:
            raise DataError("dataset and sensor array disagree on K")
        detected = data.omega.astype(bool)
        if np.any(data.received[detected] < t_r):
            raise DataError("observed received levels below t_r violate the truncation")
        self.data = data
        self.array = array
        self.design = design
        self.grids = grids
        self.t_r = float(t_r)
        self.use_bearings = bool(use_bearings)

        mesh = grids.mesh
        self.log_area_km2 = np.log(mesh.areas / 1e6)
        self.log10_dist = np.log10(distances(array, mesh.centroids))   # (K, M)
        theta = true_bearings(array, mesh.centroids)                    # (K, M)

        self.omega_f = data.omega.astype(float)                         # (n, K)
        self.received0 = np.where(detected, data.received, 0.0)
        self.n_detected = data.omega.sum(axis=1).astype(float)
        self.sum_r2 = (self.received0**2).sum(axis=1)

        call_idx, sensor_idx = np.nonzero(detected)
        self.call_idx = call_idx
        y = data.bearings[call_idx, sensor_idx]
        # cos/sin of observed minus true bearing, expanded over cells later.
        self.cos_y = np.cos(y)
        self.sin_y = np.sin(y)
        self.cos_theta = np.cos(theta[sensor_idx, :])                   # (nd, M)
        self.sin_theta = np.sin(theta[sensor_idx, :])

        self._grid_cache: tuple | None = None
        self._data_cache: tuple | None = None
        self._bearing_cache: tuple | None = None

    # -- parameter-dependent pieces, each cached on its own key --------------

    def _grid_terms(self, pv: ParamVector):
        """Per-(sensor, cell, node) detection quantities; obs-parameter keyed."""
        key = (pv.g0, pv.beta_r, pv.sigma_r, pv.mu_s, pv.sigma_s)
        if self._grid_cache is not None and self._grid_cache[0] == key:
            return self._grid_cache[1]
        nodes, weights = self.grids.nodes_and_weights(pv.prior())
        expected = nodes[None, None, :] - (pv.beta_r * self.log10_dist)[:, :, None]
        z = (expected - self.t_r) / pv.sigma_r
        log_surv = log_ndtr(z)                       # truncation mass, (K, M, S)
        p = pv.g0 * ndtr(z)
        with np.errstate(divide="ignore"):
            log_p = np.maximum(np.log(pv.g0) + log_surv, _LOG_FLOOR)
            log_w = np.log(weights)
        log_1mp = np.log1p(-p)
        pmf = poisson_binomial_pmf(p)
        value = (nodes, log_w, expected, log_surv, log_p, log_1mp, pmf)
        self._grid_cache = (key, value)
        return value

    def _data_terms(self, pv: ParamVector):
        """History plus received-level log-terms per (call, cell*node)."""
        key = (pv.g0, pv.beta_r, pv.sigma_r, pv.mu_s, pv.sigma_s)
        if self._data_cache is not None and self._data_cache[0] == key:
            return self._data_cache[1]
        k = self.array.k
        _, _, expected, log_surv, log_p, log_1mp, _ = self._grid_terms(pv)
        sig2 = pv.sigma_r**2
        # One matmul covers the detection-history log-ratio and the
        # level-independent received-level pieces; a second adds r * E / s^2.
        flat = ((log_p - log_1mp) - 0.5 * expected**2 / sig2 - log_surv).reshape(k, -1)
        terms = self.omega_f @ flat
        terms += self.received0 @ (expected / sig2).reshape(k, -1)
        terms += (self.n_detected * (-0.5 * LOG_TWO_PI - np.log(pv.sigma_r))
                  - self.sum_r2 / (2.0 * sig2))[:, None]
        value = (terms, log_1mp.sum(axis=0).ravel())
        self._data_cache = (key, value)
        return value

    def _bearing_term(self, pv: ParamVector) -> np.ndarray:
        """Summed bearing log-densities per (call, cell); bearing-keyed cache."""
        b = pv.bearing()
        key = (b.kappa, b.delta_kappa, b.psi_kappa)
        if self._bearing_cache is not None and self._bearing_cache[0] == key:
            return self._bearing_cache[1]
        cos_delta = self.cos_y[:, None] * self.cos_theta + self.sin_y[:, None] * self.sin_theta
        lo = b.kappa * cos_delta - log_bessel_i0(b.kappa)
        hi = (b.kappa + b.delta_kappa) * cos_delta - log_bessel_i0(b.kappa + b.delta_kappa)
        if b.psi_kappa <= 0.0:
            mixed = hi
        elif b.psi_kappa >= 1.0:
            mixed = lo
        else:
            mixed = np.logaddexp(np.log(b.psi_kappa) + lo, np.log1p(-b.psi_kappa) + hi)
        mixed -= LOG_TWO_PI
        out = np.zeros((self.data.n_calls, cos_delta.shape[1]))
        np.add.at(out, self.call_idx, mixed)
        self._bearing_cache = (key, out)
        return out

    def _log_intensity(self, pv: ParamVector) -> np.ndarray:
        """log(area_km2 * D) per cell."""
        return self.log_area_km2 + self.design.matrix @ pv.beta

    # -- public components ---------------------------------------------------

    def components(self, pv: ParamVector) -> dict:
        """All likelihood pieces for one parameter vector."""
        n, k, m_min = self.data.n_calls, self.array.k, self.data.m_min
        if not 1 <= m_min <= k:
            raise DataError(f"m_min={m_min} out of range for K={k}")
        nodes, log_w, _, _, _, _, pmf = self._grid_terms(pv)
        log_ad = self._log_intensity(pv)            # (M,)
        n_cells, n_nodes = log_ad.shape[0], nodes.shape[0]

        p_dot = pmf[m_min:].sum(axis=0)             # (M, S)
        p_one = pmf[1]
        with np.errstate(divide="ignore"):
            grid_prior = log_ad[:, None] + log_w[None, :]
            log_z = float(_logsumexp((grid_prior + np.log(p_dot)).ravel()))
            log_singleton = float(_logsumexp((grid_prior + np.log(p_one)).ravel()))

        log_lambda = np.log(self.data.period) + log_z
        lam = float(np.exp(log_lambda))
        singletons = float(self.data.period * np.exp(log_singleton))

        if n == 0:
            call_logliks = np.zeros(0)
        else:
            data_terms, base = self._data_terms(pv)
            total = data_terms + (base + grid_prior.ravel())[None, :]
            if self.use_bearings and pv.kappa is not None:
                shaped = total.reshape(n, n_cells, n_nodes)
                shaped += self._bearing_term(pv)[:, :, None]
            call_logliks = _logsumexp(total, axis=1) - log_z

        conditional = float(call_logliks.sum())
        if lam <= 0.0 and n > 0:
            full = -np.inf
        else:
            log_fn = (n * log_lambda if n else 0.0) - lam - float(gammaln(n + 1))
            full = log_fn + conditional
        return {
            "conditional": conditional,
            "full": float(full),
            "lambda": lam,
            "expected_singletons": singletons,
            "call_logliks": call_logliks,
            "log_effective_area": log_z,
        }

    def call_cell_weights(self, pv: ParamVector) -> np.ndarray:
        """Posterior cell weights per call (n, M): softmax of the integrand.

        Used to seed density starts: soft-assigning calls to cells gives an
        expected detected count per cell.
        """
        n = self.data.n_calls
        n_cells = self.grids.mesh.n_cells
        if n == 0:
            return np.zeros((0, n_cells))
        nodes, log_w, *_ = self._grid_terms(pv)
        log_ad = self._log_intensity(pv)
        grid_prior = (log_ad[:, None] + log_w[None, :]).ravel()
        data_terms, base = self._data_terms(pv)
        total = data_terms + (base + grid_prior)[None, :]
        if self.use_bearings and pv.kappa is not None:
            shaped = total.reshape(n, n_cells, nodes.shape[0])
            shaped += self._bearing_term(pv)[:, :, None]
        total -= np.max(total, axis=1, keepdims=True)
        weights = np.exp(total).reshape(n, n_cells, nodes.shape[0]).sum(axis=2)
        return weights / weights.sum(axis=1, keepdims=True)

    def detected_exposure(self, pv: ParamVector) -> np.ndarray:
        """Per-cell expected detected calls at unit density: T a_m sum_k w_k pdot."""
        _, log_w, *_rest, pmf = self._grid_terms(pv)
        p_dot = pmf[self.data.m_min:].sum(axis=0)
        return self.data.period * (self.grids.mesh.areas / 1e6) * (p_dot @ np.exp(log_w))

    def conditional_loglik(self, pv: ParamVector) -> float:
        return self.components(pv)["conditional"]

    def full_loglik(self, pv: ParamVector) -> float:
        return self.components(pv)["full"]

    def lambda_detected(self, pv: ParamVector) -> float:
        return self.components(pv)["lambda"]

    def expected_singletons(self, pv: ParamVector) -> float:
        return self.components(pv)["expected_singletons"]

    def call_loglik(self, i: int, pv: ParamVector) -> float:
        return float(self.components(pv)["call_logliks"][i])


# -- module-level conveniences (build a throwaway evaluator) ----------------


def conditional_loglik(data: Dataset, array: SensorArray, design: DesignMatrix,
                       grids: LatentGrids, pv: ParamVector, t_r: float,
                       use_bearings: bool = True) -> float:
    ev = LikelihoodEvaluator(data, array, design, grids, t_r, use_bearings)
    return ev.conditional_loglik(pv)


def full_loglik(data: Dataset, array: SensorArray, design: DesignMatrix,
                grids: LatentGrids, pv: ParamVector, t_r: float,
                use_bearings: bool = True) -> float:
    ev = LikelihoodEvaluator(data, array, design, grids, t_r, use_bearings)
    return ev.full_loglik(pv)


def lambda_detected(array: SensorArray, design: DesignMatrix, grids: LatentGrids,
                    pv: ParamVector, t_r: float, m_min: int = 2,
                    period: float = 1.0) -> float:
    """Expected number of calls detected on at least ``m_min`` sensors."""
    ev = _empty_evaluator(array, design, grids, t_r, m_min, period)
    return ev.lambda_detected(pv)


def expected_singletons(array: SensorArray, design: DesignMatrix, grids: LatentGrids,
                        pv: ParamVector, t_r: float, period: float = 1.0) -> float:
    """Model-based expected count of calls detected on exactly one sensor."""
    ev = _empty_evaluator(array, design, grids, t_r, m_min=1, period=period)
    return ev.expected_singletons(pv)


def _empty_evaluator(array, design, grids, t_r, m_min, period) -> LikelihoodEvaluator:
    k = array.k
    empty = Dataset(np.zeros((0, k), dtype=np.int8), np.zeros((0, k)), np.zeros((0, k)),
                    m_min=m_min, period=period)
    return LikelihoodEvaluator(empty, array, design, grids, t_r)
