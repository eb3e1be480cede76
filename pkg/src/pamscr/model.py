"""Estimator front end.

:class:`AcousticSCR` wraps the likelihood machinery in the familiar
constructor-parameters / ``fit`` / fitted-attributes shape, so call-density
models compose with the usual tooling (``get_params``/``set_params``,
``sklearn.base.clone``).
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator

from . import estimation
from .density import log_density
from .estimation import FitConfig, FitResult
from .geometry import Mesh, SensorArray
from .likelihood import Dataset, LatentGrids, LikelihoodEvaluator
from .observation import SourceLevelGrid
from .params import ParamVector
from .validation import DataError


class NotFittedError(DataError):
    pass


class AcousticSCR(BaseEstimator):
    """Call-density estimator for multi-sensor acoustic detection data.

    Parameters mirror the analysis choices: the density formula, the
    received-level threshold ``t_r``, the minimum number of detecting
    sensors ``m_min``, the source-level mode and integration grid, the
    bearing-error model, and optimizer settings.

    After ``fit`` the instance exposes ``result_`` (the full
    :class:`FitResult`) plus the usual shortcuts ``params_``, ``loglik_``,
    ``aic_``, ``abundance_``, and ``converged_``.
    """

    def __init__(self, formula: str = "D ~ 1", t_r: float = 96.0, m_min: int = 2,
                 source_level_mode: str = "variable", bearing_mode: str = "mixture",
                 sl_lower: float = 100.0, sl_upper: float = 220.0, sl_step: float = 3.0,
                 standardize: bool = True, max_iterations: int = 500,
                 loglik_tol: float = 1e-8, gradient_tol: float = 1e-4,
                 n_starts: int = 1, jitter_sd: float = 0.5, start_seed: int = 0):
        self.formula = formula
        self.t_r = t_r
        self.m_min = m_min
        self.source_level_mode = source_level_mode
        self.bearing_mode = bearing_mode
        self.sl_lower = sl_lower
        self.sl_upper = sl_upper
        self.sl_step = sl_step
        self.standardize = standardize
        self.max_iterations = max_iterations
        self.loglik_tol = loglik_tol
        self.gradient_tol = gradient_tol
        self.n_starts = n_starts
        self.jitter_sd = jitter_sd
        self.start_seed = start_seed

    def _grids(self, mesh: Mesh) -> LatentGrids:
        sl_grid = None
        if self.source_level_mode == "variable":
            sl_grid = SourceLevelGrid(self.sl_lower, self.sl_upper, self.sl_step)
        return LatentGrids(mesh, sl_grid)

    def _fit_config(self, start: ParamVector | None) -> FitConfig:
        return FitConfig(max_iterations=self.max_iterations,
                         loglik_tol=self.loglik_tol, gradient_tol=self.gradient_tol,
                         n_starts=self.n_starts, jitter_sd=self.jitter_sd,
                         start_seed=self.start_seed, start=start)

    def fit(self, data: Dataset, array: SensorArray, mesh: Mesh,
            start: ParamVector | None = None) -> "AcousticSCR":
        """Maximize the full likelihood for ``data`` observed by ``array``."""
        if data.m_min != self.m_min:
            raise DataError(
                f"dataset was truncated at m_min={data.m_min}, model expects {self.m_min}"
            )
        result = estimation.fit(
            data, array, self.formula, self._grids(mesh), self.t_r,
            source_level_mode=self.source_level_mode, bearing_mode=self.bearing_mode,
            standardize=self.standardize, config=self._fit_config(start))
        self.result_: FitResult = result
        self.params_: ParamVector = result.params
        self.loglik_: float = result.loglik
        self.aic_: float = result.aic
        self.abundance_: float = result.abundance
        self.lambda_: float = result.lambda_detected
        self.expected_singletons_: float = result.expected_singletons
        self.converged_: bool = result.converged
        self.design_ = result.design
        self.array_ = array
        self.mesh_ = mesh
        self.data_ = data
        return self

    def _check_fitted(self):
        if not hasattr(self, "result_"):
            raise NotFittedError("call fit() before using the fitted model")

    def predict_density(self) -> np.ndarray:
        """Fitted per-cell density (calls per km^2 per period unit)."""
        self._check_fitted()
        return np.exp(log_density(self.params_.beta, self.design_))

    def predict_log_density(self) -> np.ndarray:
        self._check_fitted()
        return log_density(self.params_.beta, self.design_)

    def score(self, data: Dataset | None = None) -> float:
        """Full log-likelihood of ``data`` (default: the training data)."""
        self._check_fitted()
        if data is None:
            return self.loglik_
        evaluator = LikelihoodEvaluator(data, self.array_, self.design_,
                                        self._grids(self.mesh_), self.t_r,
                                        use_bearings=self.bearing_mode != "none")
        return evaluator.full_loglik(self.params_)
