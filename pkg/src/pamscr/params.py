"""Model parameters and their link-scale transforms.

The optimizer works on an unconstrained scale: logit for probabilities
(``g0``, ``psi_kappa``), log for positive scale parameters (``beta_r``,
``sigma_r``, ``mu_s``, ``sigma_s``, ``kappa``, ``delta_kappa``), identity for
the density coefficients (their effect is already log-linear through the
density surface).
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .observation import BearingParams, DetectionParams, PropagationParams, SourceLevelPrior
from .validation import DataError

SOURCE_LEVEL_MODES = ("variable", "fixed")
BEARING_MODES = ("mixture", "single", "none")


@dataclass(frozen=True)
class ParamVector:
    """All free model parameters on the natural (real) scale.

    ``sigma_s`` is ``None`` in fixed source-level mode; ``delta_kappa`` and
    ``psi_kappa`` are ``None`` under the single-component bearing model, and
    ``kappa`` is also ``None`` when bearings are excluded entirely.
    """

    g0: float
    beta_r: float
    sigma_r: float
    mu_s: float
    sigma_s: float | None
    kappa: float | None
    delta_kappa: float | None
    psi_kappa: float | None
    beta: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "beta", np.asarray(self.beta, dtype=float))
        if (self.delta_kappa is None) != (self.psi_kappa is None):
            raise DataError("delta_kappa and psi_kappa must be set together")
        if self.kappa is None and self.delta_kappa is not None:
            raise DataError("mixture parameters require kappa")

    @property
    def source_level_mode(self) -> str:
        return "fixed" if self.sigma_s is None else "variable"

    @property
    def bearing_mode(self) -> str:
        if self.kappa is None:
            return "none"
        return "single" if self.delta_kappa is None else "mixture"

    def detection(self, t_r: float) -> DetectionParams:
        return DetectionParams(self.g0, t_r)

    def propagation(self) -> PropagationParams:
        return PropagationParams(self.beta_r, self.sigma_r)

    def prior(self) -> SourceLevelPrior:
        if self.sigma_s is None:
            return SourceLevelPrior(self.mu_s, fixed=True)
        return SourceLevelPrior(self.mu_s, self.sigma_s)

    def bearing(self) -> BearingParams | None:
        if self.kappa is None:
            return None
        if self.delta_kappa is None:
            return BearingParams(self.kappa, 0.0, 0.5)
        return BearingParams(self.kappa, self.delta_kappa, self.psi_kappa)

    def with_beta(self, beta) -> "ParamVector":
        return replace(self, beta=np.asarray(beta, dtype=float))

    def as_dict(self) -> dict:
        out = {"g0": self.g0, "beta_r": self.beta_r, "sigma_r": self.sigma_r,
               "mu_s": self.mu_s}
        if self.sigma_s is not None:
            out["sigma_s"] = self.sigma_s
        if self.kappa is not None:
            out["kappa"] = self.kappa
        if self.delta_kappa is not None:
            out["delta_kappa"] = self.delta_kappa
            out["psi_kappa"] = self.psi_kappa
        out["beta"] = self.beta.tolist()
        return out


def _logit(p: float) -> float:
    if not 0.0 < p < 1.0:
        raise DataError(f"logit-linked value must lie strictly in (0, 1), got {p}")
    return float(np.log(p) - np.log1p(-p))


def _inv_logit(x: float) -> float:
    # Symmetric form avoids overflow for large |x|.
    if x >= 0:
        return float(1.0 / (1.0 + np.exp(-x)))
    e = np.exp(x)
    return float(e / (1.0 + e))


def _log(v: float, name: str) -> float:
    if not v > 0.0:
        raise DataError(f"log-linked parameter {name} must be positive, got {v}")
    return float(np.log(v))


_SCALAR_LINKS = {
    "g0": "logit",
    "beta_r": "log",
    "sigma_r": "log",
    "mu_s": "log",
    "sigma_s": "log",
    "kappa": "log",
    "delta_kappa": "log",
    "psi_kappa": "logit",
}


class ParamSpec:
    """Layout of the free-parameter vector for one model structure."""

    def __init__(self, source_level_mode: str, bearing_mode: str, n_beta: int):
        if source_level_mode not in SOURCE_LEVEL_MODES:
            raise DataError(f"unknown source-level mode {source_level_mode!r}")
        if bearing_mode not in BEARING_MODES:
            raise DataError(f"unknown bearing mode {bearing_mode!r}")
        if n_beta < 1:
            raise DataError("the density model must have at least an intercept")
        self.source_level_mode = source_level_mode
        self.bearing_mode = bearing_mode
        self.n_beta = int(n_beta)
        names = ["g0", "beta_r", "sigma_r", "mu_s"]
        if source_level_mode == "variable":
            names.append("sigma_s")
        if bearing_mode != "none":
            names.append("kappa")
        if bearing_mode == "mixture":
            names += ["delta_kappa", "psi_kappa"]
        self.scalar_names = names
        self.names = names + [f"beta[{i}]" for i in range(self.n_beta)]
        self.links = [_SCALAR_LINKS[n] for n in names] + ["identity"] * self.n_beta

    @property
    def n_free(self) -> int:
        return len(self.names)

    def transform(self, pv: ParamVector) -> np.ndarray:
        """Natural-scale parameters to the unconstrained optimizer scale."""
        if pv.source_level_mode != self.source_level_mode:
            raise DataError("parameter vector does not match the source-level mode")
        if pv.bearing_mode != self.bearing_mode:
            raise DataError("parameter vector does not match the bearing mode")
        if pv.beta.shape != (self.n_beta,):
            raise DataError(
                f"beta has length {pv.beta.shape[0]}, spec expects {self.n_beta}"
            )
        out = []
        for name in self.scalar_names:
            value = getattr(pv, name)
            link = _SCALAR_LINKS[name]
            out.append(_logit(value) if link == "logit" else _log(value, name))
        return np.concatenate([out, pv.beta])

    def untransform(self, vector: np.ndarray) -> ParamVector:
        vector = np.asarray(vector, dtype=float)
        if vector.shape != (self.n_free,):
            raise DataError(f"expected {self.n_free} free parameters, got {vector.shape}")
        values: dict = {n: None for n in _SCALAR_LINKS}
        for name, x in zip(self.scalar_names, vector):
            link = _SCALAR_LINKS[name]
            values[name] = _inv_logit(x) if link == "logit" else float(np.exp(x))
        return ParamVector(beta=vector[len(self.scalar_names):].copy(), **values)
