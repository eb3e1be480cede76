"""Per-call observation models.

Detection probability as a function of expected received level, log-distance
transmission loss, truncated-normal received levels, a two-part von Mises
mixture for bearing error, a zero-truncated normal source-level prior, and
the Poisson-binomial machinery for the probability of detection on at least
``m`` sensors.

All log-densities are evaluated in log space; the von Mises normalizer uses
the exponentially scaled Bessel function so concentrations of several hundred
remain finite.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import ive, log_ndtr, ndtr

from . import geometry
from .validation import (
    DataError,
    check_non_negative,
    check_positive,
)

LOG_TWO_PI = float(np.log(2.0 * np.pi))


@dataclass(frozen=True)
class DetectionParams:
    """Detection ceiling ``g0`` and received-level threshold ``t_r`` (dB).

    ``g0 = 0`` is admitted so degenerate no-detection setups can be expressed
    (empty simulations, trivial buffer checks); fitting requires ``g0`` to be
    strictly inside (0, 1) via its logit link.
    """

    g0: float
    t_r: float

    def __post_init__(self):
        if not 0.0 <= self.g0 < 1.0:
            raise DataError(f"g0 must lie in [0, 1), got {self.g0}")
        if not np.isfinite(self.t_r):
            raise DataError("t_r must be finite")


@dataclass(frozen=True)
class PropagationParams:
    """Transmission loss ``beta_r`` (dB/decade) and received-level sd (dB)."""

    beta_r: float
    sigma_r: float

    def __post_init__(self):
        check_positive(self.beta_r, "beta_r")
        check_positive(self.sigma_r, "sigma_r")


@dataclass(frozen=True)
class SourceLevelPrior:
    """Normal source-level prior truncated at zero, or a fixed level.

    In fixed mode ``mu_s`` is the single source level of every call and no
    density is defined.
    """

    mu_s: float
    sigma_s: float | None = None
    fixed: bool = False

    def __post_init__(self):
        check_positive(self.mu_s, "mu_s")
        if not self.fixed:
            if self.sigma_s is None:
                raise DataError("sigma_s is required unless the source level is fixed")
            check_positive(self.sigma_s, "sigma_s")


@dataclass(frozen=True)
class BearingParams:
    """Two-part von Mises mixture for bearing error.

    A proportion ``psi_kappa`` of bearings is low precision (concentration
    ``kappa``); the rest have concentration ``kappa + delta_kappa``.  The
    increment parameterization keeps the second component at least as
    concentrated, which identifies the mixture.
    """

    kappa: float
    delta_kappa: float = 0.0
    psi_kappa: float = 0.5

    def __post_init__(self):
        check_non_negative(self.kappa, "kappa")
        check_non_negative(self.delta_kappa, "delta_kappa")
        if not 0.0 <= self.psi_kappa <= 1.0:
            raise DataError(f"psi_kappa must lie in [0, 1], got {self.psi_kappa}")


@dataclass(frozen=True)
class SourceLevelGrid:
    """Evenly spaced source-level integration nodes in dB."""

    lower: float
    upper: float
    step: float

    def __post_init__(self):
        if not self.lower < self.upper:
            raise DataError("source-level grid requires lower < upper")
        check_positive(self.step, "step")

    @property
    def nodes(self) -> np.ndarray:
        n = int(np.floor((self.upper - self.lower) / self.step + 1e-9)) + 1
        return self.lower + self.step * np.arange(n)


def log_bessel_i0(kappa) -> np.ndarray:
    """log I0(kappa), overflow-safe for large concentrations."""
    kappa = np.asarray(kappa, dtype=float)
    return np.log(ive(0, kappa)) + kappa


def expected_received_level(s, d, prop: PropagationParams):
    """Expected received level: source level minus log-distance loss."""
    d = np.asarray(d, dtype=float)
    if np.any(d < geometry.MIN_DISTANCE_M - 1e-12):
        raise DataError("distances below the one-meter clamp are invalid")
    return s - prop.beta_r * np.log10(d)


def detection_prob_from_level(expected_level, det: DetectionParams,
                              prop: PropagationParams):
    """Detection probability given the expected received level (vectorized)."""
    z = (np.asarray(expected_level, dtype=float) - det.t_r) / prop.sigma_r
    return det.g0 * ndtr(z)


def detect_prob(x, s: float, j: int, det: DetectionParams, prop: PropagationParams,
                array: geometry.SensorArray) -> float:
    """Probability that sensor ``j`` detects a call from ``x`` at level ``s``."""
    d = geometry.distance(array, j, x)
    return float(detection_prob_from_level(expected_received_level(s, d, prop), det, prop))


def poisson_binomial_pmf(p: np.ndarray) -> np.ndarray:
    """Distribution of the number of successes among independent trials.

    ``p`` has trials on the leading axis; returns shape ``(K + 1, ...)`` with
    entry ``c`` the probability of exactly ``c`` successes.  Computed by the
    dynamic-programming recursion over trials, so no 2^K enumeration.
    """
    p = np.asarray(p, dtype=float)
    k = p.shape[0]
    out = np.zeros((k + 1,) + p.shape[1:])
    out[0] = 1.0
    for j in range(k):
        pj = p[j]
        out[1:] = out[1:] * (1.0 - pj) + out[:-1] * pj
        out[0] = out[0] * (1.0 - pj)
    return out

def poisson_binomial_tail(p: np.ndarray, m: int) -> np.ndarray:
    """P(at least ``m`` successes); sums the upper pmf, avoiding cancellation."""
    k = p.shape[0]
    if m < 0 or m > k:
        raise DataError(f"minimum detection count {m} out of range for K={k}")
    if m == 0:
        return np.ones(p.shape[1:])
    return poisson_binomial_pmf(p)[m:].sum(axis=0)


def p_dot_min(x, s: float, m: int, det: DetectionParams, prop: PropagationParams,
              array: geometry.SensorArray) -> float:
    """Probability a call from ``x`` at level ``s`` is detected on >= m sensors."""
    if not 1 <= m <= array.k:
        raise DataError(f"m must lie in [1, K={array.k}], got {m}")
    x = np.atleast_2d(np.asarray(x, dtype=float))
    d = geometry.distances(array, x)[:, 0]
    p = detection_prob_from_level(expected_received_level(s, d, prop), det, prop)
    return float(poisson_binomial_tail(p, m))


def received_level_logdensity(r: float, x, s: float, j: int, det: DetectionParams,
                              prop: PropagationParams, array: geometry.SensorArray) -> float:
    """Log-density of an observed received level, truncated below at ``t_r``."""
    if r < det.t_r:
        raise DataError(
            f"received level {r} below threshold {det.t_r}: data violate truncation"
        )
    d = geometry.distance(array, j, x)
    mu = expected_received_level(s, d, prop)
    return float(truncated_normal_logpdf(r, mu, prop.sigma_r, det.t_r))


def truncated_normal_logpdf(r, mu, sigma, lower):
    """Normal log-pdf renormalized to the support ``[lower, inf)``."""
    z = (np.asarray(r, dtype=float) - mu) / sigma
    log_norm = log_ndtr((np.asarray(mu, dtype=float) - lower) / sigma)
    return -0.5 * z * z - np.log(sigma) - 0.5 * LOG_TWO_PI - log_norm


def von_mises_mixture_logpdf(y, mu, b: BearingParams):
    """Log-density of the two-part von Mises mixture centered at ``mu``."""
    c = np.cos(np.asarray(y, dtype=float) - mu)
    lo = b.kappa * c - log_bessel_i0(b.kappa)
    hi = (b.kappa + b.delta_kappa) * c - log_bessel_i0(b.kappa + b.delta_kappa)
    if b.psi_kappa <= 0.0:
        mixed = hi
    elif b.psi_kappa >= 1.0:
        mixed = lo
    else:
        mixed = np.logaddexp(np.log(b.psi_kappa) + lo, np.log1p(-b.psi_kappa) + hi)
    return mixed - LOG_TWO_PI


def bearing_logdensity(y: float, x, j: int, b: BearingParams,
                       array: geometry.SensorArray) -> float:
    """Log-density of an observed bearing (radians) from sensor ``j``."""
    mu = geometry.true_bearing(array, j, x)
    return float(von_mises_mixture_logpdf(y, mu, b))


def source_level_logdensity(s, prior: SourceLevelPrior):
    """Log-density of the zero-truncated normal source-level prior."""
    if prior.fixed:
        raise DataError("no source-level density is defined in fixed mode")
    s = np.asarray(s, dtype=float)
    z = (s - prior.mu_s) / prior.sigma_s
    log_norm = log_ndtr(prior.mu_s / prior.sigma_s)
    out = -0.5 * z * z - np.log(prior.sigma_s) - 0.5 * LOG_TWO_PI - log_norm
    return np.where(s <= 0.0, -np.inf, out) if out.ndim else (float(out) if s > 0 else -np.inf)


def detection_history_logpmf(omega, x, s: float, m: int, det: DetectionParams,
                             prop: PropagationParams, array: geometry.SensorArray) -> float:
    """Log-pmf of a detection history given at least ``m`` detections.

    Independent per-sensor Bernoulli outcomes divided by the probability of
    reaching the ``m``-detection threshold at all.
    """
    omega = np.asarray(omega)
    if omega.shape != (array.k,):
        raise DataError(f"detection history must have length K={array.k}")
    if int(omega.sum()) < m:
        raise DataError("history has fewer detections than the conditioning minimum")
    x = np.atleast_2d(np.asarray(x, dtype=float))
    d = geometry.distances(array, x)[:, 0]
    p = detection_prob_from_level(expected_received_level(s, d, prop), det, prop)
    log_terms = np.where(omega.astype(bool), np.log(p), np.log1p(-p))
    return float(log_terms.sum() - np.log(poisson_binomial_tail(p, m)))
