"""Spatial capture-recapture call density estimation for sensor arrays.

Estimates the spatial density and abundance of animal calls from
multi-sensor passive-acoustic detection data, conditioning on calls detected
by a minimum number of sensors so unreliable single-sensor detections can be
discarded.  Includes bearing and received-level observation models with a
latent source level, inhomogeneous density surfaces, simulation, a
call-resampling bootstrap, AIC model selection, and an SNR-based detection
alternative.
"""

from .buffer import BufferCheck, check_buffer
from .density import (
    DesignMatrix,
    FormulaError,
    ModelFormula,
    build_design_matrix,
    log_density,
    parse_formula,
    total_abundance,
)
from .estimation import FitConfig, FitResult, aic, aic_value, fit, model_select
from .geometry import (
    CovariateField,
    FunctionField,
    Mesh,
    MeshCell,
    SensorArray,
    build_mesh,
    distance,
    true_bearing,
)
from .likelihood import (
    Dataset,
    LatentGrids,
    LikelihoodEvaluator,
    conditional_loglik,
    expected_singletons,
    full_loglik,
    lambda_detected,
    sl_weights,
)
from .model import AcousticSCR
from .observation import (
    BearingParams,
    DetectionParams,
    PropagationParams,
    SourceLevelGrid,
    SourceLevelPrior,
    bearing_logdensity,
    detect_prob,
    detection_history_logpmf,
    expected_received_level,
    p_dot_min,
    received_level_logdensity,
    source_level_logdensity,
)
from .params import ParamSpec, ParamVector
from .simulation import SimConfig, SimMetrics, run_scenarios, simulate
from .snr import (
    JanoschekParams,
    NoiseData,
    SnrEvaluator,
    SnrFitResult,
    SnrModel,
    fit_snr,
    janoschek_p,
    snr_detection_function,
)
from .uncertainty import BootstrapReplicates, BootstrapSummary, bootstrap, summarize
from .validation import DataError

__version__ = "0.1.0"

__all__ = [
    "AcousticSCR", "BearingParams", "BootstrapReplicates", "BootstrapSummary",
    "BufferCheck", "CovariateField", "DataError", "Dataset", "DesignMatrix",
    "DetectionParams", "FitConfig", "FitResult", "FormulaError", "FunctionField",
    "JanoschekParams", "LatentGrids", "LikelihoodEvaluator", "Mesh", "MeshCell",
    "ModelFormula", "NoiseData", "ParamSpec", "ParamVector", "PropagationParams",
    "SensorArray", "SimConfig", "SimMetrics", "SnrEvaluator", "SnrModel",
    "SourceLevelGrid", "SourceLevelPrior", "aic", "aic_value", "bearing_logdensity",
    "bootstrap", "build_design_matrix", "build_mesh", "check_buffer",
    "conditional_loglik", "detect_prob", "detection_history_logpmf", "distance",
    "expected_received_level", "expected_singletons", "fit", "full_loglik",
    "SnrFitResult", "fit_snr",
    "janoschek_p", "lambda_detected", "log_density", "model_select", "p_dot_min",
    "parse_formula", "received_level_logdensity", "run_scenarios", "simulate",
    "sl_weights", "snr_detection_function", "source_level_logdensity", "summarize",
    "total_abundance", "true_bearing",
]
