"""Counterfactual region contrasts for small strata via transfer-learned
outcome models, with a replicated synthetic-data evaluation harness."""

__version__ = "0.1.0"

from .causal import (
    PropensityModel,
    SensitivityResult,
    TattEstimate,
    dr_components,
    estimate_mpo,
    estimate_propensity,
    estimate_tatt,
    leave_one_out_sensitivity,
)
from .data import ObservationTable
from .glm import (
    CvConfig,
    ModelFit,
    PenaltySpec,
    cross_validate_lambda,
    fit_penalized_logistic,
    fit_penalized_multinomial,
    negative_log_likelihood,
    predict_proba,
)
from .simulation import (
    AnalysisConfig,
    DgpConfig,
    MetricsTable,
    TrueEffects,
    compute_metrics,
    compute_true_effects,
    draw_coefficients,
    generate_dataset,
    run_replicates,
)
from .transfer import StratumKey, TransferConfig, TransferResult, transfer_fit

__all__ = [
    "__version__",
    "AnalysisConfig", "CvConfig", "DgpConfig", "MetricsTable", "ModelFit",
    "ObservationTable", "PenaltySpec", "PropensityModel", "SensitivityResult",
    "StratumKey", "TattEstimate", "TransferConfig", "TransferResult",
    "TrueEffects", "compute_metrics", "compute_true_effects", "dr_components",
    "draw_coefficients", "cross_validate_lambda", "estimate_mpo",
    "estimate_propensity", "estimate_tatt", "fit_penalized_logistic",
    "fit_penalized_multinomial", "generate_dataset", "leave_one_out_sensitivity",
    "negative_log_likelihood", "predict_proba", "run_replicates", "transfer_fit",
]
