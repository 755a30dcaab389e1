"""Group-based trajectory modeling: mixture likelihood, EM fitting and model search."""
from .em import InitStrategy, fit, monotone_violations
from .model import (
    BIC_CONVENTION,
    AgeTransform,
    FittedModel,
    GroupParameters,
    MixtureParams,
    ModelSpec,
    PosteriorMatrix,
    bic,
    log_joint,
    loglik,
    observed_information,
    param_vector,
    params_from_vector,
    posterior,
    predict_mean,
    raw_coefficients,
    score,
    score_and_hessian,
    trajectory_band,
    trajectory_se,
    transformed_coefficients,
)
from .search import SearchResult, SensitivityReport, match_groups, model_search, select_best, sensitivity_refit

__all__ = [
    "AgeTransform", "BIC_CONVENTION", "FittedModel", "GroupParameters", "InitStrategy",
    "MixtureParams", "ModelSpec", "PosteriorMatrix", "SearchResult", "SensitivityReport",
    "bic", "fit", "log_joint", "loglik", "match_groups", "model_search", "monotone_violations",
    "observed_information", "param_vector", "params_from_vector", "posterior", "predict_mean",
    "raw_coefficients", "score", "score_and_hessian", "select_best", "sensitivity_refit",
    "trajectory_band", "trajectory_se", "transformed_coefficients",
]
