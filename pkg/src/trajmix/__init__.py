"""Group-based trajectory modeling with BIC model search, adequacy diagnostics
and multinomial-logit analysis of class membership."""
from ._version import __version__
from .data import DEFAULT_GRID, Cohort, LongitudinalSeries
from .diagnostics import AdequacyReport, Assignment, adequacy, assign, avepp, occ, prevalence_check
from .errors import (
    EmptyGroupError,
    EstimationError,
    RankDeficiencyError,
    SchemaError,
    SeparationError,
    SingularMatrixError,
    TrajmixError,
)
from .gbtm import FittedModel, InitStrategy, ModelSpec, fit, model_search, sensitivity_refit
from .mnlogit import build_design, fit_mnlogit, global_p, odds_ratios, screen_unadjusted, select_reference
from .simulate import GeneratorConfig, eden_preset, generate_cohort

__all__ = [
    "AdequacyReport", "Assignment", "Cohort", "DEFAULT_GRID", "EmptyGroupError", "EstimationError",
    "FittedModel", "GeneratorConfig", "InitStrategy", "LongitudinalSeries", "ModelSpec",
    "RankDeficiencyError", "SchemaError", "SeparationError", "SingularMatrixError", "TrajmixError",
    "__version__", "adequacy", "assign", "avepp", "build_design", "eden_preset", "fit", "fit_mnlogit",
    "generate_cohort", "global_p", "model_search", "occ", "odds_ratios", "prevalence_check",
    "screen_unadjusted", "select_reference", "sensitivity_refit",
]
