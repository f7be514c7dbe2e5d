"""Doubly robust DiD / synthetic control estimation of the ATT with covariates."""

__version__ = "0.1.0"

from .data import (
    PanelDataset,
    PanelSchema,
    RCSchema,
    RepeatedCrossSection,
    StaggeredDesign,
    assign_folds,
    load_panel_csv,
    load_rc_csv,
    validate,
    write_panel_csv,
    write_rc_csv,
)
from .errors import ConfigError, DataError, DrDidScError, EstimationError
from .estimator import (
    EstimatorConfig,
    estimate_att_nocov,
    estimate_att_panel,
    estimate_att_rc,
    estimate_att_staggered,
    event_study,
)
from .inference import bootstrap_att, diagnostics, influence_pt, influence_sc, pooled_variance
from .kernel_regression import KernelSpec, LocalPolyConfig, local_poly_fit, local_poly_ratio_fit
from .weights import WeightOptions, solve_weights

__all__ = [
    "PanelDataset",
    "PanelSchema",
    "RCSchema",
    "RepeatedCrossSection",
    "StaggeredDesign",
    "assign_folds",
    "load_panel_csv",
    "load_rc_csv",
    "validate",
    "write_panel_csv",
    "write_rc_csv",
    "ConfigError",
    "DataError",
    "DrDidScError",
    "EstimationError",
    "EstimatorConfig",
    "estimate_att_nocov",
    "estimate_att_panel",
    "estimate_att_rc",
    "estimate_att_staggered",
    "event_study",
    "bootstrap_att",
    "diagnostics",
    "influence_pt",
    "influence_sc",
    "pooled_variance",
    "KernelSpec",
    "LocalPolyConfig",
    "local_poly_fit",
    "local_poly_ratio_fit",
    "WeightOptions",
    "solve_weights",
]
