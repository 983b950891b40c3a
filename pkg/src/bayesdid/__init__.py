"""Semiparametric Bayesian difference-in-differences.

Gaussian-process posteriors for the control-arm trend combined with the
Bayesian bootstrap give posterior draws of the ATT; the double robust
variant adds a propensity-based prior adjustment and posterior correction.
Frequentist baselines and a Monte Carlo harness are included.
"""

from .baselines import (
    FrequentistDiD,
    FrequentistResult,
    dr_estimator,
    ipw_hajek,
    ipw_ht,
    or_estimator,
    twfe,
)
from .bayes import (
    ATTPosterior,
    BayesDiD,
    DRBayesConfig,
    DRBayesDiD,
    credible_interval,
    run_algorithm1,
    run_algorithm2,
)
from .data import (
    DiDSample,
    PanelDataset,
    StaggeredPanel,
    load_panel_csv,
    load_staggered_csv,
    staggered_transform,
    to_canonical,
    trim_by_propensity,
)
from .exceptions import (
    BayesDiDError,
    ConditioningError,
    ConvergenceError,
    DataError,
    DegenerateAdjustmentError,
    DegenerateDrawError,
    RankDeficiencyError,
    UnusableSampleError,
)
from .gp import GPHyperParams, GPMeanRegressor, gp_posterior, optimize_hyperparameters
from .propensity import LogitPropensity, RieszModel, fit_logistic
from .simulation import SimDesignConfig, generate_design, metrics_report, run_monte_carlo

__version__ = "0.1.0"

__all__ = [
    "ATTPosterior", "BayesDiD", "DRBayesConfig", "DRBayesDiD", "credible_interval",
    "run_algorithm1", "run_algorithm2",
    "FrequentistDiD", "FrequentistResult", "dr_estimator", "ipw_hajek", "ipw_ht",
    "or_estimator", "twfe",
    "DiDSample", "PanelDataset", "StaggeredPanel", "load_panel_csv", "load_staggered_csv",
    "staggered_transform", "to_canonical", "trim_by_propensity",
    "BayesDiDError", "ConditioningError", "ConvergenceError", "DataError",
    "DegenerateAdjustmentError", "DegenerateDrawError", "RankDeficiencyError",
    "UnusableSampleError",
    "GPHyperParams", "GPMeanRegressor", "gp_posterior", "optimize_hyperparameters",
    "LogitPropensity", "RieszModel", "fit_logistic",
    "SimDesignConfig", "generate_design", "metrics_report", "run_monte_carlo",
]
