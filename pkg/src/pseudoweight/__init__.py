"""Propensity-score pseudo-weighting of nonprobability cohorts.

Reweights a volunteer cohort toward a target population using a reference
probability survey, via inverse-propensity weights (IPSW, IPSW.S) or
kernel-matching weights (KW, KW.W, KW.S), with linearized and jackknife
variance estimation and a Monte Carlo simulation harness.
"""

__version__ = "0.1.0"

from .data_model import (CohortSample, CovariateMatrix, DesignInfo, EstimateReport,
                         METHODS, PropensityFit, PseudoWeightSet, SurveySample,
                         load_cohort_csv, load_survey_csv, validate_inputs)
from .estimation import (assign_jackknife_groups, confidence_interval, design_variance,
                         estimate_mean, hajek_mean, jackknife_variance, kish_effective_n,
                         sea_diagnostic, tl_variance)
from .propensity import (FitConfig, fit_pseudo_mle, matching_scores,
                         participation_rates, scale_weights)
from .pseudo_weights import (KernelSpec, compute_pseudoweights, ipsw_weights,
                             kernel_eval, kw_jacobian, kw_weights, silverman_bandwidth)
from .simulation import (FinitePopulation, ScenarioConfig, compute_metrics,
                         generate_population, pps_poisson_sample, run_replications,
                         scenario_preset)

__all__ = [
    "CohortSample", "CovariateMatrix", "DesignInfo", "EstimateReport", "METHODS",
    "PropensityFit", "PseudoWeightSet", "SurveySample", "load_cohort_csv",
    "load_survey_csv", "validate_inputs", "confidence_interval", "design_variance",
    "estimate_mean", "hajek_mean", "jackknife_variance", "sea_diagnostic", "tl_variance",
    "assign_jackknife_groups", "kish_effective_n",
    "FitConfig", "fit_pseudo_mle", "matching_scores", "participation_rates",
    "scale_weights", "KernelSpec", "compute_pseudoweights", "ipsw_weights",
    "kernel_eval", "kw_jacobian", "kw_weights", "silverman_bandwidth",
    "FinitePopulation", "ScenarioConfig", "compute_metrics", "generate_population",
    "pps_poisson_sample", "run_replications", "scenario_preset",
]
