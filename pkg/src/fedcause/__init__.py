"""Collaborative causal-effect estimation across heterogeneous data sites.

Sites hold covariate-shifted samples of a common target population; the
package estimates the target-population average treatment effect by weighting
each unit with site-and-arm selection scores that are identifiable only up to
one shared constant. Hajek forms make that constant irrelevant. Four
estimators are provided (per-site combination and pooled weighting, each with
a decoupled outcome-model-corrected variant), together with density-ratio
fitting, an auditable federated message protocol, and a Monte Carlo harness.
"""

from .core import (DROPPED, EstimateReport, SeedSpec, SelectionLabel,
                   SiteDataset, TargetCovariates, UnitRecord,
                   ValidationReport, read_sites_csv, read_target_csv,
                   validate_dataset, write_sites_csv, write_target_csv)
from .density_ratio import (IDENTITY, IDENTITY_PLUS_INTERCEPT, MISSPECIFIED,
                            FeatureMap, RatioModel, TiltingError, fit_knn,
                            fit_tilting, oracle_gaussian_ratio)
from .estimators import (AipwInputs, AllSitesExcludedError, Excluded,
                         MetaDeltas, OverlapError, SiteAggregates,
                         aipw_combine, aipw_corrections, clb_combine, clb_ipw,
                         clb_site_aggregates, confidence_interval,
                         decoupled_aipw, meta_combine, meta_ipw, meta_ipw_site)
from .fedsim import (FedAvgDivergence, FedConfig, MessageLog, PrivacyError,
                     SiteMessage, audit_messages, centralized_algorithm2,
                     expected_message_count, replay, run_algorithm1,
                     run_algorithm2)
from .harness import (CellStats, SweepResult, SweepSpec, ci_grid,
                      oracle_meta_site_variances, oracle_shift_propensity,
                      run_monte_carlo, sweep_kl)
from .nuisance import (FoldPlan, OutcomeModel, PropensitySet,
                       assemble_propensity, crossfit_split,
                       fit_outcome_direct, invert_balancing_model,
                       pooled_score, weighted_loss_and_grad,
                       zero_outcome_model)
from .synthgen import (OverlapReport, SelectConfig, ShiftConfig, check_overlap,
                       gen_covariate_shift, gen_sampling_selecting,
                       misspecify_features, place_site_means)

__version__ = "0.1.0"

__all__ = [
    "AipwInputs", "AllSitesExcludedError", "CellStats", "DROPPED",
    "EstimateReport", "Excluded", "FeatureMap", "FedAvgDivergence",
    "FedConfig", "FoldPlan", "IDENTITY", "IDENTITY_PLUS_INTERCEPT",
    "MISSPECIFIED", "MessageLog", "MetaDeltas", "OutcomeModel",
    "OverlapError", "OverlapReport", "PrivacyError", "PropensitySet",
    "RatioModel", "SeedSpec", "SelectConfig", "SelectionLabel",
    "ShiftConfig", "SiteAggregates", "SiteDataset", "SiteMessage",
    "SweepResult", "SweepSpec", "TargetCovariates", "TiltingError",
    "UnitRecord", "ValidationReport", "aipw_combine", "aipw_corrections",
    "assemble_propensity", "audit_messages", "centralized_algorithm2",
    "check_overlap", "ci_grid", "clb_combine", "clb_ipw",
    "clb_site_aggregates", "confidence_interval", "crossfit_split",
    "decoupled_aipw", "expected_message_count", "fit_knn",
    "fit_outcome_direct", "fit_tilting", "gen_covariate_shift",
    "gen_sampling_selecting", "invert_balancing_model", "meta_combine",
    "meta_ipw", "meta_ipw_site", "misspecify_features",
    "oracle_gaussian_ratio", "oracle_meta_site_variances",
    "oracle_shift_propensity", "place_site_means", "pooled_score",
    "read_sites_csv", "read_target_csv", "replay", "run_algorithm1",
    "run_algorithm2", "run_monte_carlo", "sweep_kl", "validate_dataset",
    "weighted_loss_and_grad", "write_sites_csv", "write_target_csv",
    "zero_outcome_model",
]
