//! Design-based variance estimation for heterogeneity-robust
//! difference-in-differences estimators.
//!
//! The library computes group-time treatment effects with influence-function
//! based estimators, then attaches standard errors that respect a complex
//! survey design (strata, clustered PSUs, unequal weights, finite population
//! corrections) by Taylor linearization of the influence functions, with a
//! replicate-weight alternative. A simulation module generates stratified
//! clustered panels for calibration and Monte Carlo study.

pub mod att;
pub mod design;
pub mod error;
pub mod eventreg;
pub mod harness;
pub mod panel;
pub mod regress;
pub mod replicate;
pub mod simdgp;
pub mod tsl;

pub use att::{
    aggregate_event_study, aggregate_overall, attgt, estimate_overall, if_variance, Aggregated,
    AttCell, AttEstimate, AttGtSet, Estimator, WorkingSample,
};
pub use design::{design_df, kish_deff_w, normalize_weights, Fpc, NormalizedWeights, SurveyDesign};
pub use error::{Error, Result};
pub use eventreg::{sun_abraham, twfe, RegressionEstimate, SaCell, SaFit};
pub use harness::{
    render_report, report_from_records, run_cell, run_cell_records, run_rep, CellReport, FitRecord,
    HarnessEstimator, RepRecord,
};
pub use panel::{PanelDataset, PanelKind};
pub use replicate::{
    make_jkn_replicates, replicate_estimate, replicate_estimates_via_if, replicate_variance,
    ReplicateMethod, ReplicateWeights,
};
pub use simdgp::{generate, ScenarioConfig, ScenarioId};
pub use tsl::{
    cluster_only_variance, hc1_variance, regression_sandwich, t_interval, t_quantile,
    tsl_variance, InferenceMode, LinearizedSample, VarianceResult,
};
