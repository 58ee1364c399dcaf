//! Exact random-effects meta-analysis of rare binary events.
//!
//! Each study contributes its treated-arm event count conditional on the total
//! number of events. The treated share follows a beta random effect whose mean
//! `mu` is the parameter of interest; `mu / (1 - mu)` is the relative risk on
//! balanced designs. Confidence intervals for `mu` are obtained by inverting a
//! Monte Carlo test that maximises the p-value over the nuisance variance `nu`.

pub mod comparators;
pub mod error;
pub mod estimators;
pub mod io;
pub mod mc;
pub mod model;
pub mod rng;
pub mod search;
pub mod simgen;

pub use comparators::{dersimonian_laird, mantel_haenszel, peto, Method, OrResult};
pub use error::{Error, Result};
pub use estimators::{
    enumerate_balanced_weights, mom_balanced, mom_unbalanced, wald_statistic, wald_statistic_with,
    BalancedOutcome, BalancedWeights, TestStatResult, VarianceCentre, WaldStatistic,
};
pub use io::{analyze, load_dataset, load_dataset_from, AnalysisReport, AnalyzeConfig};
pub use mc::{generate_null_dataset, mc_pvalue, McConfig, McPvalue, NullEngine};
pub use model::{nu_sup, validate_dataset, MetaDataset, ReParams, StudyRecord};
pub use search::{
    dense_grid_ci, exact_ci, profile_pvalue_boundary, profile_pvalue_grid, ExactCi, SearchConfig,
    SearchDiagnostics,
};
pub use simgen::{generate_dataset, run_experiment, Experiment, Scenario, SummaryRow};
