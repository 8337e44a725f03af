//! Realistic-simulation benchmarking of average treatment effect estimators.
//!
//! A study dataset is turned into a known data-generating distribution by
//! fitting an undersmoothed highly adaptive lasso (HAL) to the outcome
//! regression and the propensity score. Synthetic replicates drawn from that
//! distribution are then fed to a suite of IPTW, A-IPTW, TMLE and
//! collaborative-TMLE estimators, and their Monte-Carlo performance (bias,
//! variance, MSE, CI coverage) is aggregated into report tables.
//!
//! Module map:
//!
//! - [`data_model`]: CSV ingestion, imputation and encoding.
//! - [`hal`]: indicator basis, coordinate-descent lasso, undersmoothing.
//! - [`dgd_sim`]: the fitted data-generating distribution and its sampler.
//! - [`super_learner`]: stacked ensemble for nuisance estimation.
//! - [`estimators`]: the ATE estimators and their influence curves.
//! - [`harness`]: the Monte-Carlo driver, metrics and reports.

pub mod data_model;
pub mod dgd_sim;
pub mod estimators;
pub mod folds;
pub mod hal;
pub mod harness;
pub mod link;
pub mod rng;
pub mod stats;
pub mod super_learner;

pub use data_model::{AnalysisDataset, ColumnKind, ColumnRole, ColumnSpec, RawTable};
pub use dgd_sim::{DgdModel, PropensityModel, SimulatedDataset};
pub use estimators::{AteEstimate, Method, NuisanceBundle};
pub use hal::{HalConfig, HalFit};
pub use harness::{MetricsRow, Scenario, ScenarioKind, SimConfig};
pub use link::Family;
pub use super_learner::{LearnerSpec, SuperLearnerConfig};

/// Two-sided 95% normal critical value used for every Wald interval.
pub const Z_975: f64 = 1.959964;
