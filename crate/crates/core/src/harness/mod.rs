//! Monte-Carlo driver.
//!
//! Replicate `r` draws its dataset, its nuisance folds and any C-TMLE folds
//! from `stream(master_seed, r)`, so results do not depend on how
//! replicates are scheduled across workers. Estimator failures are recorded
//! per replicate and counted in the metrics instead of aborting the run.

mod report;
mod scenario;

use std::collections::BTreeMap;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dgd_sim::{DgdError, DgdModel};
use crate::estimators::{build_nuisances, evaluate, AteEstimate, BundleMode, CtmleOptions, Method};
use crate::hal::HalConfig;
use crate::rng;
use crate::stats::{mean, sample_sd, sample_variance};
use crate::super_learner::SuperLearnerConfig;
use crate::Z_975;

pub use report::{format_significant, read_metrics_json, write_metrics_csv, write_metrics_json, RunManifest};
pub use scenario::{
    make_scenario, PositivityParams, RctParams, Scenario, ScenarioKind, UnknownScenario, POSITIVITY_COVARIATE,
};

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("invalid simulation config: {0}")]
    Config(String),
    #[error("all {0} replicates failed; first error: {1}")]
    AllReplicatesFailed(usize, String),
    #[error(transparent)]
    Dgd(#[from] DgdError),
    #[error("worker pool: {0}")]
    Pool(String),
    #[error("I/O error on {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("report format: {0}")]
    Format(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimConfig {
    pub n_reps: usize,
    /// Rows per replicate; `None` uses the size of the model's covariate pool.
    pub n_per_rep: Option<usize>,
    pub estimators: Vec<Method>,
    pub master_seed: u64,
    pub scenario: ScenarioKind,
    /// Covariates hidden from every estimator (the generating model still
    /// uses them).
    pub exclude_covariates: Vec<String>,
    pub workers: usize,
    pub sl: SuperLearnerConfig,
    pub hal: HalConfig,
    pub ctmle: CtmleOptions,
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig {
            n_reps: 500,
            n_per_rep: None,
            estimators: Method::STANDARD.to_vec(),
            master_seed: 20_210_101,
            scenario: ScenarioKind::FromDgd,
            exclude_covariates: Vec::new(),
            workers: 1,
            sl: SuperLearnerConfig::default(),
            hal: HalConfig::default(),
            ctmle: CtmleOptions::default(),
        }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<(), HarnessError> {
        if self.n_reps == 0 {
            return Err(HarnessError::Config("n_reps must be at least 1".into()));
        }
        if self.estimators.is_empty() {
            return Err(HarnessError::Config("no estimators configured".into()));
        }
        if self.n_per_rep == Some(0) {
            return Err(HarnessError::Config("n_per_rep must be positive".into()));
        }
        if self.workers == 0 {
            return Err(HarnessError::Config("workers must be at least 1".into()));
        }
        if self.ctmle.folds < 2 {
            return Err(HarnessError::Config("C-TMLE needs at least 2 folds".into()));
        }
        self.sl.validate().map_err(|e| HarnessError::Config(e.to_string()))?;
        Ok(())
    }

    /// Covariate indices the estimators may use.
    pub fn visible_covariates(&self, column_names: &[String]) -> Result<Vec<usize>, HarnessError> {
        for name in &self.exclude_covariates {
            if !column_names.contains(name) {
                return Err(HarnessError::Config(format!("excluded covariate `{name}` is not in the model")));
            }
        }
        Ok((0..column_names.len()).filter(|&j| !self.exclude_covariates.contains(&column_names[j])).collect())
    }
}

/// One method's outcome in one replicate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodOutcome {
    pub method: Method,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub estimate: Option<AteEstimate>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RepResult {
    pub replicate_index: usize,
    pub outcomes: Vec<MethodOutcome>,
    /// Ensemble fits performed for this replicate.
    pub sl_fits: usize,
    pub elapsed_ms: f64,
}

impl RepResult {
    pub fn estimate(&self, method: Method) -> Option<&AteEstimate> {
        self.outcomes.iter().find(|o| o.method == method).and_then(|o| o.estimate.as_ref())
    }

    fn failed(&self) -> bool {
        self.outcomes.iter().all(|o| o.estimate.is_none())
    }

    fn first_error(&self) -> Option<&str> {
        self.outcomes.iter().find_map(|o| o.error.as_deref())
    }
}

/// Replicate results plus the context needed to aggregate them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimulationOutput {
    pub scenario: String,
    pub true_ate: f64,
    pub methods: Vec<Method>,
    pub results: Vec<RepResult>,
}

impl SimulationOutput {
    /// Failed replicates per method.
    pub fn failure_counts(&self) -> BTreeMap<String, usize> {
        self.methods
            .iter()
            .map(|&m| {
                let failed = self.results.iter().filter(|r| r.estimate(m).is_none()).count();
                (m.name().to_string(), failed)
            })
            .collect()
    }

    pub fn sl_fits(&self) -> usize {
        self.results.iter().map(|r| r.sl_fits).sum()
    }

    /// Replicates that built a nuisance set.
    pub fn nuisance_builds(&self) -> usize {
        self.results.iter().filter(|r| r.sl_fits > 0).count()
    }

    pub fn metrics(&self) -> Vec<MetricsRow> {
        compute_metrics(&self.scenario, &self.results, &self.methods, self.true_ate)
    }
}

fn run_replicate(
    model: &DgdModel,
    config: &SimConfig,
    n: usize,
    visible: &[usize],
    mode: Option<BundleMode>,
    r: usize,
) -> RepResult {
    let start = Instant::now();
    let mut stream = rng::stream(config.master_seed, r as u64);
    let fail_all = |msg: String| {
        config
            .estimators
            .iter()
            .map(|&method| MethodOutcome { method, estimate: None, error: Some(msg.clone()) })
            .collect::<Vec<_>>()
    };
    let (outcomes, sl_fits) = match model.sample(n, &mut stream) {
        Err(e) => (fail_all(e.to_string()), 0),
        Ok(full) => {
            let data = full.select_covariates(visible);
            let nuisances = match mode {
                Some(mode) => build_nuisances(&data, &config.sl, mode, &mut stream),
                None => Ok(Default::default()),
            };
            match nuisances {
                Err(e) => (fail_all(format!("nuisance fit: {e}")), 0),
                Ok(set) => {
                    let outcomes = config
                        .estimators
                        .iter()
                        .map(|&method| match evaluate(method, &data, &set, &config.ctmle, &mut stream) {
                            Ok(e) => MethodOutcome { method, estimate: Some(e), error: None },
                            Err(e) => {
                                log::debug!("replicate {r}: {method} failed: {e}");
                                MethodOutcome { method, estimate: None, error: Some(e.to_string()) }
                            }
                        })
                        .collect();
                    (outcomes, set.sl_fits)
                }
            }
        }
    };
    RepResult { replicate_index: r, outcomes, sl_fits, elapsed_ms: start.elapsed().as_secs_f64() * 1e3 }
}

/// Runs `config.n_reps` replicates on up to `config.workers` threads.
pub fn run_simulation(model: &DgdModel, config: &SimConfig) -> Result<SimulationOutput, HarnessError> {
    config.validate()?;
    let n = config.n_per_rep.unwrap_or(model.w_pool.nrows());
    let visible = config.visible_covariates(&model.column_names)?;
    let mode = BundleMode::for_methods(&config.estimators);
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(config.workers)
        .build()
        .map_err(|e| HarnessError::Pool(e.to_string()))?;
    let results: Vec<RepResult> = pool.install(|| {
        (0..config.n_reps).into_par_iter().map(|r| run_replicate(model, config, n, &visible, mode, r)).collect()
    });
    if results.iter().all(RepResult::failed) {
        let first = results.iter().find_map(RepResult::first_error).unwrap_or("no estimate produced").to_string();
        return Err(HarnessError::AllReplicatesFailed(results.len(), first));
    }
    Ok(SimulationOutput {
        scenario: config.scenario.name().to_string(),
        true_ate: model.true_ate,
        methods: config.estimators.clone(),
        results,
    })
}

/// Performance of one estimator across replicates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub scenario: String,
    pub method: String,
    pub true_ate: f64,
    /// Sample variance of the estimates, `1/(R-1)`.
    pub variance: f64,
    pub bias: f64,
    pub mse: f64,
    /// `mse / mse(IPTW)`; absent when IPTW was not run.
    pub rmse: Option<f64>,
    /// Share of influence-curve intervals containing the truth.
    pub coverage: f64,
    /// Share of `psi +- 1.959964 SD(psi across replicates)` intervals
    /// containing the truth.
    pub coverage2: f64,
    pub ci_width: f64,
    pub replicates: usize,
    pub failures: usize,
}

/// Aggregates in replicate order. Methods with fewer than two successful
/// replicates get no row.
pub fn compute_metrics(scenario: &str, results: &[RepResult], methods: &[Method], true_ate: f64) -> Vec<MetricsRow> {
    let mut rows: Vec<(Method, MetricsRow)> = Vec::new();
    for &method in methods {
        let estimates: Vec<&AteEstimate> = results.iter().filter_map(|r| r.estimate(method)).collect();
        let failures = results.len() - estimates.len();
        if estimates.len() < 2 {
            log::warn!("{method}: {} successful replicate(s); no metrics row", estimates.len());
            continue;
        }
        let r = estimates.len() as f64;
        let psi: Vec<f64> = estimates.iter().map(|e| e.psi).collect();
        let sd = sample_sd(&psi);
        let rate = |hit: &dyn Fn(&AteEstimate) -> bool| estimates.iter().filter(|e| hit(e)).count() as f64 / r;
        rows.push((
            method,
            MetricsRow {
                scenario: scenario.to_string(),
                method: method.name().to_string(),
                true_ate,
                variance: sample_variance(&psi),
                bias: mean(&psi) - true_ate,
                mse: psi.iter().map(|p| (p - true_ate).powi(2)).sum::<f64>() / r,
                rmse: None,
                coverage: rate(&|e| e.covers(true_ate)),
                coverage2: rate(&|e| (e.psi - true_ate).abs() <= Z_975 * sd),
                ci_width: mean(&estimates.iter().map(|e| e.ci_width()).collect::<Vec<_>>()),
                replicates: estimates.len(),
                failures,
            },
        ));
    }
    match rows.iter().find(|(m, _)| *m == Method::Iptw).map(|(_, row)| row.mse) {
        Some(reference) => {
            for (_, row) in rows.iter_mut() {
                row.rmse = Some(row.mse / reference);
            }
        }
        None => log::info!("IPTW not run; rMSE omitted"),
    }
    rows.into_iter().map(|(_, row)| row).collect()
}
