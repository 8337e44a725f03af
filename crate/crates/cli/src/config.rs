//! Run configuration: a TOML file with one section per module, overridden
//! by command-line flags.
//!
//! ```toml
//! [data]
//! path = "study.csv"
//! treatment_map = { treated = 1, control = 0 }
//! columns = [
//!   { name = "age", kind = "continuous", role = "covariate" },
//!   { name = "arm", kind = "categorical", role = "treatment" },
//!   { name = "score", kind = "continuous", role = "outcome" },
//! ]
//!
//! [simulation]
//! scenario = "from_dgd"
//! n_reps = 500
//! estimators = ["IPTW", "CV-IPTW", "A-IPTW", "CV-A-IPTW", "TMLE", "CV-TMLE", "C-TMLE"]
//!
//! [output]
//! dir = "out"
//! ```

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use atebench::estimators::{CtmleOptions, Method};
use atebench::harness::{PositivityParams, RctParams, ScenarioKind, SimConfig};
use atebench::{ColumnSpec, HalConfig, SuperLearnerConfig};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSection {
    pub path: PathBuf,
    pub columns: Vec<ColumnSpec>,
    /// Treatment level -> 0/1.
    pub treatment_map: BTreeMap<String, u8>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimulationSection {
    pub scenario: ScenarioKind,
    pub n_reps: usize,
    pub n_per_rep: Option<usize>,
    pub estimators: Vec<Method>,
    pub master_seed: u64,
    pub workers: Option<usize>,
    pub exclude_covariates: Vec<String>,
    /// Fitted model used by the `from_dgd` scenario; defaults to
    /// `<output.dir>/dgd_model.json`.
    pub model: Option<PathBuf>,
}

impl Default for SimulationSection {
    fn default() -> Self {
        let sim = SimConfig::default();
        SimulationSection {
            scenario: sim.scenario,
            n_reps: sim.n_reps,
            n_per_rep: None,
            estimators: sim.estimators,
            master_seed: sim.master_seed,
            workers: None,
            exclude_covariates: Vec::new(),
            model: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputSection {
    pub dir: PathBuf,
}

impl Default for OutputSection {
    fn default() -> Self {
        OutputSection { dir: PathBuf::from("atebench-out") }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub data: Option<DataSection>,
    pub hal: HalConfig,
    pub super_learner: SuperLearnerConfig,
    pub ctmle: CtmleOptions,
    pub simulation: SimulationSection,
    pub rct: RctParams,
    pub positivity: PositivityParams,
    pub output: OutputSection,
}

/// Flags shared by every subcommand; each one wins over the file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub reps: Option<usize>,
    pub workers: Option<usize>,
    pub scenario: Option<ScenarioKind>,
    pub out: Option<PathBuf>,
}

pub const WORKERS_ENV: &str = "ATEBENCH_WORKERS";

impl RunConfig {
    /// Parses `path` (relative paths inside resolve against its directory).
    pub fn load(path: Option<&Path>) -> Result<Self, CliError> {
        let Some(path) = path else { return Ok(RunConfig::default()) };
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Validation(format!("cannot read config {}: {e}", path.display())))?;
        let mut config: RunConfig =
            toml::from_str(&text).map_err(|e| CliError::Validation(format!("config {}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new(""));
        let resolve = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        if let Some(data) = config.data.as_mut() {
            resolve(&mut data.path);
        }
        if let Some(model) = config.simulation.model.as_mut() {
            resolve(model);
        }
        resolve(&mut config.output.dir);
        Ok(config)
    }

    /// Applies flags, then the worker-count environment default. Returns the
    /// overrides that took effect.
    pub fn apply(&mut self, o: &Overrides) -> Result<BTreeMap<String, String>, CliError> {
        let mut applied = BTreeMap::new();
        if let Some(seed) = o.seed {
            self.simulation.master_seed = seed;
            applied.insert("seed".into(), seed.to_string());
        }
        if let Some(reps) = o.reps {
            self.simulation.n_reps = reps;
            applied.insert("reps".into(), reps.to_string());
        }
        if let Some(scenario) = o.scenario {
            self.simulation.scenario = scenario;
            applied.insert("scenario".into(), scenario.to_string());
        }
        if let Some(out) = &o.out {
            self.output.dir = out.clone();
            applied.insert("out".into(), out.display().to_string());
        }
        if let Some(workers) = o.workers {
            self.simulation.workers = Some(workers);
            applied.insert("workers".into(), workers.to_string());
        } else if self.simulation.workers.is_none() {
            if let Ok(v) = std::env::var(WORKERS_ENV) {
                let workers = v
                    .trim()
                    .parse::<usize>()
                    .map_err(|_| CliError::Validation(format!("{WORKERS_ENV}=`{v}` is not a worker count")))?;
                self.simulation.workers = Some(workers);
                applied.insert(WORKERS_ENV.into(), workers.to_string());
            }
        }
        Ok(applied)
    }

    pub fn workers(&self) -> usize {
        self.simulation.workers.unwrap_or(1)
    }

    pub fn sim_config(&self) -> SimConfig {
        let s = &self.simulation;
        SimConfig {
            n_reps: s.n_reps,
            n_per_rep: s.n_per_rep,
            estimators: s.estimators.clone(),
            master_seed: s.master_seed,
            scenario: s.scenario,
            exclude_covariates: s.exclude_covariates.clone(),
            workers: self.workers(),
            sl: self.super_learner.clone(),
            hal: self.hal.clone(),
            ctmle: self.ctmle.clone(),
        }
    }

    pub fn model_path(&self) -> PathBuf {
        self.simulation.model.clone().unwrap_or_else(|| self.output.dir.join("dgd_model.json"))
    }

    pub fn data(&self) -> Result<&DataSection, CliError> {
        let data = self.data.as_ref().ok_or_else(|| CliError::Validation("config has no [data] section".into()))?;
        if !data.path.is_file() {
            return Err(CliError::Validation(format!("data file {} does not exist", data.path.display())));
        }
        Ok(data)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        self.hal.validate().map_err(|e| CliError::Validation(e.to_string()))?;
        self.sim_config().validate().map_err(|e| CliError::Validation(e.to_string()))?;
        if let Some(data) = &self.data {
            atebench::data_model::validate_specs(&data.columns).map_err(|e| CliError::Validation(e.to_string()))?;
        }
        Ok(())
    }

    /// SHA-256 of the effective configuration, as canonical JSON.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        Sha256::digest(json.as_bytes()).iter().map(|b| format!("{b:02x}")).collect()
    }
}
