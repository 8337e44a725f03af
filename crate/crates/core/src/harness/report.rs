//! Metric tables and run manifests.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{HarnessError, MetricsRow};

const HEADER: [&str; 10] =
    ["Scenario", "Method", "TrueATE", "Variance", "Bias", "MSE", "rMSE", "Coverage", "Coverage2", "CIwidth"];

/// `%g`-style rendering with `digits` significant digits.
pub fn format_significant(x: f64, digits: usize) -> String {
    if x == 0.0 {
        return "0".into();
    }
    if !x.is_finite() {
        return x.to_string();
    }
    let exp = x.abs().log10().floor() as i32;
    let prec = digits.saturating_sub(1);
    // Rounding can carry into the next decade, so reformat through the
    // exponent that the rounded value actually has.
    let sci = format!("{:.*e}", prec, x);
    let exp = sci.split('e').nth(1).and_then(|e| e.parse::<i32>().ok()).unwrap_or(exp);
    if exp < -5 || exp >= digits as i32 {
        let (mantissa, e) = sci.split_once('e').expect("scientific format");
        return format!("{}e{}", trim_zeros(mantissa), e);
    }
    let decimals = (prec as i32 - exp).max(0) as usize;
    trim_zeros(&format!("{:.*}", decimals, x)).to_string()
}

fn trim_zeros(s: &str) -> &str {
    if s.contains('.') {
        s.trim_end_matches('0').trim_end_matches('.')
    } else {
        s
    }
}

fn io_err(path: &Path, source: std::io::Error) -> HarnessError {
    HarnessError::Io { path: path.display().to_string(), source }
}

fn ensure_parent(path: &Path) -> Result<(), HarnessError> {
    match path.parent() {
        Some(dir) if !dir.as_os_str().is_empty() => fs::create_dir_all(dir).map_err(|e| io_err(dir, e)),
        _ => Ok(()),
    }
}

/// One row per metrics entry, reals at 6 significant digits; an absent
/// rMSE is an empty field.
pub fn write_metrics_csv(rows: &[MetricsRow], path: &Path) -> Result<(), HarnessError> {
    if rows.is_empty() {
        return Err(HarnessError::Format("no metrics rows to write".into()));
    }
    ensure_parent(path)?;
    let mut w = csv::Writer::from_path(path).map_err(|e| HarnessError::Format(e.to_string()))?;
    let f = |x: f64| format_significant(x, 6);
    let write = |w: &mut csv::Writer<fs::File>, rec: Vec<String>| {
        w.write_record(rec).map_err(|e| HarnessError::Format(e.to_string()))
    };
    write(&mut w, HEADER.iter().map(|s| s.to_string()).collect())?;
    for r in rows {
        write(
            &mut w,
            vec![
                r.scenario.clone(),
                r.method.clone(),
                f(r.true_ate),
                f(r.variance),
                f(r.bias),
                f(r.mse),
                r.rmse.map(f).unwrap_or_default(),
                f(r.coverage),
                f(r.coverage2),
                f(r.ci_width),
            ],
        )?;
    }
    w.flush().map_err(|e| io_err(path, e))
}

/// Full-precision JSON array of rows.
pub fn write_metrics_json(rows: &[MetricsRow], path: &Path) -> Result<(), HarnessError> {
    if rows.is_empty() {
        return Err(HarnessError::Format("no metrics rows to write".into()));
    }
    ensure_parent(path)?;
    let text = serde_json::to_string_pretty(rows).map_err(|e| HarnessError::Format(e.to_string()))?;
    fs::write(path, text).map_err(|e| io_err(path, e))
}

pub fn read_metrics_json(path: &Path) -> Result<Vec<MetricsRow>, HarnessError> {
    let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    serde_json::from_str(&text).map_err(|e| HarnessError::Format(e.to_string()))
}

/// Everything needed to reproduce a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub version: String,
    pub config_hash: String,
    pub master_seed: u64,
    /// Flags that overrode the config file.
    pub overrides: BTreeMap<String, String>,
    #[serde(default)]
    pub scenario: Option<String>,
    #[serde(default)]
    pub n_reps: Option<usize>,
    #[serde(default)]
    pub workers: Option<usize>,
    #[serde(default)]
    pub true_ate: Option<f64>,
    pub failures: BTreeMap<String, usize>,
    /// Nuisance bundle constructions (each is one `g` and one `Q` ensemble).
    pub nuisance_builds: usize,
    /// Super-learner fits performed.
    pub sl_fits: usize,
    pub elapsed_seconds: f64,
    pub outputs: Vec<String>,
}

impl RunManifest {
    pub fn new(command: &str, config_hash: String, master_seed: u64) -> Self {
        RunManifest {
            command: command.to_string(),
            version: env!("CARGO_PKG_VERSION").to_string(),
            config_hash,
            master_seed,
            overrides: BTreeMap::new(),
            scenario: None,
            n_reps: None,
            workers: None,
            true_ate: None,
            failures: BTreeMap::new(),
            nuisance_builds: 0,
            sl_fits: 0,
            elapsed_seconds: 0.0,
            outputs: Vec::new(),
        }
    }

    pub fn write(&self, path: &Path) -> Result<(), HarnessError> {
        ensure_parent(path)?;
        let text = serde_json::to_string_pretty(self).map_err(|e| HarnessError::Format(e.to_string()))?;
        fs::write(path, text).map_err(|e| io_err(path, e))
    }
}
