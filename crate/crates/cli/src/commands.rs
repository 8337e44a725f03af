//! Subcommand implementations. Every command writes `manifest.json` next to
//! its outputs.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use atebench::data_model::{load_csv, preprocess, DataError};
use atebench::dgd_sim::{fit_dgd as fit_model, DgdModel};
use atebench::estimators::{build_nuisances, evaluate, BundleMode};
use atebench::harness::{
    format_significant, make_scenario, run_simulation, write_metrics_csv, write_metrics_json, MetricsRow, RunManifest,
    Scenario, ScenarioKind, SimulationOutput,
};
use atebench::rng;
use atebench::AnalysisDataset;
use serde::Serialize;

use crate::config::RunConfig;
use crate::CliError;

pub struct Context {
    pub overrides: BTreeMap<String, String>,
    pub hash: String,
}

fn runtime(e: impl std::fmt::Display) -> CliError {
    CliError::Runtime(e.to_string())
}

fn data_error(e: DataError) -> CliError {
    match e {
        DataError::Io { .. } => CliError::Runtime(e.to_string()),
        _ => CliError::Validation(e.to_string()),
    }
}

fn out_dir(config: &RunConfig) -> Result<&Path, CliError> {
    let dir = config.output.dir.as_path();
    fs::create_dir_all(dir).map_err(|e| CliError::Runtime(format!("cannot create {}: {e}", dir.display())))?;
    Ok(dir)
}

fn write_text(path: &Path, text: &str) -> Result<(), CliError> {
    fs::write(path, text).map_err(|e| CliError::Runtime(format!("cannot write {}: {e}", path.display())))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    write_text(path, &serde_json::to_string_pretty(value).map_err(runtime)?)
}

fn manifest(command: &str, config: &RunConfig, ctx: &Context) -> RunManifest {
    let mut m = RunManifest::new(command, ctx.hash.clone(), config.simulation.master_seed);
    m.overrides = ctx.overrides.clone();
    m
}

fn finish(mut m: RunManifest, dir: &Path, outputs: &[&Path], start: Instant) -> Result<(), CliError> {
    m.outputs = outputs.iter().map(|p| p.display().to_string()).collect();
    m.elapsed_seconds = start.elapsed().as_secs_f64();
    m.write(&dir.join("manifest.json")).map_err(runtime)
}

fn load_dataset(config: &RunConfig) -> Result<AnalysisDataset, CliError> {
    let data = config.data()?;
    let table = load_csv(&data.path, &data.columns).map_err(data_error)?;
    preprocess(&table, &data.columns, &data.treatment_map).map_err(data_error)
}

/// The generating model for the configured scenario. Synthetic scenarios
/// are built from the reserved scenario stream of the master seed.
fn scenario_model(config: &RunConfig) -> Result<DgdModel, CliError> {
    let scenario = match config.simulation.scenario {
        ScenarioKind::FromDgd => {
            let path = config.model_path();
            let text = fs::read_to_string(&path).map_err(|e| {
                CliError::Validation(format!("model {} is not readable ({e}); run fit-dgd first", path.display()))
            })?;
            Scenario::FromDgd(Box::new(DgdModel::from_json(&text).map_err(|e| CliError::Validation(e.to_string()))?))
        }
        ScenarioKind::RandomizedRct => Scenario::RandomizedRct(config.rct.clone()),
        ScenarioKind::PositivityStress => Scenario::PositivityStress(config.positivity.clone()),
    };
    let mut stream = rng::stream(config.simulation.master_seed, rng::SCENARIO_STREAM);
    make_scenario(scenario, &mut stream).map_err(|e| CliError::Validation(e.to_string()))
}

#[derive(Serialize)]
struct FitSummary {
    n: usize,
    p: usize,
    randomized: bool,
    true_ate: f64,
    true_ate_mc_se: f64,
    residual_sd: f64,
    rows: Vec<atebench::dgd_sim::FitSummaryRow>,
}

pub fn fit_dgd(config: &RunConfig, ctx: &Context) -> Result<(), CliError> {
    let start = Instant::now();
    let data = load_dataset(config)?;
    let model = fit_model(&data, &config.hal).map_err(runtime)?;
    let dir = out_dir(config)?;
    let model_path = dir.join("dgd_model.json");
    write_text(&model_path, &model.to_json())?;

    let summary = FitSummary {
        n: data.n(),
        p: data.p(),
        randomized: model.g_model.is_randomized(),
        true_ate: model.true_ate,
        true_ate_mc_se: model.seed_meta.true_ate_mc_se,
        residual_sd: model.residual_sd,
        rows: model.summary(),
    };
    let csv_path = dir.join("fit_summary.csv");
    let mut w = csv::Writer::from_path(&csv_path).map_err(runtime)?;
    w.write_record(["Model", "Undersmoothed", "NumCoef", "Lambda", "L1Norm"]).map_err(runtime)?;
    for r in &summary.rows {
        let lambda = if r.lambda.is_finite() { format_significant(r.lambda, 6) } else { String::new() };
        w.write_record([
            r.model.clone(),
            if r.undersmoothed { "T" } else { "F" }.to_string(),
            r.num_coef.to_string(),
            lambda,
            format_significant(r.l1_norm, 6),
        ])
        .map_err(runtime)?;
    }
    w.flush().map_err(runtime)?;
    let json_path = dir.join("fit_summary.json");
    write_json(&json_path, &summary)?;

    println!("n = {}, p = {}, randomized = {}", summary.n, summary.p, summary.randomized);
    println!(
        "true ATE = {} (MC SE {})",
        format_significant(summary.true_ate, 6),
        format_significant(summary.true_ate_mc_se, 3)
    );
    println!("{:<6} {:>13} {:>9} {:>12} {:>12}", "Model", "Undersmoothed", "Num.coef", "Lambda", "L1 norm");
    for r in &summary.rows {
        println!(
            "{:<6} {:>13} {:>9} {:>12} {:>12}",
            r.model,
            if r.undersmoothed { "T" } else { "F" },
            r.num_coef,
            if r.lambda.is_finite() { format_significant(r.lambda, 4) } else { "-".into() },
            format_significant(r.l1_norm, 4)
        );
    }
    let mut m = manifest("fit-dgd", config, ctx);
    m.true_ate = Some(model.true_ate);
    finish(m, dir, &[&model_path, &csv_path, &json_path], start)
}

fn write_dataset(path: &Path, data: &AnalysisDataset) -> Result<(), CliError> {
    let mut w = csv::Writer::from_path(path).map_err(runtime)?;
    let mut header = data.column_names.clone();
    header.extend(["A".to_string(), "Y".to_string()]);
    w.write_record(&header).map_err(runtime)?;
    for i in 0..data.n() {
        let mut rec: Vec<String> = data.w.row(i).iter().map(|v| v.to_string()).collect();
        rec.push(data.a[i].to_string());
        rec.push(data.y[i].to_string());
        w.write_record(&rec).map_err(runtime)?;
    }
    w.flush().map_err(runtime)
}

pub fn simulate(config: &RunConfig, ctx: &Context) -> Result<(), CliError> {
    let start = Instant::now();
    let model = scenario_model(config)?;
    let sim = config.sim_config();
    let n = sim.n_per_rep.unwrap_or(model.w_pool.nrows());
    let dir = out_dir(config)?.join("simulated");
    fs::create_dir_all(&dir).map_err(runtime)?;
    let mut outputs: Vec<PathBuf> = Vec::new();
    for r in 0..sim.n_reps {
        let rep = model.sample_replicate(n, sim.master_seed, r).map_err(runtime)?;
        let path = dir.join(format!("replicate_{r:05}.csv"));
        write_dataset(&path, &rep.data)?;
        outputs.push(path);
    }
    println!("wrote {} replicate(s) of n = {n} to {}", sim.n_reps, dir.display());
    let mut m = manifest("simulate", config, ctx);
    m.scenario = Some(sim.scenario.to_string());
    m.n_reps = Some(sim.n_reps);
    m.true_ate = Some(model.true_ate);
    let refs: Vec<&Path> = outputs.iter().map(PathBuf::as_path).collect();
    finish(m, out_dir(config)?, &refs, start)
}

#[derive(Serialize)]
struct EstimateRecord {
    method: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    estimate: Option<atebench::AteEstimate>,
    #[serde(skip_serializing_if = "Option::is_none")]
    error: Option<String>,
}

pub fn estimate(config: &RunConfig, ctx: &Context) -> Result<(), CliError> {
    let start = Instant::now();
    let data = load_dataset(config)?;
    let methods = &config.simulation.estimators;
    let mut stream = rng::stream(config.simulation.master_seed, 0);
    let set = match BundleMode::for_methods(methods) {
        Some(mode) => build_nuisances(&data, &config.super_learner, mode, &mut stream).map_err(runtime)?,
        None => Default::default(),
    };
    let records: Vec<EstimateRecord> = methods
        .iter()
        .map(|&m| match evaluate(m, &data, &set, &config.ctmle, &mut stream) {
            Ok(e) => EstimateRecord { method: m.name().into(), estimate: Some(e), error: None },
            Err(e) => EstimateRecord { method: m.name().into(), estimate: None, error: Some(e.to_string()) },
        })
        .collect();

    let dir = out_dir(config)?;
    let csv_path = dir.join("estimates.csv");
    let mut w = csv::Writer::from_path(&csv_path).map_err(runtime)?;
    w.write_record(["Method", "psi", "se", "ci_lo", "ci_hi", "error"]).map_err(runtime)?;
    println!("{:<18} {:>12} {:>12} {:>26}", "Method", "psi", "se", "95% CI");
    for r in &records {
        let f = |x: f64| format_significant(x, 6);
        match &r.estimate {
            Some(e) => {
                w.write_record([r.method.clone(), f(e.psi), f(e.se), f(e.ci_lo), f(e.ci_hi), String::new()])
                    .map_err(runtime)?;
                println!(
                    "{:<18} {:>12} {:>12} {:>26}",
                    r.method,
                    f(e.psi),
                    f(e.se),
                    format!("[{}, {}]", f(e.ci_lo), f(e.ci_hi))
                );
            }
            None => {
                let msg = r.error.clone().unwrap_or_default();
                w.write_record([
                    r.method.clone(),
                    String::new(),
                    String::new(),
                    String::new(),
                    String::new(),
                    msg.clone(),
                ])
                .map_err(runtime)?;
                println!("{:<18} failed: {msg}", r.method);
            }
        }
    }
    w.flush().map_err(runtime)?;
    let json_path = dir.join("estimates.json");
    write_json(&json_path, &records)?;

    let mut m = manifest("estimate", config, ctx);
    m.failures = records.iter().map(|r| (r.method.clone(), usize::from(r.estimate.is_none()))).collect();
    m.sl_fits = set.sl_fits;
    m.nuisance_builds = usize::from(set.sl_fits > 0);
    finish(m, dir, &[&csv_path, &json_path], start)
}

fn print_metrics(rows: &[MetricsRow]) {
    println!(
        "{:<18} {:>10} {:>10} {:>10} {:>10} {:>8} {:>9} {:>9} {:>9}",
        "Method", "TrueATE", "Variance", "Bias", "MSE", "rMSE", "Coverage", "Coverage2", "CIwidth"
    );
    for r in rows {
        let f = |x: f64| format_significant(x, 4);
        println!(
            "{:<18} {:>10} {:>10} {:>10} {:>10} {:>8} {:>9} {:>9} {:>9}",
            r.method,
            f(r.true_ate),
            f(r.variance),
            f(r.bias),
            f(r.mse),
            r.rmse.map(f).unwrap_or_else(|| "-".into()),
            f(r.coverage),
            f(r.coverage2),
            f(r.ci_width)
        );
    }
}

fn write_report(dir: &Path, out: &SimulationOutput) -> Result<(Vec<MetricsRow>, PathBuf, PathBuf), CliError> {
    let rows = out.metrics();
    if rows.is_empty() {
        return Err(CliError::Runtime("no method had two successful replicates".into()));
    }
    let csv_path = dir.join("metrics.csv");
    let json_path = dir.join("metrics.json");
    write_metrics_csv(&rows, &csv_path).map_err(runtime)?;
    write_metrics_json(&rows, &json_path).map_err(runtime)?;
    Ok((rows, csv_path, json_path))
}

pub fn benchmark(config: &RunConfig, ctx: &Context) -> Result<(), CliError> {
    let start = Instant::now();
    let model = scenario_model(config)?;
    let sim = config.sim_config();
    sim.visible_covariates(&model.column_names).map_err(|e| CliError::Validation(e.to_string()))?;
    let out = run_simulation(&model, &sim).map_err(runtime)?;
    let dir = out_dir(config)?;
    let reps_path = dir.join("replicates.json");
    write_json(&reps_path, &out)?;
    let (rows, csv_path, json_path) = write_report(dir, &out)?;
    print_metrics(&rows);

    let mut m = manifest("benchmark", config, ctx);
    m.scenario = Some(sim.scenario.to_string());
    m.n_reps = Some(sim.n_reps);
    m.workers = Some(sim.workers);
    m.true_ate = Some(out.true_ate);
    m.failures = out.failure_counts();
    m.sl_fits = out.sl_fits();
    m.nuisance_builds = out.nuisance_builds();
    finish(m, dir, &[&csv_path, &json_path, &reps_path], start)
}

pub fn report(config: &RunConfig, ctx: &Context, input: Option<PathBuf>) -> Result<(), CliError> {
    let start = Instant::now();
    let path = input.unwrap_or_else(|| config.output.dir.join("replicates.json"));
    let text =
        fs::read_to_string(&path).map_err(|e| CliError::Validation(format!("cannot read {}: {e}", path.display())))?;
    let out: SimulationOutput = serde_json::from_str(&text)
        .map_err(|e| CliError::Validation(format!("{} is not a replicate file: {e}", path.display())))?;
    let dir = out_dir(config)?;
    let (rows, csv_path, json_path) = write_report(dir, &out)?;
    print_metrics(&rows);
    let mut m = manifest("report", config, ctx);
    m.scenario = Some(out.scenario.clone());
    m.n_reps = Some(out.results.len());
    m.true_ate = Some(out.true_ate);
    m.failures = out.failure_counts();
    finish(m, dir, &[&csv_path, &json_path], start)
}
