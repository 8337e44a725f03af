//! Collaborative TMLE with greedy forward selection of propensity
//! covariates.
//!
//! Each candidate is a chain of targeting steps. A step fits a main-terms
//! logistic propensity on a covariate subset and fluctuates the current
//! regression along its clever covariate. Candidate `k` uses `k` covariates.
//! When the best addition fails to lower the training loss, the chain
//! restarts from the previous candidate's targeted regression. The candidate
//! index minimizes a penalized V-fold criterion: validation RSS, plus the
//! variance of the validation influence curve, plus `n` times the squared
//! gap between the validation estimate and the full-data estimate of the
//! last candidate.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use super::tmle::{apply_epsilon, fluctuate_unit, targeted_estimate, OutcomeBounds};
use super::{clever, truncate_g, AteEstimate, EstimatorError, Method, NuisanceBundle, G_TRUNCATION};
use crate::data_model::AnalysisDataset;
use crate::folds::FoldScheme;
use crate::super_learner::{logistic_regression, LinearPredictor, Predictor};

const G_RIDGE: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CtmleOptions {
    /// Longest candidate sequence; capped by the number of covariates.
    pub max_steps: usize,
    /// Folds for selecting the candidate index.
    pub folds: usize,
    pub truncation: f64,
}

impl Default for CtmleOptions {
    fn default() -> Self {
        CtmleOptions { max_steps: 10, folds: 5, truncation: G_TRUNCATION }
    }
}

#[derive(Debug, Clone)]
struct Step {
    covariates: Vec<usize>,
    g: LinearPredictor,
    epsilon: f64,
}

/// Unit-scale regressions carried along a chain.
#[derive(Debug, Clone)]
struct State {
    q_a: Vec<f64>,
    q_1: Vec<f64>,
    q_0: Vec<f64>,
    /// Clever covariate of the last step applied.
    h: Vec<f64>,
}

struct Rows<'a> {
    w: DMatrix<f64>,
    a: &'a [f64],
    ystar: Vec<f64>,
    start: State,
}

fn propensity(step_g: &LinearPredictor, w: &DMatrix<f64>, covariates: &[usize], delta: f64) -> Vec<f64> {
    truncate_g(&step_g.predict(&w.select_columns(covariates)), delta)
}

fn apply_step(step: &Step, w: &DMatrix<f64>, a: &[f64], state: &State, delta: f64) -> State {
    let g = propensity(&step.g, w, &step.covariates, delta);
    let h = a.iter().zip(&g).map(|(&a, &g)| clever(a, g)).collect();
    let u = apply_epsilon(step.epsilon, 0, &g, &state.q_a, &state.q_1, &state.q_0, h);
    State { q_a: u.q_a, q_1: u.q_1, q_0: u.q_0, h: u.h }
}

fn apply_chain(chain: &[Step], w: &DMatrix<f64>, a: &[f64], start: &State, delta: f64) -> State {
    chain.iter().fold(start.clone(), |s, step| apply_step(step, w, a, &s, delta))
}

fn loss(ystar: &[f64], q_a: &[f64]) -> f64 {
    ystar.iter().zip(q_a).map(|(y, q)| (y - q) * (y - q)).sum::<f64>()
}

fn plug_in(s: &State) -> f64 {
    s.q_1.iter().zip(&s.q_0).map(|(a, b)| a - b).sum::<f64>() / s.q_1.len() as f64
}

/// Sample variance of the unit-scale influence curve of a targeted state.
fn eic_variance(ystar: &[f64], s: &State, psi: f64) -> f64 {
    let d: Vec<f64> = (0..ystar.len()).map(|i| s.h[i] * (ystar[i] - s.q_a[i]) + s.q_1[i] - s.q_0[i] - psi).collect();
    if d.len() < 2 {
        0.0
    } else {
        crate::stats::sample_variance(&d)
    }
}

/// Fits the propensity on `covariates` and targets `base`.
fn try_step(rows: &Rows, covariates: &[usize], base: &State, delta: f64) -> Result<(Step, State, f64), EstimatorError> {
    let g_fit = logistic_regression(&rows.w.select_columns(covariates), rows.a, G_RIDGE)?;
    let g = propensity(&g_fit, &rows.w, covariates, delta);
    let u = fluctuate_unit(&rows.ystar, rows.a, &g, &base.q_a, &base.q_1, &base.q_0)?;
    let state = State { q_a: u.q_a, q_1: u.q_1, q_0: u.q_0, h: u.h };
    let l = loss(&rows.ystar, &state.q_a);
    Ok((Step { covariates: covariates.to_vec(), g: g_fit, epsilon: u.epsilon }, state, l))
}

/// Greedy candidate sequence. Entry `k` is the full chain of candidate `k`.
fn build_sequence(rows: &Rows, candidates: &[usize], opts: &CtmleOptions) -> Result<Vec<Vec<Step>>, EstimatorError> {
    let delta = opts.truncation;
    let (step0, mut last_state, mut last_loss) = try_step(rows, &[], &rows.start, delta)?;
    let mut chains = vec![vec![step0]];
    let mut base_chain: Vec<Step> = Vec::new();
    let mut base_state = rows.start.clone();
    let mut selected: Vec<usize> = Vec::new();
    let steps = opts.max_steps.min(candidates.len());
    for _ in 0..steps {
        let mut best = search(rows, candidates, &selected, &base_state, delta)?;
        if best.3 >= last_loss {
            base_chain = chains.last().expect("sequence is nonempty").clone();
            base_state = last_state.clone();
            best = search(rows, candidates, &selected, &base_state, delta)?;
        }
        let (j, step, state, l) = best;
        selected.push(j);
        let mut chain = base_chain.clone();
        chain.push(step);
        chains.push(chain);
        last_state = state;
        last_loss = l;
    }
    Ok(chains)
}

fn search(
    rows: &Rows,
    candidates: &[usize],
    selected: &[usize],
    base: &State,
    delta: f64,
) -> Result<(usize, Step, State, f64), EstimatorError> {
    let mut best: Option<(usize, Step, State, f64)> = None;
    for &j in candidates.iter().filter(|j| !selected.contains(j)) {
        let mut covs = selected.to_vec();
        covs.push(j);
        let (step, state, l) = try_step(rows, &covs, base, delta)?;
        if best.as_ref().is_none_or(|b| l < b.3) {
            best = Some((j, step, state, l));
        }
    }
    best.ok_or_else(|| EstimatorError::Input("no covariate left to add".into()))
}

/// Collaborative TMLE with propensity candidates built from the columns of
/// `g_covariates`; the initial regression comes from `q_bundle`.
pub fn ctmle_greedy(
    data: &AnalysisDataset,
    g_covariates: &DMatrix<f64>,
    q_bundle: &NuisanceBundle,
    folds: &FoldScheme,
    opts: &CtmleOptions,
) -> Result<AteEstimate, EstimatorError> {
    q_bundle.check(data)?;
    if g_covariates.nrows() != data.n() || folds.assignments.len() != data.n() {
        return Err(EstimatorError::Input("covariates, folds and data differ in rows".into()));
    }
    let bounds = OutcomeBounds::from_outcome(&data.y);
    let unit = |v: &[f64]| v.iter().map(|&q| bounds.to_unit_clipped(q)).collect::<Vec<_>>();
    let ystar: Vec<f64> = data.y.iter().map(|&y| bounds.to_unit(y)).collect();
    let start = State {
        q_a: unit(&q_bundle.qbar_a),
        q_1: unit(&q_bundle.qbar_1),
        q_0: unit(&q_bundle.qbar_0),
        h: vec![0.0; data.n()],
    };
    let candidates: Vec<usize> = (0..g_covariates.ncols()).collect();
    let subset = |idx: &[usize]| -> (Vec<f64>, State, Vec<f64>) {
        let pick = |v: &[f64]| idx.iter().map(|&i| v[i]).collect::<Vec<_>>();
        (
            pick(&data.a),
            State { q_a: pick(&start.q_a), q_1: pick(&start.q_1), q_0: pick(&start.q_0), h: pick(&start.h) },
            pick(&ystar),
        )
    };

    // Full-data sequence; its last candidate is the bias reference.
    let rows = Rows { w: g_covariates.clone(), a: &data.a, ystar: ystar.clone(), start: start.clone() };
    let chains = build_sequence(&rows, &candidates, opts)?;
    let reference = {
        let s = apply_chain(chains.last().expect("sequence is nonempty"), &rows.w, &data.a, &start, opts.truncation);
        plug_in(&s)
    };

    let n = data.n() as f64;
    let mut rss = vec![0.0; chains.len()];
    let mut variance = vec![0.0; chains.len()];
    let mut bias_sq = vec![0.0; chains.len()];
    for v in 0..folds.v {
        let (train, valid) = (folds.training(v), folds.validation(v));
        let (a_t, s_t, y_t) = subset(&train);
        let fold_rows = Rows { w: g_covariates.select_rows(&train), a: &a_t, ystar: y_t, start: s_t };
        let fold_chains = build_sequence(&fold_rows, &candidates, opts)?;
        let (a_v, s_v, y_v) = subset(&valid);
        let w_v = g_covariates.select_rows(&valid);
        for (k, chain) in fold_chains.iter().enumerate().take(chains.len()) {
            let s = apply_chain(chain, &w_v, &a_v, &s_v, opts.truncation);
            let psi = plug_in(&s);
            rss[k] += loss(&y_v, &s.q_a);
            variance[k] += eic_variance(&y_v, &s, psi) / folds.v as f64;
            bias_sq[k] += (psi - reference).powi(2) / folds.v as f64;
        }
    }
    let cv_loss: Vec<f64> = (0..chains.len()).map(|k| rss[k] + variance[k] + n * bias_sq[k]).collect();
    let selected = cv_loss.iter().enumerate().min_by(|a, b| a.1.total_cmp(b.1)).map(|(k, _)| k).unwrap_or(0);

    let chain = &chains[selected.min(chains.len() - 1)];
    let s = apply_chain(chain, &rows.w, &data.a, &start, opts.truncation);
    let back = |v: &[f64]| v.iter().map(|&q| bounds.from_unit(q)).collect::<Vec<_>>();
    let e = targeted_estimate(Method::Ctmle.name(), &data.y, &s.h, &back(&s.q_a), &back(&s.q_1), &back(&s.q_0));
    let n_cov = chain.last().map_or(0, |st| st.covariates.len());
    Ok(e.with_diagnostic("selected_index", selected as f64)
        .with_diagnostic("selected_covariates", n_cov as f64)
        .with_diagnostic("chain_length", chain.len() as f64)
        .with_diagnostic("epsilon", chain.last().map_or(0.0, |st| st.epsilon)))
}
