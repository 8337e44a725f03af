//! Highly adaptive lasso.
//!
//! A HAL fit is an L1-penalized GLM over indicator basis functions
//! `I(x_s >= knot)` with knots at observed values. The penalty is first chosen
//! by 10-fold cross-validation and then decreased geometrically
//! (undersmoothing) until, for every basis function active at the CV
//! penalty, the empirical score `mean(phi * residual)` is at most
//! `sigma / (sqrt(n) log n)`, with `sigma` the SD of `phi * residual` at the
//! CV penalty.

pub mod basis;
pub mod lasso;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use basis::{design_for, enumerate_basis, evaluate_basis, BasisExpansion, BasisFunction};
pub use lasso::{fit_lasso_path, lambda_grid, lambda_max, Column, Design, LassoSolver, PathFit, SolverOptions};

use crate::folds::{make_folds, FoldError};
use crate::link::{bernoulli_nll, Family};
use crate::rng;

#[derive(Debug, Error, PartialEq)]
pub enum HalError {
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("coordinate descent did not converge at lambda = {lambda:e}")]
    Convergence { lambda: f64 },
    #[error("basis expansion exceeds the configured cap of {cap} columns")]
    Capacity { cap: usize },
    #[error(transparent)]
    Folds(#[from] FoldError),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("malformed fit document: {0}")]
    Document(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HalConfig {
    /// Overrides the interaction-degree rule (`2` if `p >= 20`, else `3`).
    pub max_degree: Option<usize>,
    /// Apply the `floor(sqrt(n) / 2^(d-1))` knot cap per dimension.
    pub bin_knots: bool,
    pub lambda_grid_size: usize,
    pub lambda_min_ratio: f64,
    pub cv_folds: usize,
    pub undersmooth_decay: f64,
    pub max_undersmooth_steps: usize,
    /// Capacity limit on the number of basis columns.
    pub max_columns: usize,
    pub tolerance: f64,
    pub max_passes: usize,
    /// Seed of the CV fold assignment.
    pub seed: u64,
}

impl Default for HalConfig {
    fn default() -> Self {
        HalConfig {
            max_degree: None,
            bin_knots: true,
            lambda_grid_size: 100,
            lambda_min_ratio: 1e-4,
            cv_folds: 10,
            undersmooth_decay: 0.9,
            max_undersmooth_steps: 200,
            max_columns: 400_000,
            tolerance: 1e-7,
            max_passes: 100_000,
            seed: 20_210_101,
        }
    }
}

impl HalConfig {
    pub fn max_degree(&self, p: usize) -> usize {
        self.max_degree.unwrap_or(if p >= 20 { 2 } else { 3 })
    }

    pub fn knot_cap(&self, n: usize, degree: usize) -> usize {
        if !self.bin_knots {
            return n;
        }
        let cap = (n as f64).sqrt() / 2f64.powi(degree as i32 - 1);
        // A single cut point can only produce the constant column.
        (cap.floor() as usize).max(2)
    }

    pub fn solver_options(&self) -> SolverOptions {
        SolverOptions { tolerance: self.tolerance, max_passes: self.max_passes, ..Default::default() }
    }

    pub fn validate(&self) -> Result<(), HalError> {
        if !(self.undersmooth_decay > 0.0 && self.undersmooth_decay < 1.0) {
            return Err(HalError::Config(format!(
                "undersmooth_decay must be in (0,1), got {}",
                self.undersmooth_decay
            )));
        }
        if self.lambda_grid_size < 2 {
            return Err(HalError::Config("lambda_grid_size must be at least 2".into()));
        }
        if !(self.lambda_min_ratio > 0.0 && self.lambda_min_ratio < 1.0) {
            return Err(HalError::Config("lambda_min_ratio must be in (0,1)".into()));
        }
        if self.cv_folds < 2 {
            return Err(HalError::Config("cv_folds must be at least 2".into()));
        }
        if self.max_degree == Some(0) {
            return Err(HalError::Config("max_degree must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Term {
    pub support: Vec<usize>,
    pub knot: Vec<f64>,
    pub coefficient: f64,
}

impl Term {
    pub fn function(&self) -> BasisFunction {
        BasisFunction::new(self.support.clone(), self.knot.clone())
    }
}

/// A fitted HAL model: `mu(x) = link^-1(intercept + sum_k coef_k phi_k(x))`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HalFit {
    pub family: Family,
    pub intercept: f64,
    pub terms: Vec<Term>,
    pub lambda: f64,
    pub l1_norm: f64,
    /// Predictions on the training rows.
    pub fitted_values: Vec<f64>,
}

const FIT_FORMAT: &str = "atebench.hal_fit";
const FIT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct FitDocument {
    format: String,
    version: u32,
    #[serde(flatten)]
    fit: HalFit,
}

impl HalFit {
    /// Builds a fit from explicit terms; `x` supplies the rows on which
    /// `fitted_values` are evaluated.
    pub fn from_terms(family: Family, intercept: f64, terms: Vec<Term>, lambda: f64, x: &DMatrix<f64>) -> Self {
        let l1_norm = terms.iter().map(|t| t.coefficient.abs()).sum();
        let mut fit = HalFit { family, intercept, terms, lambda, l1_norm, fitted_values: Vec::new() };
        fit.fitted_values = fit.predict(x);
        fit
    }

    fn from_path(family: Family, path: &PathFit, functions: &[BasisFunction], design: &Design) -> Self {
        let terms = path
            .coefficients
            .iter()
            .map(|&(j, b)| Term {
                support: functions[j].support.clone(),
                knot: functions[j].knot.clone(),
                coefficient: b,
            })
            .collect();
        HalFit {
            family,
            intercept: path.intercept,
            terms,
            lambda: path.lambda,
            l1_norm: path.l1_norm(),
            fitted_values: path.predict(design, family),
        }
    }

    pub fn num_nonzero(&self) -> usize {
        self.terms.len()
    }

    pub fn linear_predictor_row(&self, x: &DMatrix<f64>, i: usize) -> f64 {
        self.intercept
            + self
                .terms
                .iter()
                .filter(|t| t.support.iter().zip(&t.knot).all(|(&k, &c)| x[(i, k)] >= c))
                .map(|t| t.coefficient)
                .sum::<f64>()
    }

    /// Linear predictor for gaussian fits, inverse-logit of it for binomial.
    pub fn predict(&self, x: &DMatrix<f64>) -> Vec<f64> {
        (0..x.nrows()).map(|i| self.family.inverse_link(self.linear_predictor_row(x, i))).collect()
    }

    pub fn predict_row(&self, x: &[f64]) -> f64 {
        let eta = self.intercept
            + self
                .terms
                .iter()
                .filter(|t| t.support.iter().zip(&t.knot).all(|(&k, &c)| x[k] >= c))
                .map(|t| t.coefficient)
                .sum::<f64>();
        self.family.inverse_link(eta)
    }

    /// Largest covariate index referenced by any term, plus one.
    pub fn required_columns(&self) -> usize {
        self.terms.iter().flat_map(|t| t.support.iter()).map(|&k| k + 1).max().unwrap_or(0)
    }

    pub fn to_json(&self) -> String {
        let doc = FitDocument { format: FIT_FORMAT.to_string(), version: FIT_VERSION, fit: self.clone() };
        serde_json::to_string_pretty(&doc).expect("fit serializes")
    }

    pub fn from_json(text: &str) -> Result<Self, HalError> {
        let doc: FitDocument = serde_json::from_str(text).map_err(|e| HalError::Document(e.to_string()))?;
        if doc.format != FIT_FORMAT || doc.version != FIT_VERSION {
            return Err(HalError::Document(format!("unsupported document {} v{}", doc.format, doc.version)));
        }
        Ok(doc.fit)
    }
}

/// Outcome of cross-validated penalty selection.
#[derive(Debug, Clone)]
pub struct CvSelection {
    pub lambda_cv: f64,
    pub index: usize,
    pub grid: Vec<f64>,
    /// Mean out-of-fold loss per grid point.
    pub cv_risk: Vec<f64>,
    /// Full-data fit at `lambda_cv`.
    pub fit: PathFit,
}

/// Consecutive non-improving CV risks after which the penalty walk stops.
const CV_PATIENCE: usize = 10;

fn loss(family: Family, y: f64, eta: f64) -> f64 {
    match family {
        Family::Gaussian => (y - eta) * (y - eta),
        Family::Binomial => bernoulli_nll(y, crate::link::expit(eta)),
    }
}

/// Selects the penalty minimizing mean out-of-fold loss (squared error or
/// Bernoulli deviance) over a log-spaced grid from `lambda_max`.
pub fn cv_select_lambda(
    design: &Design,
    y: &[f64],
    family: Family,
    config: &HalConfig,
) -> Result<CvSelection, HalError> {
    let n = design.nrows();
    let opts = config.solver_options();
    let mut stream = rng::stream(config.seed, rng::HAL_CV_STREAM);
    let folds = make_folds(n, config.cv_folds, &mut stream)?;
    // Nudged up so rounding cannot let a coefficient in at the first point.
    let grid =
        lambda_grid(lambda_max(design, y, None) * (1.0 + 1e-9), config.lambda_grid_size, config.lambda_min_ratio);

    struct FoldPath {
        valid: Vec<usize>,
        d_train: Design,
        d_valid: Design,
        y_train: Vec<f64>,
    }
    let paths: Vec<FoldPath> = (0..folds.v)
        .map(|k| {
            let train = folds.training(k);
            let valid = folds.validation(k);
            FoldPath {
                d_train: design.subset_rows(&train),
                d_valid: design.subset_rows(&valid),
                y_train: train.iter().map(|&i| y[i]).collect(),
                valid,
            }
        })
        .collect();
    let mut solvers = paths
        .iter()
        .map(|p| LassoSolver::new(&p.d_train, &p.y_train, family, None, opts))
        .collect::<Result<Vec<_>, _>>()?;

    // The grid is walked in step across folds so the walk can stop once
    // CV_PATIENCE consecutive penalties fail to improve on the best CV risk;
    // the remaining, smaller penalties are dropped from the grid.
    let mut risk = Vec::with_capacity(grid.len());
    let mut best = 0;
    for (g, &lambda) in grid.iter().enumerate() {
        let mut total = 0.0;
        for (p, solver) in paths.iter().zip(solvers.iter_mut()) {
            let fit = solver.fit(lambda)?;
            let eta = fit.linear_predictor(&p.d_valid);
            total += p.valid.iter().zip(&eta).map(|(&i, &e)| loss(family, y[i], e)).sum::<f64>();
        }
        risk.push(total / n as f64);
        if risk[g] < risk[best] {
            best = g;
        }
        if g >= best + CV_PATIENCE {
            break;
        }
    }
    let index = best;
    let grid: Vec<f64> = grid[..risk.len()].to_vec();

    let mut solver = LassoSolver::new(design, y, family, None, opts)?;
    let mut fit = None;
    for &lambda in &grid[..=index] {
        fit = Some(solver.fit(lambda)?);
    }
    Ok(CvSelection { lambda_cv: grid[index], index, grid, cv_risk: risk, fit: fit.expect("grid nonempty") })
}

/// Anchor of the undersmoothing loop, computed at the CV penalty.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UndersmoothState {
    pub lambda_cv: f64,
    /// Basis columns with a nonzero coefficient at `lambda_cv`.
    pub active_directions: Vec<usize>,
    /// SD (1/n) of `phi_j * residual` at `lambda_cv`, aligned with `active_directions`.
    pub sigma: Vec<f64>,
    pub steps_taken: usize,
    /// Criterion met (trivially true when skipped).
    pub converged: bool,
    /// No active directions at `lambda_cv`; the CV fit was returned as is.
    pub skipped: bool,
    /// Largest normalized score of the returned fit.
    pub max_score: f64,
    pub threshold: f64,
}

/// Normalized scores of a fit against an anchor.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreReport {
    /// `(column, |mean(phi * r)| / sigma)` for directions with positive sigma.
    pub scores: Vec<(usize, f64)>,
    /// Directions whose sigma is zero.
    pub excluded: Vec<usize>,
}

impl ScoreReport {
    pub fn max(&self) -> f64 {
        self.scores.iter().map(|s| s.1).fold(0.0, f64::max)
    }
}

/// `1 / (sqrt(n) log n)`.
pub fn score_threshold(n: usize) -> f64 {
    let n = n as f64;
    1.0 / (n.sqrt() * n.ln())
}

fn product_mean(col: &Column, r: &[f64]) -> f64 {
    let n = r.len() as f64;
    match col {
        Column::Indicator(idx) => idx.iter().map(|&i| r[i as usize]).sum::<f64>() / n,
        Column::Dense(x) => x.iter().zip(r).map(|(x, r)| x * r).sum::<f64>() / n,
    }
}

fn product_sd(col: &Column, r: &[f64]) -> f64 {
    let n = r.len();
    let m = product_mean(col, r);
    let ss = match col {
        Column::Indicator(idx) => {
            idx.iter().map(|&i| (r[i as usize] - m).powi(2)).sum::<f64>() + (n - idx.len()) as f64 * m * m
        }
        Column::Dense(x) => x.iter().zip(r).map(|(x, r)| (x * r - m).powi(2)).sum::<f64>(),
    };
    (ss / n as f64).sqrt()
}

fn residuals(y: &[f64], fitted: &[f64]) -> Vec<f64> {
    y.iter().zip(fitted).map(|(y, f)| y - f).collect()
}

pub fn normalized_scores_from_residuals(residuals: &[f64], anchor: &UndersmoothState, design: &Design) -> ScoreReport {
    let mut scores = Vec::new();
    let mut excluded = Vec::new();
    for (&j, &sigma) in anchor.active_directions.iter().zip(&anchor.sigma) {
        if sigma > 0.0 {
            scores.push((j, product_mean(design.column(j), residuals).abs() / sigma));
        } else {
            excluded.push(j);
        }
    }
    ScoreReport { scores, excluded }
}

/// Scores of `current` (through its fitted values) over the anchor's active
/// directions.
pub fn normalized_scores(current: &HalFit, anchor: &UndersmoothState, design: &Design, y: &[f64]) -> ScoreReport {
    normalized_scores_from_residuals(&residuals(y, &current.fitted_values), anchor, design)
}

fn anchor_state(cv: &CvSelection, design: &Design, y: &[f64], family: Family) -> UndersmoothState {
    let r = residuals(y, &cv.fit.predict(design, family));
    let active_directions: Vec<usize> = cv.fit.coefficients.iter().map(|&(j, _)| j).collect();
    let sigma = active_directions.iter().map(|&j| product_sd(design.column(j), &r)).collect();
    UndersmoothState {
        lambda_cv: cv.lambda_cv,
        active_directions,
        sigma,
        steps_taken: 0,
        converged: false,
        skipped: false,
        max_score: 0.0,
        threshold: score_threshold(y.len()),
    }
}

/// Undersmooths from an existing CV selection.
pub fn undersmooth_from(
    expansion: &BasisExpansion,
    y: &[f64],
    family: Family,
    config: &HalConfig,
    cv: &CvSelection,
) -> Result<(HalFit, UndersmoothState), HalError> {
    let design = &expansion.design;
    let mut state = anchor_state(cv, design, y, family);
    if state.active_directions.is_empty() {
        state.skipped = true;
        state.converged = true;
        return Ok((HalFit::from_path(family, &cv.fit, &expansion.functions, design), state));
    }
    let score_of = |fit: &PathFit, state: &UndersmoothState| {
        let report = normalized_scores_from_residuals(&residuals(y, &fit.predict(design, family)), state, design);
        if !report.excluded.is_empty() {
            log::debug!("{} zero-variance directions excluded from the score criterion", report.excluded.len());
        }
        report.max()
    };

    let mut solver = LassoSolver::new(design, y, family, None, config.solver_options())?;
    solver.warm_start(&cv.fit);
    let mut current = cv.fit.clone();
    let mut current_score = score_of(&current, &state);
    let mut best = (current_score, current.clone());
    while current_score > state.threshold && state.steps_taken < config.max_undersmooth_steps {
        let lambda = current.lambda * config.undersmooth_decay;
        current = solver.fit(lambda)?;
        state.steps_taken += 1;
        current_score = score_of(&current, &state);
        if current_score < best.0 {
            best = (current_score, current.clone());
        }
    }
    state.converged = best.0 <= state.threshold;
    state.max_score = best.0;
    if !state.converged {
        log::warn!(
            "undersmoothing stopped after {} steps with max score {:.3e} above {:.3e}",
            state.steps_taken,
            best.0,
            state.threshold
        );
    }
    Ok((HalFit::from_path(family, &best.1, &expansion.functions, design), state))
}

/// CV selection followed by undersmoothing on a prebuilt expansion.
pub fn undersmooth(
    expansion: &BasisExpansion,
    y: &[f64],
    family: Family,
    config: &HalConfig,
) -> Result<(HalFit, UndersmoothState), HalError> {
    config.validate()?;
    let cv = cv_select_lambda(&expansion.design, y, family, config)?;
    undersmooth_from(expansion, y, family, config, &cv)
}

/// Everything produced by one HAL fit on a covariate matrix.
#[derive(Debug, Clone)]
pub struct HalOutcome {
    pub fit: HalFit,
    pub cv_fit: HalFit,
    pub state: UndersmoothState,
    pub basis_size: usize,
}

/// Enumerates the basis on `x`, selects the CV penalty and undersmooths.
pub fn fit_hal(x: &DMatrix<f64>, y: &[f64], family: Family, config: &HalConfig) -> Result<HalOutcome, HalError> {
    config.validate()?;
    if x.nrows() != y.len() {
        return Err(HalError::InvalidInput("row count mismatch".into()));
    }
    let expansion = enumerate_basis(x, config)?;
    let cv = cv_select_lambda(&expansion.design, y, family, config)?;
    let cv_fit = HalFit::from_path(family, &cv.fit, &expansion.functions, &expansion.design);
    let (fit, state) = undersmooth_from(&expansion, y, family, config, &cv)?;
    Ok(HalOutcome { fit, cv_fit, state, basis_size: expansion.len() })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::Rng;

    #[test]
    fn threshold_at_100() {
        assert_abs_diff_eq!(score_threshold(100), 0.021714, epsilon = 1e-6);
    }

    #[test]
    fn score_hand_example() {
        // r = (1, -1) now and at the anchor, phi = (1, 0):
        // numerator |1/2| = 0.5, anchor products (1, 0) have SD 0.5.
        let design = Design::new(2, vec![Column::Indicator(vec![0])]);
        let r = [1.0, -1.0];
        let sigma = product_sd(design.column(0), &r);
        assert_abs_diff_eq!(sigma, 0.5, epsilon = 1e-15);
        let state = UndersmoothState {
            lambda_cv: 1.0,
            active_directions: vec![0],
            sigma: vec![sigma],
            steps_taken: 0,
            converged: false,
            skipped: false,
            max_score: 0.0,
            threshold: score_threshold(2),
        };
        let report = normalized_scores_from_residuals(&r, &state, &design);
        assert_abs_diff_eq!(report.max(), 1.0, epsilon = 1e-15);
        // saturated fit: zero residuals
        assert_eq!(normalized_scores_from_residuals(&[0.0, 0.0], &state, &design).max(), 0.0);
        // constant direction with mean-zero residuals
        let ones = Design::new(2, vec![Column::Indicator(vec![0, 1])]);
        let s = UndersmoothState { sigma: vec![1.0], ..state.clone() };
        assert_eq!(normalized_scores_from_residuals(&[1.0, -1.0], &s, &ones).max(), 0.0);
        // zero sigma is excluded
        let s = UndersmoothState { sigma: vec![0.0], ..state };
        let rep = normalized_scores_from_residuals(&r, &s, &design);
        assert!(rep.scores.is_empty());
        assert_eq!(rep.excluded, vec![0]);
    }

    #[test]
    fn predict_forms() {
        let x = DMatrix::from_row_slice(2, 1, &[0.0, 1.0]);
        let g = HalFit::from_terms(Family::Gaussian, 1.0, vec![], 0.1, &x);
        assert_eq!(g.predict(&x), vec![1.0, 1.0]);
        let b = HalFit::from_terms(Family::Binomial, 0.0, vec![], 0.1, &x);
        assert_eq!(b.predict(&x), vec![0.5, 0.5]);
        let t = Term { support: vec![0], knot: vec![0.5], coefficient: 2.0 };
        let g = HalFit::from_terms(Family::Gaussian, 1.0, vec![t], 0.1, &x);
        assert_eq!(g.predict(&x), vec![1.0, 3.0]);
        assert_eq!(g.l1_norm, 2.0);
    }

    #[test]
    fn json_round_trip_is_exact() {
        let x = DMatrix::from_row_slice(3, 2, &[0.1, 0.2, 0.3, 0.4, 0.5, 0.6]);
        let terms = vec![
            Term { support: vec![0], knot: vec![0.1 + 0.2], coefficient: 1.0 / 3.0 },
            Term { support: vec![0, 1], knot: vec![0.3, std::f64::consts::PI], coefficient: -2.0e-300 },
        ];
        let fit = HalFit::from_terms(Family::Binomial, -0.7 / 3.0, terms, 1e-5 / 7.0, &x);
        let back = HalFit::from_json(&fit.to_json()).unwrap();
        assert_eq!(back, fit);
        for (a, b) in back.fitted_values.iter().zip(&fit.fitted_values) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
        assert!(HalFit::from_json("{\"format\":\"x\"}").is_err());
    }

    #[test]
    fn cv_with_leave_one_out_folds() {
        let x = DMatrix::from_fn(10, 1, |i, _| i as f64);
        let y: Vec<f64> = (0..10).map(|i| if i >= 5 { 1.0 } else { 0.0 }).collect();
        let e = enumerate_basis(&x, &HalConfig::default()).unwrap();
        let cfg = HalConfig { cv_folds: 10, ..Default::default() };
        let cv = cv_select_lambda(&e.design, &y, Family::Gaussian, &cfg).unwrap();
        assert!(cv.fit.coefficients.iter().any(|&(j, _)| e.functions[j].knot == vec![5.0]) || cv.index > 0);
        let cfg = HalConfig { cv_folds: 11, ..Default::default() };
        assert!(matches!(cv_select_lambda(&e.design, &y, Family::Gaussian, &cfg), Err(HalError::Folds(_))));
    }

    #[test]
    fn noise_selects_near_null() {
        let mut rng = rng::stream(3, 0);
        let n = 200;
        let x = DMatrix::from_fn(n, 2, |_, _| rng.random::<f64>());
        let y: Vec<f64> = (0..n).map(|_| rng.random::<f64>()).collect();
        let e = enumerate_basis(&x, &HalConfig::default()).unwrap();
        let cv = cv_select_lambda(&e.design, &y, Family::Gaussian, &HalConfig::default()).unwrap();
        // the CV curve is minimized near the null end of the path
        assert!(cv.index <= 20, "index {}", cv.index);
        assert!(cv.fit.coefficients.len() <= 10);
    }

    #[test]
    fn linear_signal_is_found() {
        let mut rng = rng::stream(4, 0);
        let n = 400;
        let x = DMatrix::from_fn(n, 2, |_, _| rng.random::<f64>());
        let cfg = HalConfig::default();
        let e = enumerate_basis(&x, &cfg).unwrap();
        let target = e.functions.iter().position(|f| f.support == vec![0] && f.knot[0] > 0.4).unwrap();
        let y: Vec<f64> = (0..n).map(|i| 2.0 * e.design.column(target).value(i) + 0.1 * rng.random::<f64>()).collect();
        let cv = cv_select_lambda(&e.design, &y, Family::Gaussian, &cfg).unwrap();
        assert!(cv.fit.coefficients.iter().any(|&(j, _)| j == target));
    }

    #[test]
    fn undersmoothing_meets_criterion() {
        let mut rng = rng::stream(5, 0);
        let n = 200;
        let x = DMatrix::from_fn(n, 2, |_, _| rng.random::<f64>());
        let y: Vec<f64> =
            (0..n).map(|i| (4.0 * x[(i, 0)]).sin() + x[(i, 1)] + 0.3 * (rng.random::<f64>() - 0.5)).collect();
        let out = fit_hal(&x, &y, Family::Gaussian, &HalConfig::default()).unwrap();
        assert!(out.state.converged);
        assert!(out.state.max_score <= score_threshold(n));
        assert!(out.fit.lambda <= out.cv_fit.lambda);
        for (a, b) in out.fit.predict(&x).iter().zip(&out.fit.fitted_values) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn null_cv_fit_skips_undersmoothing() {
        let n = 60;
        let x = DMatrix::from_fn(n, 1, |i, _| i as f64);
        let y = vec![1.0; n];
        let out = fit_hal(&x, &y, Family::Gaussian, &HalConfig::default()).unwrap();
        assert!(out.state.skipped);
        assert_eq!(out.state.steps_taken, 0);
        assert_eq!(out.fit.num_nonzero(), 0);
    }

    #[test]
    fn config_validation() {
        assert!(HalConfig { undersmooth_decay: 1.0, ..Default::default() }.validate().is_err());
        assert!(HalConfig { lambda_grid_size: 1, ..Default::default() }.validate().is_err());
        assert!(HalConfig::default().validate().is_ok());
    }
}
