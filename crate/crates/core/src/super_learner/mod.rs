//! Stacked ensemble for nuisance regressions.
//!
//! Each candidate is fit on every V-fold training split to build an
//! out-of-fold prediction matrix, then on the full data. A meta-learner
//! combines the columns: a convex combination minimizing squared error for
//! continuous outcomes, a logistic regression on the candidate probabilities
//! for binary ones. The per-fold fits are retained so that each observation
//! can also be predicted by learners that never saw it.

mod learners;

use log::warn;
use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use crate::folds::{make_folds, FoldError, FoldScheme};
use crate::link::{bernoulli_nll, Family};
pub use learners::{
    logistic_regression, ordinary_least_squares, BoostedStumps, Constant, Learner, LearnerSpec, LinearPredictor,
    Predictor, Stump,
};

/// Binary predictions leave the ensemble inside `[P_CLIP, 1 - P_CLIP]`.
pub const P_CLIP: f64 = 1e-6;

#[derive(Debug, Error)]
pub enum SlError {
    #[error("learner library is empty")]
    EmptyLibrary,
    #[error("unknown learner `{0}`")]
    UnknownLearner(String),
    #[error("every learner failed; last error: {0}")]
    AllLearnersFailed(String),
    #[error("invalid input: {0}")]
    Input(String),
    #[error("numerical failure: {0}")]
    Numerical(String),
    #[error(transparent)]
    Folds(#[from] FoldError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SuperLearnerConfig {
    pub library: Vec<LearnerSpec>,
    pub folds: usize,
}

impl Default for SuperLearnerConfig {
    fn default() -> Self {
        SuperLearnerConfig { library: LearnerSpec::default_library(), folds: 10 }
    }
}

impl SuperLearnerConfig {
    pub fn learners(&self) -> Vec<Box<dyn Learner>> {
        self.library.iter().cloned().map(|s| Box::new(s) as Box<dyn Learner>).collect()
    }

    pub fn validate(&self) -> Result<(), SlError> {
        if self.library.is_empty() {
            return Err(SlError::EmptyLibrary);
        }
        if self.folds < 2 {
            return Err(SlError::Input(format!("need at least 2 folds, got {}", self.folds)));
        }
        Ok(())
    }
}

/// How candidate columns are combined.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MetaLearner {
    /// Nonnegative weights summing to one.
    Convex { weights: Vec<f64> },
    /// `expit(intercept + sum_l coef_l * p_l)` on candidate probabilities.
    Logistic { intercept: f64, coef: Vec<f64> },
}

impl MetaLearner {
    /// Combines one row of candidate predictions.
    pub fn combine(&self, row: &[f64]) -> f64 {
        match self {
            MetaLearner::Convex { weights } => weights.iter().zip(row).map(|(w, p)| w * p).sum(),
            MetaLearner::Logistic { intercept, coef } => {
                let eta = intercept + coef.iter().zip(row).map(|(b, p)| b * p).sum::<f64>();
                crate::link::expit(eta).clamp(P_CLIP, 1.0 - P_CLIP)
            }
        }
    }

    /// Weight per retained candidate. For the logistic combiner these are
    /// the raw coefficients.
    pub fn weights(&self) -> &[f64] {
        match self {
            MetaLearner::Convex { weights } => weights,
            MetaLearner::Logistic { coef, .. } => coef,
        }
    }
}

#[derive(Debug)]
pub struct SuperLearnerFit {
    pub family: Family,
    /// Names of the candidates that fit successfully, in library order.
    pub learner_names: Vec<String>,
    /// Library names that failed and were dropped.
    pub dropped: Vec<String>,
    pub learner_fits: Vec<Box<dyn Predictor>>,
    /// `fold_learner_fits[v][l]` was trained without fold `v`.
    pub fold_learner_fits: Vec<Vec<Box<dyn Predictor>>>,
    pub meta: MetaLearner,
    /// `n x L` out-of-fold candidate predictions.
    pub oof_matrix: DMatrix<f64>,
    pub folds: FoldScheme,
    /// Out-of-fold risk per retained candidate.
    pub candidate_risk: Vec<f64>,
}

/// Mean squared error or mean Bernoulli negative log-likelihood.
pub fn risk(family: Family, y: &[f64], pred: &[f64]) -> f64 {
    let n = y.len() as f64;
    match family {
        Family::Gaussian => y.iter().zip(pred).map(|(y, p)| (y - p) * (y - p)).sum::<f64>() / n,
        Family::Binomial => y.iter().zip(pred).map(|(y, p)| bernoulli_nll(*y, *p)).sum::<f64>() / n,
    }
}

fn finite(pred: &[f64], family: Family) -> bool {
    pred.iter().all(|p| p.is_finite() && (family == Family::Gaussian || (0.0..=1.0).contains(p)))
}

pub fn fit_super_learner(
    x: &DMatrix<f64>,
    y: &[f64],
    library: &[Box<dyn Learner>],
    family: Family,
    folds: &FoldScheme,
) -> Result<SuperLearnerFit, SlError> {
    let n = x.nrows();
    if library.is_empty() {
        return Err(SlError::EmptyLibrary);
    }
    if y.len() != n || folds.assignments.len() != n {
        return Err(SlError::Input(format!(
            "{} rows, {} outcomes, {} fold assignments",
            n,
            y.len(),
            folds.assignments.len()
        )));
    }
    if family == Family::Binomial && y.iter().any(|&v| v != 0.0 && v != 1.0) {
        return Err(SlError::Input("binary outcome must be 0/1".into()));
    }
    let splits: Vec<(Vec<usize>, Vec<usize>)> =
        (0..folds.v).map(|v| (folds.training(v), folds.validation(v))).collect();
    let subsets: Vec<(DMatrix<f64>, Vec<f64>, DMatrix<f64>)> = splits
        .iter()
        .map(|(train, valid)| (x.select_rows(train), train.iter().map(|&i| y[i]).collect(), x.select_rows(valid)))
        .collect();

    let mut names = Vec::new();
    let mut dropped = Vec::new();
    let mut full_fits = Vec::new();
    let mut fold_fits: Vec<Vec<Box<dyn Predictor>>> = (0..folds.v).map(|_| Vec::new()).collect();
    let mut columns: Vec<Vec<f64>> = Vec::new();
    let mut last_error = String::new();

    'learner: for learner in library {
        let name = learner.name();
        let mut oof = vec![0.0; n];
        let mut per_fold = Vec::with_capacity(folds.v);
        for (v, (xt, yt, xv)) in subsets.iter().enumerate() {
            let outcome = learner.fit(xt, yt, family).and_then(|fit| {
                let pred = fit.predict(xv);
                if finite(&pred, family) {
                    Ok((fit, pred))
                } else {
                    Err(SlError::Numerical("invalid predictions".into()))
                }
            });
            match outcome {
                Ok((fit, pred)) => {
                    for (&i, p) in splits[v].1.iter().zip(pred) {
                        oof[i] = p;
                    }
                    per_fold.push(fit);
                }
                Err(e) => {
                    warn!("dropping learner {name}: {e}");
                    last_error = e.to_string();
                    dropped.push(name);
                    continue 'learner;
                }
            }
        }
        let full = match learner.fit(x, y, family) {
            Ok(f) if finite(&f.predict(x), family) => f,
            Ok(_) | Err(_) => {
                warn!("dropping learner {name}: full-data fit failed");
                last_error = format!("{name}: full-data fit failed");
                dropped.push(name);
                continue;
            }
        };
        for (v, fit) in per_fold.into_iter().enumerate() {
            fold_fits[v].push(fit);
        }
        full_fits.push(full);
        columns.push(oof);
        names.push(name);
    }
    if columns.is_empty() {
        return Err(SlError::AllLearnersFailed(last_error));
    }
    let oof_matrix = DMatrix::from_fn(n, columns.len(), |i, l| columns[l][i]);
    let candidate_risk: Vec<f64> = columns.iter().map(|c| risk(family, y, c)).collect();
    let meta = match family {
        Family::Gaussian => MetaLearner::Convex { weights: simplex_least_squares(&oof_matrix, y) },
        Family::Binomial => {
            let fit = logistic_regression(&oof_matrix, y, 1e-6)?;
            MetaLearner::Logistic { intercept: fit.intercept, coef: fit.coef }
        }
    };
    Ok(SuperLearnerFit {
        family,
        learner_names: names,
        dropped,
        learner_fits: full_fits,
        fold_learner_fits: fold_fits,
        meta,
        oof_matrix,
        folds: folds.clone(),
        candidate_risk,
    })
}

impl SuperLearnerFit {
    fn combine_rows(&self, cand: &DMatrix<f64>) -> Vec<f64> {
        let mut row = vec![0.0; cand.ncols()];
        (0..cand.nrows())
            .map(|i| {
                for (l, r) in row.iter_mut().enumerate() {
                    *r = cand[(i, l)];
                }
                self.meta.combine(&row)
            })
            .collect()
    }

    /// Ensemble prediction from the full-data candidate fits.
    pub fn predict(&self, x: &DMatrix<f64>) -> Vec<f64> {
        let cols: Vec<Vec<f64>> = self.learner_fits.iter().map(|f| f.predict(x)).collect();
        let cand = DMatrix::from_fn(x.nrows(), cols.len(), |i, l| cols[l][i]);
        self.combine_rows(&cand)
    }

    /// Row `i` of `x` is predicted by the candidates trained without the
    /// fold of training observation `i`, combined with the fitted meta
    /// weights. With the training design this is the meta-combination of
    /// the out-of-fold matrix; with a counterfactual design it gives honest
    /// predictions at modified inputs.
    pub fn cross_fitted_predictions(&self, x: &DMatrix<f64>) -> Result<Vec<f64>, SlError> {
        let n = self.folds.assignments.len();
        if x.nrows() != n {
            return Err(SlError::Input(format!("expected {n} rows, got {}", x.nrows())));
        }
        let mut cand = DMatrix::zeros(n, self.learner_fits.len());
        for (v, fits) in self.fold_learner_fits.iter().enumerate() {
            let rows = self.folds.validation(v);
            if rows.is_empty() {
                continue;
            }
            let xv = x.select_rows(&rows);
            for (l, fit) in fits.iter().enumerate() {
                for (&i, p) in rows.iter().zip(fit.predict(&xv)) {
                    cand[(i, l)] = p;
                }
            }
        }
        Ok(self.combine_rows(&cand))
    }

    /// Meta-combination of the out-of-fold matrix.
    pub fn oof_predictions(&self) -> Vec<f64> {
        self.combine_rows(&self.oof_matrix)
    }

    /// Cross-validated risk of the ensemble.
    pub fn cv_risk(&self, y: &[f64]) -> f64 {
        risk(self.family, y, &self.oof_predictions())
    }
}

/// Euclidean projection onto the probability simplex.
fn project_simplex(v: &[f64]) -> Vec<f64> {
    let mut u = v.to_vec();
    u.sort_by(|a, b| b.total_cmp(a));
    let mut cum = 0.0;
    let mut theta = 0.0;
    for (k, &uk) in u.iter().enumerate() {
        cum += uk;
        let t = (cum - 1.0) / (k + 1) as f64;
        if uk - t > 0.0 {
            theta = t;
        }
    }
    v.iter().map(|x| (x - theta).max(0.0)).collect()
}

/// `argmin ||y - Z w||^2` over nonnegative `w` summing to one, by projected
/// gradient started from the best single column. Every iterate is feasible
/// and the objective never increases, so the result is never worse than the
/// best single column.
pub fn simplex_least_squares(z: &DMatrix<f64>, y: &[f64]) -> Vec<f64> {
    let (n, l) = z.shape();
    let nf = n as f64;
    let gram = z.transpose() * z / nf;
    let zy: Vec<f64> = (0..l).map(|j| (0..n).map(|i| z[(i, j)] * y[i]).sum::<f64>() / nf).collect();
    let yy = y.iter().map(|v| v * v).sum::<f64>() / nf;
    let objective = |w: &[f64]| {
        let mut q = 0.0;
        for a in 0..l {
            for b in 0..l {
                q += w[a] * gram[(a, b)] * w[b];
            }
        }
        q - 2.0 * w.iter().zip(&zy).map(|(w, c)| w * c).sum::<f64>() + yy
    };
    let mut w = vec![0.0; l];
    let best = (0..l)
        .map(|j| gram[(j, j)] - 2.0 * zy[j])
        .enumerate()
        .min_by(|a, b| a.1.total_cmp(&b.1))
        .map(|(j, _)| j)
        .unwrap_or(0);
    w[best] = 1.0;
    if l == 1 {
        return w;
    }
    let lip = gram.symmetric_eigenvalues().max().max(1e-300);
    let step = 1.0 / lip;
    let mut obj = objective(&w);
    for _ in 0..20_000 {
        let grad: Vec<f64> = (0..l).map(|a| (0..l).map(|b| gram[(a, b)] * w[b]).sum::<f64>() - zy[a]).collect();
        let cand = project_simplex(&w.iter().zip(&grad).map(|(w, g)| w - step * g).collect::<Vec<_>>());
        let o = objective(&cand);
        if !(o < obj) {
            break;
        }
        let change = cand.iter().zip(&w).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        w = cand;
        let gain = obj - o;
        obj = o;
        if change < 1e-12 || gain < 1e-16 * obj.abs().max(1e-300) {
            break;
        }
    }
    w
}
