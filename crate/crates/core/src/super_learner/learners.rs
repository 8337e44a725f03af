//! Candidate learners: marginal mean, GLM, L1-penalized GLM and boosted
//! stumps.

use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::SlError;
use crate::hal::{lambda_max, Design, LassoSolver, SolverOptions};
use crate::link::{bernoulli_nll, expit, Family};

/// A fitted candidate.
pub trait Predictor: fmt::Debug + Send + Sync {
    fn predict(&self, x: &DMatrix<f64>) -> Vec<f64>;
}

/// Anything that can be trained on `(x, y)` for a family.
pub trait Learner: Send + Sync {
    fn name(&self) -> String;
    fn fit(&self, x: &DMatrix<f64>, y: &[f64], family: Family) -> Result<Box<dyn Predictor>, SlError>;
}

/// Built-in learner selection, written as `mean`, `glm`, `lasso:<ratio>` or
/// `boost:<rounds>[:<learning rate>]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum LearnerSpec {
    Mean,
    Glm,
    /// Penalty at `ratio * lambda_max` on standardized columns.
    Lasso {
        ratio: f64,
    },
    Boost {
        rounds: usize,
        learning_rate: f64,
    },
}

pub const DEFAULT_BOOST_RATE: f64 = 0.1;

impl LearnerSpec {
    pub fn default_library() -> Vec<LearnerSpec> {
        vec![
            LearnerSpec::Mean,
            LearnerSpec::Glm,
            LearnerSpec::Lasso { ratio: 0.2 },
            LearnerSpec::Lasso { ratio: 0.05 },
            LearnerSpec::Lasso { ratio: 0.01 },
            LearnerSpec::Boost { rounds: 50, learning_rate: DEFAULT_BOOST_RATE },
            LearnerSpec::Boost { rounds: 200, learning_rate: DEFAULT_BOOST_RATE },
        ]
    }
}

impl fmt::Display for LearnerSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            LearnerSpec::Mean => f.write_str("mean"),
            LearnerSpec::Glm => f.write_str("glm"),
            LearnerSpec::Lasso { ratio } => write!(f, "lasso:{ratio}"),
            LearnerSpec::Boost { rounds, learning_rate } if *learning_rate == DEFAULT_BOOST_RATE => {
                write!(f, "boost:{rounds}")
            }
            LearnerSpec::Boost { rounds, learning_rate } => write!(f, "boost:{rounds}:{learning_rate}"),
        }
    }
}

impl FromStr for LearnerSpec {
    type Err = SlError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let bad = || SlError::UnknownLearner(s.to_string());
        let parts: Vec<&str> = s.trim().split(':').collect();
        match parts.as_slice() {
            ["mean"] => Ok(LearnerSpec::Mean),
            ["glm"] => Ok(LearnerSpec::Glm),
            ["lasso", r] => {
                let ratio: f64 = r.parse().map_err(|_| bad())?;
                if ratio > 0.0 && ratio <= 1.0 {
                    Ok(LearnerSpec::Lasso { ratio })
                } else {
                    Err(bad())
                }
            }
            ["boost", rounds, rest @ ..] if rest.len() <= 1 => {
                let rounds: usize = rounds.parse().map_err(|_| bad())?;
                let learning_rate = match rest {
                    [lr] => lr.parse().map_err(|_| bad())?,
                    _ => DEFAULT_BOOST_RATE,
                };
                if rounds == 0 || !(learning_rate > 0.0 && learning_rate <= 1.0) {
                    return Err(bad());
                }
                Ok(LearnerSpec::Boost { rounds, learning_rate })
            }
            _ => Err(bad()),
        }
    }
}

impl TryFrom<String> for LearnerSpec {
    type Error = SlError;
    fn try_from(s: String) -> Result<Self, Self::Error> {
        s.parse()
    }
}

impl From<LearnerSpec> for String {
    fn from(s: LearnerSpec) -> String {
        s.to_string()
    }
}

impl Learner for LearnerSpec {
    fn name(&self) -> String {
        self.to_string()
    }

    fn fit(&self, x: &DMatrix<f64>, y: &[f64], family: Family) -> Result<Box<dyn Predictor>, SlError> {
        if x.nrows() != y.len() || y.is_empty() {
            return Err(SlError::Input(format!("{} rows for {} outcomes", x.nrows(), y.len())));
        }
        match self {
            LearnerSpec::Mean => Ok(Box::new(Constant(y.iter().sum::<f64>() / y.len() as f64))),
            LearnerSpec::Glm => fit_glm(x, y, family).map(|p| Box::new(p) as Box<dyn Predictor>),
            LearnerSpec::Lasso { ratio } => fit_lasso(x, y, family, *ratio).map(|p| Box::new(p) as Box<dyn Predictor>),
            LearnerSpec::Boost { rounds, learning_rate } => {
                Ok(Box::new(fit_stumps(x, y, family, *rounds, *learning_rate)))
            }
        }
    }
}

#[derive(Debug, Clone)]
pub struct Constant(pub f64);

impl Predictor for Constant {
    fn predict(&self, x: &DMatrix<f64>) -> Vec<f64> {
        vec![self.0; x.nrows()]
    }
}

/// `family.inverse_link(intercept + x'coef)`.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearPredictor {
    pub family: Family,
    pub intercept: f64,
    pub coef: Vec<f64>,
}

impl LinearPredictor {
    pub fn eta(&self, x: &DMatrix<f64>) -> Vec<f64> {
        (0..x.nrows())
            .map(|i| self.intercept + self.coef.iter().enumerate().map(|(j, b)| b * x[(i, j)]).sum::<f64>())
            .collect()
    }
}

impl Predictor for LinearPredictor {
    fn predict(&self, x: &DMatrix<f64>) -> Vec<f64> {
        self.eta(x).into_iter().map(|e| self.family.inverse_link(e)).collect()
    }
}

fn with_intercept(x: &DMatrix<f64>) -> DMatrix<f64> {
    let mut z = DMatrix::from_element(x.nrows(), x.ncols() + 1, 1.0);
    z.view_mut((0, 1), (x.nrows(), x.ncols())).copy_from(x);
    z
}

/// Least squares with intercept; rank-deficient designs get the
/// minimum-norm solution.
pub fn ordinary_least_squares(x: &DMatrix<f64>, y: &[f64]) -> Result<LinearPredictor, SlError> {
    let z = with_intercept(x);
    let yv = DVector::from_column_slice(y);
    let svd = z.svd(true, true);
    let tol = 1e-10 * svd.singular_values.max().max(1.0);
    let beta = svd.solve(&yv, tol).map_err(|e| SlError::Numerical(e.to_string()))?;
    if beta.iter().any(|b| !b.is_finite()) {
        return Err(SlError::Numerical("non-finite least-squares solution".into()));
    }
    Ok(LinearPredictor { family: Family::Gaussian, intercept: beta[0], coef: beta.iter().skip(1).copied().collect() })
}

/// Logistic regression with intercept by Newton-Raphson with step halving.
/// `ridge` adds `(ridge / 2) |coef|^2` (intercept unpenalized) to the mean
/// negative log-likelihood, which keeps the Hessian invertible under
/// collinearity or separation.
pub fn logistic_regression(x: &DMatrix<f64>, y: &[f64], ridge: f64) -> Result<LinearPredictor, SlError> {
    let n = x.nrows();
    let k = x.ncols() + 1;
    let z = with_intercept(x);
    let ybar = y.iter().sum::<f64>() / n as f64;
    let mut beta = DVector::zeros(k);
    beta[0] = crate::link::logit(ybar.clamp(1e-6, 1.0 - 1e-6));
    let objective = |b: &DVector<f64>| {
        let eta = &z * b;
        let nll: f64 = eta.iter().zip(y).map(|(e, y)| bernoulli_nll(*y, expit(*e))).sum::<f64>() / n as f64;
        nll + 0.5 * ridge * b.iter().skip(1).map(|v| v * v).sum::<f64>()
    };
    let mut obj = objective(&beta);
    for _ in 0..100 {
        let eta = &z * &beta;
        let mut grad = DVector::zeros(k);
        let mut hess = DMatrix::zeros(k, k);
        for i in 0..n {
            let p = expit(eta[i]);
            let w = (p * (1.0 - p)).max(1e-12);
            let r = p - y[i];
            for a in 0..k {
                grad[a] += r * z[(i, a)];
                for b in a..k {
                    hess[(a, b)] += w * z[(i, a)] * z[(i, b)];
                }
            }
        }
        for a in 0..k {
            grad[a] /= n as f64;
            for b in a..k {
                hess[(a, b)] /= n as f64;
                hess[(b, a)] = hess[(a, b)];
            }
            if a > 0 {
                grad[a] += ridge * beta[a];
                hess[(a, a)] += ridge;
            }
        }
        let step = match hess.clone().cholesky() {
            Some(c) => c.solve(&grad),
            None => hess.svd(true, true).solve(&grad, 1e-12).map_err(|e| SlError::Numerical(e.to_string()))?,
        };
        let mut t = 1.0;
        let mut accepted = false;
        for _ in 0..40 {
            let cand = &beta - &step * t;
            let o = objective(&cand);
            if o.is_finite() && o <= obj + 1e-15 {
                let change = (&cand - &beta).amax();
                beta = cand;
                let gain = obj - o;
                obj = o;
                accepted = true;
                if change < 1e-10 || gain < 1e-14 {
                    return finish_logistic(beta);
                }
                break;
            }
            t *= 0.5;
        }
        if !accepted {
            break;
        }
    }
    finish_logistic(beta)
}

fn finish_logistic(beta: DVector<f64>) -> Result<LinearPredictor, SlError> {
    if beta.iter().any(|b| !b.is_finite()) {
        return Err(SlError::Numerical("non-finite logistic coefficients".into()));
    }
    Ok(LinearPredictor { family: Family::Binomial, intercept: beta[0], coef: beta.iter().skip(1).copied().collect() })
}

fn fit_glm(x: &DMatrix<f64>, y: &[f64], family: Family) -> Result<LinearPredictor, SlError> {
    match family {
        Family::Gaussian => ordinary_least_squares(x, y),
        Family::Binomial => logistic_regression(x, y, 1e-8),
    }
}

fn fit_lasso(x: &DMatrix<f64>, y: &[f64], family: Family, ratio: f64) -> Result<LinearPredictor, SlError> {
    let (n, p) = x.shape();
    let mut center = vec![0.0; p];
    let mut scale = vec![0.0; p];
    let mut standardized = DMatrix::zeros(n, p);
    for j in 0..p {
        let col = x.column(j);
        let m = col.mean();
        let sd = (col.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / n as f64).sqrt();
        center[j] = m;
        scale[j] = sd;
        if sd > 1e-12 {
            for i in 0..n {
                standardized[(i, j)] = (x[(i, j)] - m) / sd;
            }
        }
    }
    let design = Design::from_dense(&standardized);
    let lmax = lambda_max(&design, y, None);
    let mut intercept;
    let mut coef = vec![0.0; p];
    if lmax <= 0.0 || p == 0 {
        let ybar = y.iter().sum::<f64>() / n as f64;
        intercept = family_intercept(family, ybar);
    } else {
        let mut solver = LassoSolver::new(&design, y, family, None, SolverOptions::default())
            .map_err(|e| SlError::Numerical(e.to_string()))?;
        let steps = 10;
        let mut last = None;
        for k in 1..=steps {
            let lambda = lmax * ratio.powf(k as f64 / steps as f64);
            last = Some(solver.fit(lambda).map_err(|e| SlError::Numerical(e.to_string()))?);
        }
        let fit = last.expect("at least one step");
        intercept = fit.intercept;
        for &(j, b) in &fit.coefficients {
            coef[j] = b;
        }
    }
    // Back to the raw column scale.
    for j in 0..p {
        if scale[j] > 1e-12 {
            coef[j] /= scale[j];
            intercept -= coef[j] * center[j];
        } else {
            coef[j] = 0.0;
        }
    }
    Ok(LinearPredictor { family, intercept, coef })
}

fn family_intercept(family: Family, ybar: f64) -> f64 {
    match family {
        Family::Gaussian => ybar,
        Family::Binomial => crate::link::logit(ybar.clamp(1e-10, 1.0 - 1e-10)),
    }
}

/// Depth-one regression tree: `left` when `x[feature] < threshold`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Stump {
    pub feature: usize,
    pub threshold: f64,
    pub left: f64,
    pub right: f64,
}

#[derive(Debug, Clone)]
pub struct BoostedStumps {
    pub family: Family,
    pub base: f64,
    pub stumps: Vec<Stump>,
}

impl Predictor for BoostedStumps {
    fn predict(&self, x: &DMatrix<f64>) -> Vec<f64> {
        (0..x.nrows())
            .map(|i| {
                let f = self
                    .stumps
                    .iter()
                    .fold(self.base, |acc, s| acc + if x[(i, s.feature)] < s.threshold { s.left } else { s.right });
                self.family.inverse_link(f)
            })
            .collect()
    }
}

const MIN_LEAF: usize = 5;
const LEAF_RIDGE: f64 = 1.0;

/// Gradient boosting with Newton leaf values and a second-order split gain;
/// stops early once no split improves the fit.
fn fit_stumps(x: &DMatrix<f64>, y: &[f64], family: Family, rounds: usize, rate: f64) -> BoostedStumps {
    let (n, p) = x.shape();
    let ybar = y.iter().sum::<f64>() / n as f64;
    let base = family_intercept(family, ybar);
    let mut f = vec![base; n];
    let order: Vec<Vec<usize>> = (0..p)
        .map(|j| {
            let mut idx: Vec<usize> = (0..n).collect();
            idx.sort_by(|&a, &b| x[(a, j)].total_cmp(&x[(b, j)]));
            idx
        })
        .collect();
    let mut stumps = Vec::new();
    let mut g = vec![0.0; n];
    let mut h = vec![0.0; n];
    for _ in 0..rounds {
        for i in 0..n {
            match family {
                Family::Gaussian => {
                    g[i] = y[i] - f[i];
                    h[i] = 1.0;
                }
                Family::Binomial => {
                    let pr = expit(f[i]);
                    g[i] = y[i] - pr;
                    h[i] = (pr * (1.0 - pr)).max(1e-12);
                }
            }
        }
        let gt: f64 = g.iter().sum();
        let ht: f64 = h.iter().sum();
        let parent = gt * gt / (ht + LEAF_RIDGE);
        let mut best: Option<(f64, Stump)> = None;
        for (j, idx) in order.iter().enumerate() {
            let (mut gl, mut hl) = (0.0, 0.0);
            for k in 0..n.saturating_sub(1) {
                let i = idx[k];
                gl += g[i];
                hl += h[i];
                let left_count = k + 1;
                if left_count < MIN_LEAF || n - left_count < MIN_LEAF {
                    continue;
                }
                let (xa, xb) = (x[(i, j)], x[(idx[k + 1], j)]);
                if xa == xb {
                    continue;
                }
                let (gr, hr) = (gt - gl, ht - hl);
                let gain = gl * gl / (hl + LEAF_RIDGE) + gr * gr / (hr + LEAF_RIDGE) - parent;
                if gain > 1e-12 && best.as_ref().is_none_or(|(b, _)| gain > *b) {
                    let stump = Stump {
                        feature: j,
                        threshold: 0.5 * (xa + xb),
                        left: rate * gl / (hl + LEAF_RIDGE),
                        right: rate * gr / (hr + LEAF_RIDGE),
                    };
                    best = Some((gain, stump));
                }
            }
        }
        let Some((_, stump)) = best else { break };
        for (i, fi) in f.iter_mut().enumerate() {
            *fi += if x[(i, stump.feature)] < stump.threshold { stump.left } else { stump.right };
        }
        stumps.push(stump);
    }
    BoostedStumps { family, base, stumps }
}
