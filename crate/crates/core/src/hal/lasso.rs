//! L1-penalized GLM fitting by cyclic coordinate descent.
//!
//! Gaussian fits minimize `(1/2n) sum w_i (y_i - b0 - x_i'b)^2 + lambda |b|_1`;
//! binomial fits minimize `(1/n) sum w_i nll(y_i, expit(b0 + x_i'b)) + lambda |b|_1`
//! by iteratively reweighted quadratic approximations, each solved by the
//! same weighted coordinate descent. The penalty is on the original column
//! scale. Internally every column is weight-centered and each update is
//! scaled by the column's weighted variance, so the intercept never competes
//! with the columns; indicator columns stay sparse because the centering
//! shift is carried as a scalar.

use nalgebra::DMatrix;

use super::HalError;
use crate::link::{bernoulli_nll, expit, Family};

/// A design column. Indicator columns store the row indices where the
/// column equals one.
#[derive(Debug, Clone, PartialEq)]
pub enum Column {
    Indicator(Vec<u32>),
    Dense(Vec<f64>),
}

impl Column {
    fn wdot(&self, w: &[f64], r: &[f64]) -> f64 {
        match self {
            Column::Indicator(idx) => idx.iter().map(|&i| w[i as usize] * r[i as usize]).sum(),
            Column::Dense(x) => x.iter().zip(w).zip(r).map(|((x, w), r)| x * w * r).sum(),
        }
    }

    fn wsum(&self, w: &[f64]) -> f64 {
        match self {
            Column::Indicator(idx) => idx.iter().map(|&i| w[i as usize]).sum(),
            Column::Dense(x) => x.iter().zip(w).map(|(x, w)| x * w).sum(),
        }
    }

    fn wsumsq(&self, w: &[f64]) -> f64 {
        match self {
            Column::Indicator(_) => self.wsum(w),
            Column::Dense(x) => x.iter().zip(w).map(|(x, w)| x * x * w).sum(),
        }
    }

    /// `r += alpha * x`
    fn axpy(&self, alpha: f64, r: &mut [f64]) {
        match self {
            Column::Indicator(idx) => {
                for &i in idx {
                    r[i as usize] += alpha;
                }
            }
            Column::Dense(x) => {
                for (r, x) in r.iter_mut().zip(x) {
                    *r += alpha * x;
                }
            }
        }
    }

    pub fn value(&self, i: usize) -> f64 {
        match self {
            Column::Indicator(idx) => {
                if idx.binary_search(&(i as u32)).is_ok() {
                    1.0
                } else {
                    0.0
                }
            }
            Column::Dense(x) => x[i],
        }
    }

    pub fn to_dense(&self, n: usize) -> Vec<f64> {
        match self {
            Column::Indicator(idx) => {
                let mut v = vec![0.0; n];
                for &i in idx {
                    v[i as usize] = 1.0;
                }
                v
            }
            Column::Dense(x) => x.clone(),
        }
    }
}

/// Column-oriented design matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Design {
    n: usize,
    columns: Vec<Column>,
}

impl Design {
    pub fn new(n: usize, columns: Vec<Column>) -> Self {
        Design { n, columns }
    }

    pub fn from_dense(x: &DMatrix<f64>) -> Self {
        let columns = x.column_iter().map(|c| Column::Dense(c.iter().copied().collect())).collect();
        Design { n: x.nrows(), columns }
    }

    pub fn nrows(&self) -> usize {
        self.n
    }

    pub fn ncols(&self) -> usize {
        self.columns.len()
    }

    pub fn column(&self, j: usize) -> &Column {
        &self.columns[j]
    }

    pub fn columns(&self) -> &[Column] {
        &self.columns
    }

    /// Row subset, in the order given. `rows` must be strictly increasing.
    pub fn subset_rows(&self, rows: &[usize]) -> Design {
        let mut map = vec![u32::MAX; self.n];
        for (new, &old) in rows.iter().enumerate() {
            map[old] = new as u32;
        }
        let columns = self
            .columns
            .iter()
            .map(|c| match c {
                Column::Indicator(idx) => {
                    Column::Indicator(idx.iter().map(|&i| map[i as usize]).filter(|&i| i != u32::MAX).collect())
                }
                Column::Dense(x) => Column::Dense(rows.iter().map(|&i| x[i]).collect()),
            })
            .collect();
        Design { n: rows.len(), columns }
    }

    /// `intercept + X b` for sparse coefficients `(column, value)`.
    pub fn linear_predictor(&self, intercept: f64, coefficients: &[(usize, f64)]) -> Vec<f64> {
        let mut eta = vec![intercept; self.n];
        for &(j, b) in coefficients {
            self.columns[j].axpy(b, &mut eta);
        }
        eta
    }
}

#[derive(Debug, Clone, Copy)]
pub struct SolverOptions {
    /// Convergence threshold on the largest coordinate change, measured on the
    /// standardized scale (`|delta_j| * sd_j / sd_y`).
    pub tolerance: f64,
    /// Cap on coordinate-descent passes per penalty value.
    pub max_passes: usize,
    /// Cap on reweighting iterations per penalty value (binomial only).
    pub max_irls: usize,
}

impl Default for SolverOptions {
    fn default() -> Self {
        SolverOptions { tolerance: 1e-7, max_passes: 100_000, max_irls: 100 }
    }
}

/// Solution at one penalty value. Coefficients are on the original column
/// scale; only nonzero entries are kept, sorted by column.
#[derive(Debug, Clone, PartialEq)]
pub struct PathFit {
    pub lambda: f64,
    pub intercept: f64,
    pub coefficients: Vec<(usize, f64)>,
    pub passes: usize,
}

impl PathFit {
    pub fn l1_norm(&self) -> f64 {
        self.coefficients.iter().map(|(_, b)| b.abs()).sum()
    }

    pub fn linear_predictor(&self, design: &Design) -> Vec<f64> {
        design.linear_predictor(self.intercept, &self.coefficients)
    }

    pub fn predict(&self, design: &Design, family: Family) -> Vec<f64> {
        self.linear_predictor(design).into_iter().map(|e| family.inverse_link(e)).collect()
    }
}

fn sparse(beta: &[f64]) -> Vec<(usize, f64)> {
    beta.iter().enumerate().filter(|(_, b)| **b != 0.0).map(|(j, b)| (j, *b)).collect()
}

#[inline]
fn soft_threshold(z: f64, t: f64) -> f64 {
    if z > t {
        z - t
    } else if z < -t {
        z + t
    } else {
        0.0
    }
}

const MIN_VARIANCE: f64 = 1e-12;
/// Binomial fits stop once the deviance falls below this fraction of the
/// null deviance.
const SATURATION: f64 = 1e-3;
/// Binomial paths stop once a penalty step gains less than this fraction of
/// the null deviance.
const PATH_STALL: f64 = 1e-5;

/// Weighted least-squares lasso subproblem with working response `z`.
struct Quadratic<'a> {
    design: &'a Design,
    w: Vec<f64>,
    n: f64,
    wtotal: f64,
    xbar: Vec<f64>,
    var: Vec<f64>,
    sw: Vec<f64>,
    /// `z - X beta`
    rt: Vec<f64>,
    /// sum of `w * rt`
    s_rt: f64,
    /// residual shift: r_i = rt_i + c; also equals minus the original-scale intercept
    c: f64,
    scale: f64,
}

impl<'a> Quadratic<'a> {
    fn new(design: &'a Design, w: Vec<f64>, z: &[f64], beta: &[f64]) -> Self {
        let n = design.nrows() as f64;
        let wtotal: f64 = w.iter().sum();
        let m = design.ncols();
        let mut xbar = vec![0.0; m];
        let mut var = vec![0.0; m];
        let mut sw = vec![0.0; m];
        for (j, col) in design.columns().iter().enumerate() {
            let s = col.wsum(&w);
            let ss = col.wsumsq(&w);
            sw[j] = s;
            xbar[j] = s / wtotal;
            var[j] = ((ss - wtotal * xbar[j] * xbar[j]) / n).max(0.0);
        }
        let mut rt = z.to_vec();
        let mut k = 0.0;
        for (j, &b) in beta.iter().enumerate() {
            if b != 0.0 {
                design.column(j).axpy(-b, &mut rt);
                k += b * xbar[j];
            }
        }
        let zbar = z.iter().zip(&w).map(|(z, w)| z * w).sum::<f64>() / wtotal;
        let zvar = z.iter().zip(&w).map(|(z, w)| w * (z - zbar) * (z - zbar)).sum::<f64>() / n;
        let s_rt = rt.iter().zip(&w).map(|(r, w)| r * w).sum();
        let scale = if zvar > 0.0 { zvar.sqrt() } else { 1.0 };
        Quadratic { design, w, n, wtotal, xbar, var, sw, rt, s_rt, c: k - zbar, scale }
    }

    #[inline]
    fn gradient(&self, j: usize) -> f64 {
        let dot = self.design.column(j).wdot(&self.w, &self.rt);
        (dot + self.c * self.sw[j] - self.xbar[j] * (self.s_rt + self.c * self.wtotal)) / self.n
    }

    /// One coordinate update; returns the standardized change.
    #[inline]
    fn update(&mut self, j: usize, beta: &mut [f64], lambda: f64) -> f64 {
        let v = self.var[j];
        if v < MIN_VARIANCE {
            return 0.0;
        }
        let g = self.gradient(j);
        let new = soft_threshold(beta[j] * v + g, lambda) / v;
        let delta = new - beta[j];
        if delta == 0.0 {
            return 0.0;
        }
        beta[j] = new;
        self.design.column(j).axpy(-delta, &mut self.rt);
        self.s_rt -= delta * self.sw[j];
        self.c += delta * self.xbar[j];
        delta.abs() * v.sqrt() / self.scale
    }

    fn intercept(&self) -> f64 {
        -self.c
    }

    /// Coordinate descent over a growing candidate set until every column
    /// satisfies the KKT conditions. Returns the number of passes.
    fn solve(
        &mut self,
        beta: &mut [f64],
        lambda: f64,
        candidate: &mut [bool],
        opts: &SolverOptions,
    ) -> Result<usize, HalError> {
        let m = beta.len();
        let mut passes = 0usize;
        let mut cand: Vec<usize> = (0..m).filter(|&j| candidate[j]).collect();
        loop {
            let mut maxd: f64 = 0.0;
            for &j in &cand {
                maxd = maxd.max(self.update(j, beta, lambda));
            }
            passes += 1;
            if maxd < opts.tolerance {
                let mut violated = false;
                for j in 0..m {
                    if !candidate[j] && self.var[j] >= MIN_VARIANCE && self.gradient(j).abs() > lambda {
                        candidate[j] = true;
                        violated = true;
                    }
                }
                if !violated {
                    return Ok(passes);
                }
                cand = (0..m).filter(|&j| candidate[j]).collect();
                continue;
            }
            loop {
                let active: Vec<usize> = cand.iter().copied().filter(|&j| beta[j] != 0.0).collect();
                let mut maxd: f64 = 0.0;
                for &j in &active {
                    maxd = maxd.max(self.update(j, beta, lambda));
                }
                passes += 1;
                if passes > opts.max_passes {
                    return Err(HalError::Convergence { lambda });
                }
                if maxd < opts.tolerance {
                    break;
                }
            }
            if passes > opts.max_passes {
                return Err(HalError::Convergence { lambda });
            }
        }
    }
}

/// Largest penalty at which some coefficient becomes nonzero:
/// `max_j |(1/n) sum w_i (x_ij - xbar_j)(y_i - ybar)|`.
pub fn lambda_max(design: &Design, y: &[f64], weights: Option<&[f64]>) -> f64 {
    let w = normalized_weights(design.nrows(), weights);
    let n = design.nrows() as f64;
    let wt: f64 = w.iter().sum();
    let ybar = y.iter().zip(&w).map(|(y, w)| y * w).sum::<f64>() / wt;
    let r: Vec<f64> = y.iter().map(|v| v - ybar).collect();
    design.columns().iter().map(|c| (c.wdot(&w, &r) / n).abs()).fold(0.0, f64::max)
}

/// `size` log-spaced values from `lmax` down to `ratio * lmax`.
pub fn lambda_grid(lmax: f64, size: usize, ratio: f64) -> Vec<f64> {
    let lmax = if lmax > 0.0 { lmax } else { 1e-10 };
    if size == 1 {
        return vec![lmax];
    }
    let step = ratio.ln() / (size - 1) as f64;
    (0..size).map(|k| lmax * (step * k as f64).exp()).collect()
}

fn normalized_weights(n: usize, weights: Option<&[f64]>) -> Vec<f64> {
    match weights {
        None => vec![1.0; n],
        Some(w) => {
            let s: f64 = w.iter().sum();
            w.iter().map(|v| v * n as f64 / s).collect()
        }
    }
}

/// Warm-started solver that can be driven along any decreasing sequence of
/// penalties, including past the end of a precomputed grid.
pub struct LassoSolver<'a> {
    design: &'a Design,
    y: &'a [f64],
    family: Family,
    obs_w: Vec<f64>,
    opts: SolverOptions,
    beta: Vec<f64>,
    intercept: f64,
    prev_lambda: Option<f64>,
    /// Mean negative log-likelihood of the intercept-only model.
    null_nll: f64,
    last_nll: Option<f64>,
    saturated: bool,
}

impl<'a> LassoSolver<'a> {
    pub fn new(
        design: &'a Design,
        y: &'a [f64],
        family: Family,
        weights: Option<&[f64]>,
        opts: SolverOptions,
    ) -> Result<Self, HalError> {
        let n = design.nrows();
        if y.len() != n {
            return Err(HalError::InvalidInput(format!("y has {} entries, design {} rows", y.len(), n)));
        }
        if n == 0 {
            return Err(HalError::InvalidInput("empty design".into()));
        }
        if y.iter().any(|v| !v.is_finite()) {
            return Err(HalError::InvalidInput("non-finite outcome".into()));
        }
        if family == Family::Binomial && y.iter().any(|&v| !(0.0..=1.0).contains(&v)) {
            return Err(HalError::InvalidInput("binomial outcome outside [0, 1]".into()));
        }
        if let Some(w) = weights {
            if w.len() != n || w.iter().any(|v| !v.is_finite() || *v < 0.0) || w.iter().sum::<f64>() <= 0.0 {
                return Err(HalError::InvalidInput("invalid observation weights".into()));
            }
        }
        let obs_w = normalized_weights(n, weights);
        let wt: f64 = obs_w.iter().sum();
        let ybar = y.iter().zip(&obs_w).map(|(y, w)| y * w).sum::<f64>() / wt;
        let intercept = match family {
            Family::Gaussian => ybar,
            Family::Binomial => {
                let p = ybar.clamp(1e-10, 1.0 - 1e-10);
                (p / (1.0 - p)).ln()
            }
        };
        let null_nll = match family {
            Family::Gaussian => 0.0,
            Family::Binomial => {
                let p = expit(intercept);
                y.iter().zip(&obs_w).map(|(&y, w)| w * bernoulli_nll(y, p)).sum::<f64>() / n as f64
            }
        };
        Ok(LassoSolver {
            design,
            y,
            family,
            obs_w,
            opts,
            beta: vec![0.0; design.ncols()],
            intercept,
            prev_lambda: None,
            null_nll,
            last_nll: None,
            saturated: false,
        })
    }

    /// Continues from an existing solution, typically one at a larger penalty.
    pub fn warm_start(&mut self, fit: &PathFit) {
        self.beta.iter_mut().for_each(|b| *b = 0.0);
        for &(j, b) in &fit.coefficients {
            self.beta[j] = b;
        }
        self.intercept = fit.intercept;
        self.prev_lambda = Some(fit.lambda);
        self.last_nll = None;
        self.saturated = false;
    }

    /// True once a binomial path has stopped moving: the deviance fell
    /// below a thousandth of the null deviance, or the last penalty step
    /// reduced it by less than `1e-5` of the null deviance. Further calls to
    /// `fit` then return the current solution unchanged.
    pub fn is_saturated(&self) -> bool {
        self.saturated
    }

    pub fn fit(&mut self, lambda: f64) -> Result<PathFit, HalError> {
        if !(lambda > 0.0) {
            return Err(HalError::InvalidInput(format!("penalty must be positive, got {lambda}")));
        }
        let passes = match self.family {
            Family::Gaussian => self.fit_gaussian(lambda)?,
            Family::Binomial if self.saturated => 0,
            Family::Binomial => {
                let passes = self.fit_binomial(lambda)?;
                let eta = self.design.linear_predictor(self.intercept, &self.sparse_beta());
                let nll = self.mean_nll(&eta);
                let stalled = self.beta.iter().any(|&b| b != 0.0)
                    && self.last_nll.is_some_and(|last| last - nll < PATH_STALL * self.null_nll);
                if nll < SATURATION * self.null_nll || stalled {
                    self.saturated = true;
                }
                self.last_nll = Some(nll);
                passes
            }
        };
        self.prev_lambda = Some(lambda);
        Ok(PathFit { lambda, intercept: self.intercept, coefficients: sparse(&self.beta), passes })
    }

    /// Sequential strong rule, plus every currently active column.
    fn screen(&self, q: &Quadratic, lambda: f64) -> Vec<bool> {
        let prev = self.prev_lambda.unwrap_or(lambda);
        let cut = 2.0 * lambda - prev;
        (0..self.beta.len()).map(|j| self.beta[j] != 0.0 || q.gradient(j).abs() >= cut).collect()
    }

    fn fit_gaussian(&mut self, lambda: f64) -> Result<usize, HalError> {
        let mut q = Quadratic::new(self.design, self.obs_w.clone(), self.y, &self.beta);
        let mut cand = self.screen(&q, lambda);
        let passes = q.solve(&mut self.beta, lambda, &mut cand, &self.opts)?;
        self.intercept = q.intercept();
        Ok(passes)
    }

    fn mean_nll(&self, eta: &[f64]) -> f64 {
        let n = eta.len() as f64;
        self.y.iter().zip(eta).zip(&self.obs_w).map(|((&y, &e), w)| w * bernoulli_nll(y, expit(e))).sum::<f64>() / n
    }

    fn penalized_nll(&self, eta: &[f64], beta: &[f64], lambda: f64) -> f64 {
        let n = eta.len() as f64;
        let nll: f64 =
            self.y.iter().zip(eta).zip(&self.obs_w).map(|((&y, &e), w)| w * bernoulli_nll(y, expit(e))).sum();
        nll / n + lambda * beta.iter().map(|b| b.abs()).sum::<f64>()
    }

    fn fit_binomial(&mut self, lambda: f64) -> Result<usize, HalError> {
        let mut passes = 0;
        let mut eta = self.design.linear_predictor(self.intercept, &self.sparse_beta());
        let mut obj = self.penalized_nll(&eta, &self.beta, lambda);
        for _ in 0..self.opts.max_irls {
            let old_beta = self.beta.clone();
            let old_intercept = self.intercept;
            // Newton weights first; fall back to the 1/4 curvature bound,
            // whose quadratic majorizes the loss and so cannot increase it.
            let mut step = None;
            for majorize in [false, true] {
                let mut w = Vec::with_capacity(eta.len());
                let mut z = Vec::with_capacity(eta.len());
                for ((&e, &y), &ow) in eta.iter().zip(self.y).zip(&self.obs_w) {
                    let p = expit(e);
                    let v = if majorize { 0.25 } else { (p * (1.0 - p)).max(1e-5) };
                    w.push(ow * v);
                    z.push(e + (y - p) / v);
                }
                let mut beta = old_beta.clone();
                let mut q = Quadratic::new(self.design, w, &z, &beta);
                let mut cand = self.screen(&q, lambda);
                match q.solve(&mut beta, lambda, &mut cand, &self.opts) {
                    Ok(p) => passes += p,
                    Err(_) if !majorize => continue,
                    Err(_) => {
                        log::debug!("binomial lasso at lambda = {lambda:e}: inner solve stalled, keeping last iterate");
                        return Ok(passes);
                    }
                }
                let intercept = q.intercept();
                let new_eta = self.design.linear_predictor(intercept, &sparse(&beta));
                let new_obj = self.penalized_nll(&new_eta, &beta, lambda);
                if majorize || new_obj <= obj + 1e-13 * obj.abs() {
                    step = Some((beta, intercept, new_eta, new_obj));
                    break;
                }
            }
            let (beta, intercept, new_eta, new_obj) = step.expect("majorized step always accepted");
            if new_obj > obj {
                // no further progress possible at this tolerance
                return Ok(passes);
            }
            let gain = obj - new_obj;
            self.beta = beta;
            self.intercept = intercept;
            eta = new_eta;
            obj = new_obj;
            let change = self
                .beta
                .iter()
                .zip(&old_beta)
                .map(|(a, b)| (a - b).abs())
                .fold((self.intercept - old_intercept).abs(), f64::max);
            if change < self.opts.tolerance || gain <= 1e-12 * obj.abs() {
                return Ok(passes);
            }
        }
        // Near separation the objective flattens and the coefficients drift
        // slowly; the last iterate is kept, as path solvers customarily do.
        log::debug!("binomial lasso at lambda = {lambda:e} stopped after {} reweighting steps", self.opts.max_irls);
        Ok(passes)
    }

    fn sparse_beta(&self) -> Vec<(usize, f64)> {
        sparse(&self.beta)
    }
}

/// Fits the lasso along a strictly decreasing sequence of penalties with warm
/// starts.
pub fn fit_lasso_path(
    design: &Design,
    y: &[f64],
    family: Family,
    lambdas: &[f64],
    weights: Option<&[f64]>,
    opts: &SolverOptions,
) -> Result<Vec<PathFit>, HalError> {
    if lambdas.windows(2).any(|w| w[1] >= w[0]) {
        return Err(HalError::InvalidInput("penalties must be strictly decreasing".into()));
    }
    let mut solver = LassoSolver::new(design, y, family, weights, *opts)?;
    lambdas.iter().map(|&l| solver.fit(l)).collect()
}

/// Penalized objective of a fit, as minimized by the solver.
pub fn penalized_objective(design: &Design, y: &[f64], family: Family, fit: &PathFit) -> f64 {
    let eta = fit.linear_predictor(design);
    let n = y.len() as f64;
    let loss: f64 = match family {
        Family::Gaussian => y.iter().zip(&eta).map(|(y, e)| (y - e) * (y - e)).sum::<f64>() / (2.0 * n),
        Family::Binomial => y.iter().zip(&eta).map(|(&y, &e)| bernoulli_nll(y, expit(e))).sum::<f64>() / n,
    };
    loss + fit.lambda * fit.l1_norm()
}

/// Per-column KKT residuals of an unweighted fit: for inactive columns the
/// excess `max(0, |g_j| - lambda)`, for active columns `|g_j - lambda sign(b_j)|`,
/// where `g_j = (1/n) (x_j - xbar_j)' (y - mu)`.
pub fn kkt_residuals(design: &Design, y: &[f64], family: Family, fit: &PathFit) -> Vec<f64> {
    let n = y.len();
    let mu = fit.predict(design, family);
    let r: Vec<f64> = y.iter().zip(&mu).map(|(y, m)| y - m).collect();
    let rbar = r.iter().sum::<f64>() / n as f64;
    let ones = vec![1.0; n];
    let mut beta = vec![0.0; design.ncols()];
    for &(j, b) in &fit.coefficients {
        beta[j] = b;
    }
    design
        .columns()
        .iter()
        .enumerate()
        .map(|(j, c)| {
            let g = (c.wdot(&ones, &r) - rbar * c.wsum(&ones)) / n as f64;
            if beta[j] == 0.0 {
                (g.abs() - fit.lambda).max(0.0)
            } else {
                (g - fit.lambda * beta[j].signum()).abs()
            }
        })
        .collect()
}
