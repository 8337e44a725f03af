//! Semiparametric data-generating distribution fitted to a real study.
//!
//! The outcome regression `Q(A, W)` and the propensity score `g(W)` are HAL
//! fits; covariates are resampled as whole rows from the study, treatment is
//! drawn from `g`, and the outcome is `Q(A, W)` plus Gaussian noise with the
//! plug-in residual SD. The true ATE is the mean contrast
//! `Q(1, W) - Q(0, W)` over a large resample of covariate rows.

use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data_model::{AnalysisDataset, DataError};
use crate::hal::{
    cv_select_lambda, enumerate_basis, fit_hal, undersmooth_from, HalConfig, HalError, HalFit, UndersmoothState,
};
use crate::link::{expit, Family};
use crate::rng::{self, Stream};

/// Default number of covariate draws for the true ATE.
pub const TRUE_ATE_DRAWS: usize = 50_000;

#[derive(Debug, Error)]
pub enum DgdError {
    #[error(transparent)]
    Hal(#[from] HalError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error("invalid model: {0}")]
    Invalid(String),
    #[error("malformed model document: {0}")]
    Document(String),
}

/// Treatment mechanism of the generating distribution.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PropensityModel {
    /// Binomial HAL fit on `W`.
    Hal { fit: HalFit },
    /// Treatment independent of `W`.
    Randomized { p_bar: f64 },
}

impl PropensityModel {
    pub fn is_randomized(&self) -> bool {
        matches!(self, PropensityModel::Randomized { .. })
    }

    pub fn probability_row(&self, w: &DMatrix<f64>, i: usize) -> f64 {
        match self {
            PropensityModel::Hal { fit } => expit(fit.linear_predictor_row(w, i)),
            PropensityModel::Randomized { p_bar } => *p_bar,
        }
    }

    /// `P(A = 1 | W)` for every row of `w`.
    pub fn probabilities(&self, w: &DMatrix<f64>) -> Vec<f64> {
        (0..w.nrows()).map(|i| self.probability_row(w, i)).collect()
    }
}

/// Provenance of a model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedMeta {
    /// Seed of the HAL cross-validation folds and the true-ATE stream.
    pub seed: u64,
    pub true_ate_draws: usize,
    /// Monte-Carlo standard error of `true_ate`.
    pub true_ate_mc_se: f64,
    pub source: String,
    pub version: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DgdModel {
    /// Gaussian fit on `(A, W)`, treatment in column 0.
    pub q_fit: HalFit,
    pub g_model: PropensityModel,
    pub w_pool: DMatrix<f64>,
    pub column_names: Vec<String>,
    pub residual_sd: f64,
    pub true_ate: f64,
    pub seed_meta: SeedMeta,
    /// Undersmoothing diagnostics of the fitted components, absent for
    /// hand-built models and for a randomized treatment mechanism.
    #[serde(default)]
    pub q_state: Option<UndersmoothState>,
    #[serde(default)]
    pub g_state: Option<UndersmoothState>,
}

/// Mean contrast and its Monte-Carlo standard error.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrueAte {
    pub psi: f64,
    pub mc_se: f64,
}

/// A sampled replicate.
#[derive(Debug, Clone, PartialEq)]
pub struct SimulatedDataset {
    pub data: AnalysisDataset,
    pub replicate_index: usize,
    pub seed: u64,
}

const MODEL_FORMAT: &str = "atebench.dgd_model";
const MODEL_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct ModelDocument {
    format: String,
    version: u32,
    #[serde(flatten)]
    model: DgdModel,
}

/// Fits the generating distribution to a study dataset.
pub fn fit_dgd(dataset: &AnalysisDataset, config: &HalConfig) -> Result<DgdModel, DgdError> {
    fit_dgd_with(dataset, config, TRUE_ATE_DRAWS)
}

pub fn fit_dgd_with(
    dataset: &AnalysisDataset,
    config: &HalConfig,
    true_ate_draws: usize,
) -> Result<DgdModel, DgdError> {
    config.validate()?;
    let n = dataset.n();
    let (g_model, g_state) = if dataset.p() == 0 {
        (PropensityModel::Randomized { p_bar: crate::stats::mean(&dataset.a) }, None)
    } else {
        let expansion = enumerate_basis(&dataset.w, config)?;
        let cv = cv_select_lambda(&expansion.design, &dataset.a, Family::Binomial, config)?;
        if cv.fit.coefficients.is_empty() {
            log::info!("propensity CV fit is intercept-only; treating assignment as randomized");
            (PropensityModel::Randomized { p_bar: expit(cv.fit.intercept) }, None)
        } else {
            let (fit, state) = undersmooth_from(&expansion, &dataset.a, Family::Binomial, config, &cv)?;
            (PropensityModel::Hal { fit }, Some(state))
        }
    };
    if let PropensityModel::Randomized { p_bar } = g_model {
        if !(p_bar > 0.0 && p_bar < 1.0) {
            return Err(DgdError::Invalid(format!("treatment prevalence {p_bar} leaves an arm empty")));
        }
    }
    let q = fit_hal(&dataset.treatment_design(), &dataset.y, Family::Gaussian, config)?;
    let mse = q.fit.fitted_values.iter().zip(&dataset.y).map(|(f, y)| (f - y) * (f - y)).sum::<f64>() / n as f64;
    DgdModel::new(
        q.fit,
        g_model,
        dataset.w.clone(),
        dataset.column_names.clone(),
        mse.sqrt(),
        config.seed,
        true_ate_draws,
        "fit_dgd",
    )
    .map(|mut m| {
        m.q_state = Some(q.state);
        m.g_state = g_state;
        m
    })
}

impl DgdModel {
    /// Assembles a model and caches its true ATE, drawn from the reserved
    /// stream of `seed`.
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        q_fit: HalFit,
        g_model: PropensityModel,
        w_pool: DMatrix<f64>,
        column_names: Vec<String>,
        residual_sd: f64,
        seed: u64,
        true_ate_draws: usize,
        source: &str,
    ) -> Result<Self, DgdError> {
        if w_pool.nrows() == 0 {
            return Err(DgdError::Invalid("covariate pool is empty".into()));
        }
        if column_names.len() != w_pool.ncols() {
            return Err(DgdError::Invalid("column names do not match the covariate pool".into()));
        }
        if !(residual_sd >= 0.0 && residual_sd.is_finite()) {
            return Err(DgdError::Invalid(format!("residual SD {residual_sd} must be finite and nonnegative")));
        }
        if q_fit.family != Family::Gaussian || q_fit.required_columns() > w_pool.ncols() + 1 {
            return Err(DgdError::Invalid("outcome fit must be gaussian on (A, W)".into()));
        }
        match &g_model {
            PropensityModel::Randomized { p_bar } if !(*p_bar >= 0.0 && *p_bar <= 1.0) => {
                return Err(DgdError::Invalid(format!("p_bar {p_bar} outside [0, 1]")));
            }
            PropensityModel::Hal { fit }
                if fit.family != Family::Binomial || fit.required_columns() > w_pool.ncols() =>
            {
                return Err(DgdError::Invalid("propensity fit must be binomial on W".into()));
            }
            _ => {}
        }
        if true_ate_draws == 0 {
            return Err(DgdError::Invalid("true ATE needs at least one draw".into()));
        }
        let mut model = DgdModel {
            q_fit,
            g_model,
            w_pool,
            column_names,
            residual_sd,
            true_ate: 0.0,
            seed_meta: SeedMeta {
                seed,
                true_ate_draws,
                true_ate_mc_se: 0.0,
                source: source.to_string(),
                version: env!("CARGO_PKG_VERSION").to_string(),
            },
            q_state: None,
            g_state: None,
        };
        let t = model.true_ate(true_ate_draws, &mut rng::stream(seed, rng::TRUE_ATE_STREAM));
        model.true_ate = t.psi;
        model.seed_meta.true_ate_mc_se = t.mc_se;
        Ok(model)
    }

    pub fn p(&self) -> usize {
        self.w_pool.ncols()
    }

    /// `Q(a, w)` for one covariate row.
    pub fn q_row(&self, a: f64, w: &DMatrix<f64>, i: usize) -> f64 {
        let mut row = Vec::with_capacity(w.ncols() + 1);
        row.push(a);
        row.extend(w.row(i).iter().copied());
        self.q_fit.predict_row(&row)
    }

    /// `Q(a_i, W_i)` for every row.
    pub fn q_values(&self, a: &[f64], w: &DMatrix<f64>) -> Vec<f64> {
        (0..w.nrows()).map(|i| self.q_row(a[i], w, i)).collect()
    }

    /// Mean of `Q(1, W) - Q(0, W)` over `draws` rows resampled from the
    /// covariate pool.
    pub fn true_ate(&self, draws: usize, rng: &mut Stream) -> TrueAte {
        let pool = self.w_pool.nrows();
        let mut row = vec![0.0; self.p() + 1];
        let contrasts: Vec<f64> = (0..draws)
            .map(|_| {
                let i = rng.random_range(0..pool);
                for (j, v) in self.w_pool.row(i).iter().enumerate() {
                    row[j + 1] = *v;
                }
                row[0] = 1.0;
                let q1 = self.q_fit.predict_row(&row);
                row[0] = 0.0;
                q1 - self.q_fit.predict_row(&row)
            })
            .collect();
        let psi = crate::stats::mean(&contrasts);
        let mc_se = if draws > 1 { crate::stats::sample_sd(&contrasts) / (draws as f64).sqrt() } else { 0.0 };
        TrueAte { psi, mc_se }
    }

    /// Draws `n` observations: whole covariate rows with replacement, then
    /// `A ~ Bernoulli(g(W))`, then `Y = Q(A, W) + N(0, residual_sd^2)`.
    pub fn sample(&self, n: usize, rng: &mut Stream) -> Result<AnalysisDataset, DgdError> {
        if n == 0 {
            return Err(DgdError::Invalid("sample size must be positive".into()));
        }
        let pool = self.w_pool.nrows();
        let rows: Vec<usize> = (0..n).map(|_| rng.random_range(0..pool)).collect();
        let w = self.w_pool.select_rows(&rows);
        let a: Vec<f64> = (0..n)
            .map(|i| {
                let p = self.g_model.probability_row(&w, i);
                if rng.random::<f64>() < p {
                    1.0
                } else {
                    0.0
                }
            })
            .collect();
        let y: Vec<f64> = (0..n)
            .map(|i| {
                let noise: f64 = rng.sample(StandardNormal);
                self.q_row(a[i], &w, i) + self.residual_sd * noise
            })
            .collect();
        Ok(AnalysisDataset::new(w, a, y, self.column_names.clone())?)
    }

    /// Replicate `r` under `master_seed`, reproducible in isolation.
    pub fn sample_replicate(&self, n: usize, master_seed: u64, r: usize) -> Result<SimulatedDataset, DgdError> {
        let mut stream = rng::stream(master_seed, r as u64);
        let data = self.sample(n, &mut stream)?;
        Ok(SimulatedDataset { data, replicate_index: r, seed: master_seed })
    }

    pub fn to_json(&self) -> String {
        let doc = ModelDocument { format: MODEL_FORMAT.into(), version: MODEL_VERSION, model: self.clone() };
        serde_json::to_string_pretty(&doc).expect("model serializes")
    }

    pub fn from_json(text: &str) -> Result<Self, DgdError> {
        let doc: ModelDocument = serde_json::from_str(text).map_err(|e| DgdError::Document(e.to_string()))?;
        if doc.format != MODEL_FORMAT || doc.version != MODEL_VERSION {
            return Err(DgdError::Document(format!("unsupported document {} v{}", doc.format, doc.version)));
        }
        Ok(doc.model)
    }
}

/// One line of a fit summary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitSummaryRow {
    pub model: String,
    pub undersmoothed: bool,
    pub num_coef: usize,
    pub lambda: f64,
    pub l1_norm: f64,
}

impl DgdModel {
    /// Size and penalty of each component, Q first.
    pub fn summary(&self) -> Vec<FitSummaryRow> {
        let undersmoothed = |s: &Option<UndersmoothState>| s.as_ref().is_some_and(|s| !s.skipped && s.steps_taken > 0);
        let mut rows = vec![FitSummaryRow {
            model: "Q".into(),
            undersmoothed: undersmoothed(&self.q_state),
            num_coef: self.q_fit.num_nonzero(),
            lambda: self.q_fit.lambda,
            l1_norm: self.q_fit.l1_norm,
        }];
        rows.push(match &self.g_model {
            PropensityModel::Hal { fit } => FitSummaryRow {
                model: "g".into(),
                undersmoothed: undersmoothed(&self.g_state),
                num_coef: fit.num_nonzero(),
                lambda: fit.lambda,
                l1_norm: fit.l1_norm,
            },
            PropensityModel::Randomized { .. } => {
                FitSummaryRow { model: "g".into(), undersmoothed: false, num_coef: 0, lambda: f64::NAN, l1_norm: 0.0 }
            }
        });
        rows
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::hal::Term;

    fn pool(n: usize, p: usize) -> DMatrix<f64> {
        DMatrix::from_fn(n, p, |i, j| ((i * (j + 3) + 1) % 11) as f64 / 10.0)
    }

    fn names(p: usize) -> Vec<String> {
        (0..p).map(|j| format!("w{j}")).collect()
    }

    fn empty_design(p: usize) -> DMatrix<f64> {
        DMatrix::zeros(0, p + 1)
    }

    fn q_with_contrast(contrast: f64, p: usize) -> HalFit {
        let terms = vec![
            Term { support: vec![0], knot: vec![1.0], coefficient: contrast },
            Term { support: vec![1], knot: vec![0.5], coefficient: 2.0 },
        ];
        HalFit::from_terms(Family::Gaussian, 1.0, terms, 0.0, &empty_design(p))
    }

    #[test]
    fn constant_contrast_gives_exact_true_ate() {
        let m = DgdModel::new(
            q_with_contrast(0.25, 2),
            PropensityModel::Randomized { p_bar: 0.5 },
            pool(30, 2),
            names(2),
            1.0,
            1,
            1000,
            "test",
        )
        .unwrap();
        assert_eq!(m.true_ate, 0.25);
        assert_eq!(m.seed_meta.true_ate_mc_se, 0.0);
    }

    #[test]
    fn no_treatment_term_gives_zero() {
        let terms = vec![Term { support: vec![1], knot: vec![0.5], coefficient: 2.0 }];
        let q = HalFit::from_terms(Family::Gaussian, 0.0, terms, 0.0, &empty_design(1));
        let m =
            DgdModel::new(q, PropensityModel::Randomized { p_bar: 0.5 }, pool(20, 1), names(1), 1.0, 1, 500, "test")
                .unwrap();
        assert_eq!(m.true_ate, 0.0);
    }

    #[test]
    fn degenerate_noise_and_treatment() {
        let m = DgdModel::new(
            q_with_contrast(0.7, 2),
            PropensityModel::Randomized { p_bar: 1.0 },
            pool(25, 2),
            names(2),
            0.0,
            1,
            10,
            "test",
        )
        .unwrap();
        let d = m.sample(40, &mut rng::stream(3, 0)).unwrap();
        assert!(d.a.iter().all(|&a| a == 1.0));
        for i in 0..40 {
            assert_eq!(d.y[i], m.q_row(1.0, &d.w, i));
        }
    }

    #[test]
    fn treatment_prevalence_concentrates() {
        let m = DgdModel::new(
            q_with_contrast(0.0, 1),
            PropensityModel::Randomized { p_bar: 0.3 },
            pool(10, 1),
            names(1),
            1.0,
            1,
            10,
            "test",
        )
        .unwrap();
        let d = m.sample(100_000, &mut rng::stream(11, 0)).unwrap();
        assert!((crate::stats::mean(&d.a) - 0.3).abs() < 0.005);
    }

    #[test]
    fn rows_are_copies_of_pool_rows() {
        let w = pool(15, 3);
        let m = DgdModel::new(
            q_with_contrast(0.1, 3),
            PropensityModel::Randomized { p_bar: 0.5 },
            w.clone(),
            names(3),
            0.5,
            1,
            10,
            "test",
        )
        .unwrap();
        let d = m.sample(200, &mut rng::stream(5, 0)).unwrap();
        for i in 0..200 {
            assert!((0..15).any(|k| w.row(k) == d.w.row(i)));
        }
    }

    #[test]
    fn replicate_streams_are_reproducible() {
        let m = DgdModel::new(
            q_with_contrast(0.1, 2),
            PropensityModel::Randomized { p_bar: 0.5 },
            pool(15, 2),
            names(2),
            0.5,
            1,
            10,
            "test",
        )
        .unwrap();
        let a = m.sample_replicate(50, 9, 4).unwrap();
        let b = m.sample_replicate(50, 9, 4).unwrap();
        let c = m.sample_replicate(50, 9, 5).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.data.y, c.data.y);
    }

    #[test]
    fn invalid_models_rejected() {
        let q = q_with_contrast(0.1, 2);
        let r = PropensityModel::Randomized { p_bar: 0.5 };
        assert!(DgdModel::new(q.clone(), r.clone(), DMatrix::zeros(0, 2), names(2), 1.0, 1, 10, "t").is_err());
        assert!(DgdModel::new(q.clone(), r.clone(), pool(5, 2), names(2), -1.0, 1, 10, "t").is_err());
        assert!(DgdModel::new(q, PropensityModel::Randomized { p_bar: 1.5 }, pool(5, 2), names(2), 1.0, 1, 10, "t")
            .is_err());
    }

    #[test]
    fn json_round_trip() {
        let g = HalFit::from_terms(
            Family::Binomial,
            -0.3,
            vec![Term { support: vec![0], knot: vec![0.3], coefficient: 0.1 + 0.2 }],
            0.01,
            &DMatrix::zeros(0, 2),
        );
        let m = DgdModel::new(
            q_with_contrast(0.1, 2),
            PropensityModel::Hal { fit: g },
            pool(12, 2),
            names(2),
            0.7,
            4,
            100,
            "t",
        )
        .unwrap();
        let back = DgdModel::from_json(&m.to_json()).unwrap();
        assert_eq!(back, m);
        assert!(DgdModel::from_json("{}").is_err());
    }

    #[test]
    fn coin_flip_treatment_is_randomized() {
        let mut r = rng::stream(21, 0);
        let n = 300;
        let w = DMatrix::from_fn(n, 2, |_, _| r.random::<f64>());
        let a: Vec<f64> = (0..n).map(|_| if r.random::<f64>() < 0.5 { 1.0 } else { 0.0 }).collect();
        let y: Vec<f64> = (0..n).map(|i| a[i] + w[(i, 0)] + 0.2 * r.random::<f64>()).collect();
        let d = AnalysisDataset::new(w, a.clone(), y, names(2)).unwrap();
        let m = fit_dgd_with(&d, &HalConfig::default(), 2000).unwrap();
        match m.g_model {
            PropensityModel::Randomized { p_bar } => assert!((p_bar - crate::stats::mean(&a)).abs() < 1e-6),
            other => panic!("expected randomized treatment, got {other:?}"),
        }
        assert!((m.true_ate - 1.0).abs() < 0.2);
        assert_eq!(m.summary()[1].num_coef, 0);
        assert!(!m.summary()[1].undersmoothed);
    }

    #[test]
    fn exact_fit_has_zero_residual_sd() {
        let n = 40;
        let w = DMatrix::from_fn(n, 1, |i, _| (i % 2) as f64);
        let a: Vec<f64> = (0..n).map(|i| ((i / 2) % 2) as f64).collect();
        let y: Vec<f64> = (0..n).map(|i| 3.0 * a[i] + w[(i, 0)]).collect();
        let d = AnalysisDataset::new(w, a, y, names(1)).unwrap();
        let cfg = HalConfig { lambda_min_ratio: 1e-9, ..Default::default() };
        let m = fit_dgd_with(&d, &cfg, 100).unwrap();
        assert!(m.residual_sd < 1e-3);
    }
}
