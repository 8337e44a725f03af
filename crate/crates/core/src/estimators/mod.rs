//! ATE estimators with influence-curve standard errors and 95% Wald
//! intervals.
//!
//! Every estimator reads a [`NuisanceBundle`] (truncated propensity scores
//! and outcome-regression predictions at the observed, treated and control
//! arms) and returns an [`AteEstimate`]. The `CV-` variants apply the same
//! formulas to a cross-fitted bundle.

mod ctmle;
mod nuisance;
mod tmle;

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data_model::AnalysisDataset;
use crate::stats::{mean, sample_sd, sample_variance};
use crate::super_learner::SlError;
use crate::Z_975;

pub use ctmle::{ctmle_greedy, CtmleOptions};
pub use nuisance::{build_nuisances, BundleMode, NuisanceSet};
pub use tmle::{fluctuate, solve_epsilon, tmle, FluctuationResult, OutcomeBounds, Q_CLIP};

/// Default propensity truncation level.
pub const G_TRUNCATION: f64 = 0.025;

#[derive(Debug, Error)]
pub enum EstimatorError {
    #[error("treatment arm {arm} has no observations")]
    DegenerateArm { arm: u8 },
    #[error("treatment arm {arm} has {size} observation(s); the variance needs at least 2")]
    VarianceUndefined { arm: u8, size: usize },
    #[error("fluctuation did not converge: {0}")]
    Fluctuation(String),
    #[error("invalid input: {0}")]
    Input(String),
    #[error("{method} needs a {needed} nuisance bundle")]
    MissingBundle { method: Method, needed: &'static str },
    #[error(transparent)]
    SuperLearner(#[from] SlError),
    #[error(transparent)]
    Folds(#[from] crate::folds::FoldError),
}

/// Nuisance predictions for one dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NuisanceBundle {
    /// `P(A = 1 | W_i)`, truncated.
    pub g: Vec<f64>,
    /// `Q(A_i, W_i)`
    pub qbar_a: Vec<f64>,
    /// `Q(1, W_i)`
    pub qbar_1: Vec<f64>,
    /// `Q(0, W_i)`
    pub qbar_0: Vec<f64>,
    pub cross_fitted: bool,
}

impl NuisanceBundle {
    /// Builds a bundle, truncating `g_raw` at `[delta, 1 - delta]`.
    pub fn new(
        g_raw: &[f64],
        qbar_a: Vec<f64>,
        qbar_1: Vec<f64>,
        qbar_0: Vec<f64>,
        cross_fitted: bool,
        delta: f64,
    ) -> Result<Self, EstimatorError> {
        let n = g_raw.len();
        if qbar_a.len() != n || qbar_1.len() != n || qbar_0.len() != n {
            return Err(EstimatorError::Input("nuisance vectors differ in length".into()));
        }
        if g_raw.iter().any(|g| !(0.0..=1.0).contains(g)) {
            return Err(EstimatorError::Input("propensity scores must lie in [0, 1]".into()));
        }
        if qbar_a.iter().chain(&qbar_1).chain(&qbar_0).any(|q| !q.is_finite()) {
            return Err(EstimatorError::Input("non-finite outcome regression".into()));
        }
        Ok(NuisanceBundle { g: truncate_g(g_raw, delta), qbar_a, qbar_1, qbar_0, cross_fitted })
    }

    pub fn len(&self) -> usize {
        self.g.len()
    }

    pub fn is_empty(&self) -> bool {
        self.g.is_empty()
    }

    fn check(&self, data: &AnalysisDataset) -> Result<(), EstimatorError> {
        if self.len() != data.n() {
            return Err(EstimatorError::Input(format!("bundle has {} rows, data {}", self.len(), data.n())));
        }
        Ok(())
    }
}

/// Componentwise clamp to `[delta, 1 - delta]`.
pub fn truncate_g(g_raw: &[f64], delta: f64) -> Vec<f64> {
    g_raw.iter().map(|g| g.clamp(delta, 1.0 - delta)).collect()
}

/// Point estimate, standard error, Wald interval and influence curve.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AteEstimate {
    pub method: String,
    pub psi: f64,
    pub se: f64,
    pub ci_lo: f64,
    pub ci_hi: f64,
    /// Empty where the estimator has no influence curve.
    #[serde(skip)]
    pub ic: Vec<f64>,
    #[serde(default)]
    pub diagnostics: BTreeMap<String, f64>,
}

impl AteEstimate {
    /// `se = SD(ic) / sqrt(n)` with the `1/(n-1)` SD.
    pub fn from_ic(method: impl Into<String>, psi: f64, ic: Vec<f64>) -> Self {
        let se = if ic.len() > 1 { sample_sd(&ic) / (ic.len() as f64).sqrt() } else { 0.0 };
        let mut e = AteEstimate::from_se(method, psi, se);
        e.ic = ic;
        e
    }

    pub fn from_se(method: impl Into<String>, psi: f64, se: f64) -> Self {
        AteEstimate {
            method: method.into(),
            psi,
            se,
            ci_lo: psi - Z_975 * se,
            ci_hi: psi + Z_975 * se,
            ic: Vec::new(),
            diagnostics: BTreeMap::new(),
        }
    }

    pub fn ci_width(&self) -> f64 {
        self.ci_hi - self.ci_lo
    }

    pub fn covers(&self, value: f64) -> bool {
        self.ci_lo <= value && value <= self.ci_hi
    }

    fn with_diagnostic(mut self, key: &str, value: f64) -> Self {
        self.diagnostics.insert(key.to_string(), value);
        self
    }

    fn renamed(mut self, method: &str) -> Self {
        self.method = method.to_string();
        self
    }
}

/// `A/g - (1-A)/(1-g)`
#[inline]
pub(crate) fn clever(a: f64, g: f64) -> f64 {
    if a == 1.0 {
        1.0 / g
    } else {
        -1.0 / (1.0 - g)
    }
}

fn arm_sizes(data: &AnalysisDataset) -> (usize, usize) {
    let n1 = data.a.iter().filter(|&&a| a == 1.0).count();
    (n1, data.n() - n1)
}

fn require_both_arms(data: &AnalysisDataset) -> Result<(), EstimatorError> {
    match arm_sizes(data) {
        (0, _) => Err(EstimatorError::DegenerateArm { arm: 1 }),
        (_, 0) => Err(EstimatorError::DegenerateArm { arm: 0 }),
        _ => Ok(()),
    }
}

/// `Y [A/g - (1-A)/(1-g)] - psi_IPTW`, the known-g influence curve.
fn iptw_ic(data: &AnalysisDataset, bundle: &NuisanceBundle, psi_iptw: f64) -> Vec<f64> {
    (0..data.n()).map(|i| data.y[i] * clever(data.a[i], bundle.g[i]) - psi_iptw).collect()
}

fn iptw_unnormalized_psi(data: &AnalysisDataset, bundle: &NuisanceBundle) -> f64 {
    mean(&(0..data.n()).map(|i| data.y[i] * clever(data.a[i], bundle.g[i])).collect::<Vec<_>>())
}

/// Horvitz-Thompson form: `(1/n) sum A Y / g - (1/n) sum (1-A) Y / (1-g)`.
pub fn iptw(data: &AnalysisDataset, bundle: &NuisanceBundle) -> Result<AteEstimate, EstimatorError> {
    bundle.check(data)?;
    require_both_arms(data)?;
    let psi = iptw_unnormalized_psi(data, bundle);
    Ok(AteEstimate::from_ic(Method::IptwUnnormalized.name(), psi, iptw_ic(data, bundle, psi)))
}

/// Hajek form: each arm's inverse weights normalized to sum to one. The
/// standard error uses the same conservative known-g curve as [`iptw`].
pub fn iptw_hajek(data: &AnalysisDataset, bundle: &NuisanceBundle) -> Result<AteEstimate, EstimatorError> {
    bundle.check(data)?;
    require_both_arms(data)?;
    let (mut s1, mut w1, mut s0, mut w0) = (0.0, 0.0, 0.0, 0.0);
    for i in 0..data.n() {
        if data.a[i] == 1.0 {
            let w = 1.0 / bundle.g[i];
            s1 += w * data.y[i];
            w1 += w;
        } else {
            let w = 1.0 / (1.0 - bundle.g[i]);
            s0 += w * data.y[i];
            w0 += w;
        }
    }
    let psi = s1 / w1 - s0 / w0;
    let ht = iptw_unnormalized_psi(data, bundle);
    let e = AteEstimate::from_ic(Method::Iptw.name(), psi, iptw_ic(data, bundle, ht));
    Ok(e.with_diagnostic("unnormalized_psi", ht))
}

/// Mean of the uncentered efficient influence curve.
pub fn aiptw(data: &AnalysisDataset, bundle: &NuisanceBundle) -> Result<AteEstimate, EstimatorError> {
    bundle.check(data)?;
    let n = data.n();
    let terms: Vec<f64> = (0..n)
        .map(|i| (data.y[i] - bundle.qbar_a[i]) * clever(data.a[i], bundle.g[i]) + bundle.qbar_1[i] - bundle.qbar_0[i])
        .collect();
    let psi = mean(&terms);
    let ic = terms.iter().map(|t| t - psi).collect();
    Ok(AteEstimate::from_ic(Method::Aiptw.name(), psi, ic))
}

/// Unadjusted contrast with the Neyman variance `S1^2/n1 + S0^2/n0`.
pub fn diff_in_means(data: &AnalysisDataset) -> Result<AteEstimate, EstimatorError> {
    let y1: Vec<f64> = (0..data.n()).filter(|&i| data.a[i] == 1.0).map(|i| data.y[i]).collect();
    let y0: Vec<f64> = (0..data.n()).filter(|&i| data.a[i] == 0.0).map(|i| data.y[i]).collect();
    for (arm, ys) in [(1u8, &y1), (0u8, &y0)] {
        if ys.len() < 2 {
            return Err(EstimatorError::VarianceUndefined { arm, size: ys.len() });
        }
    }
    let psi = mean(&y1) - mean(&y0);
    let var = sample_variance(&y1) / y1.len() as f64 + sample_variance(&y0) / y0.len() as f64;
    Ok(AteEstimate::from_se(Method::DiffInMeans.name(), psi, var.sqrt()))
}

/// Base estimators that have a cross-fitted counterpart.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BaseEstimator {
    Iptw,
    Aiptw,
    Tmle,
}

/// The base estimator applied to a cross-fitted bundle; the method name
/// gains a `CV-` prefix.
pub fn cv_variant(
    estimator: BaseEstimator,
    data: &AnalysisDataset,
    bundle: &NuisanceBundle,
) -> Result<AteEstimate, EstimatorError> {
    if !bundle.cross_fitted {
        return Err(EstimatorError::Input("cross-fitted estimators need a cross-fitted bundle".into()));
    }
    Ok(match estimator {
        BaseEstimator::Iptw => iptw_hajek(data, bundle)?.renamed(Method::CvIptw.name()),
        BaseEstimator::Aiptw => aiptw(data, bundle)?.renamed(Method::CvAiptw.name()),
        BaseEstimator::Tmle => tmle(data, bundle)?.renamed(Method::CvTmle.name()),
    })
}

/// Estimators known to the harness.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum Method {
    /// Hajek-normalized IPTW.
    Iptw,
    IptwUnnormalized,
    CvIptw,
    Aiptw,
    CvAiptw,
    Tmle,
    CvTmle,
    Ctmle,
    DiffInMeans,
}

impl Method {
    pub const ALL: [Method; 9] = [
        Method::Iptw,
        Method::IptwUnnormalized,
        Method::CvIptw,
        Method::Aiptw,
        Method::CvAiptw,
        Method::Tmle,
        Method::CvTmle,
        Method::Ctmle,
        Method::DiffInMeans,
    ];

    /// The seven estimators compared in the realistic simulations.
    pub const STANDARD: [Method; 7] =
        [Method::Iptw, Method::CvIptw, Method::Aiptw, Method::CvAiptw, Method::Tmle, Method::CvTmle, Method::Ctmle];

    pub fn name(self) -> &'static str {
        match self {
            Method::Iptw => "IPTW",
            Method::IptwUnnormalized => "IPTW-Unnormalized",
            Method::CvIptw => "CV-IPTW",
            Method::Aiptw => "A-IPTW",
            Method::CvAiptw => "CV-A-IPTW",
            Method::Tmle => "TMLE",
            Method::CvTmle => "CV-TMLE",
            Method::Ctmle => "C-TMLE",
            Method::DiffInMeans => "Diff-in-Means",
        }
    }

    pub fn needs_plain(self) -> bool {
        matches!(self, Method::Iptw | Method::IptwUnnormalized | Method::Aiptw | Method::Tmle | Method::Ctmle)
    }

    pub fn needs_cross_fitted(self) -> bool {
        matches!(self, Method::CvIptw | Method::CvAiptw | Method::CvTmle)
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Error, PartialEq)]
#[error("unknown estimator `{0}`")]
pub struct UnknownMethod(pub String);

impl FromStr for Method {
    type Err = UnknownMethod;

    /// Accepts display names and snake_case aliases, case-insensitively.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let key: String = s.trim().to_ascii_lowercase().chars().filter(|c| c.is_ascii_alphanumeric()).collect();
        Ok(match key.as_str() {
            "iptw" | "iptwhajek" => Method::Iptw,
            "iptwunnormalized" | "iptwunstabilized" => Method::IptwUnnormalized,
            "cviptw" => Method::CvIptw,
            "aiptw" => Method::Aiptw,
            "cvaiptw" => Method::CvAiptw,
            "tmle" => Method::Tmle,
            "cvtmle" => Method::CvTmle,
            "ctmle" => Method::Ctmle,
            "diffinmeans" | "dim" | "differenceinmeans" => Method::DiffInMeans,
            _ => return Err(UnknownMethod(s.to_string())),
        })
    }
}

impl TryFrom<String> for Method {
    type Error = UnknownMethod;
    fn try_from(s: String) -> Result<Self, Self::Error> {
        s.parse()
    }
}

impl From<Method> for String {
    fn from(m: Method) -> String {
        m.name().to_string()
    }
}

/// Runs one method on prebuilt nuisances. C-TMLE draws its selection folds
/// from `rng`.
pub fn evaluate(
    method: Method,
    data: &AnalysisDataset,
    nuisances: &NuisanceSet,
    ctmle_options: &CtmleOptions,
    rng: &mut crate::rng::Stream,
) -> Result<AteEstimate, EstimatorError> {
    let plain = || nuisances.plain.as_ref().ok_or(EstimatorError::MissingBundle { method, needed: "plain" });
    let cross =
        || nuisances.cross_fitted.as_ref().ok_or(EstimatorError::MissingBundle { method, needed: "cross-fitted" });
    match method {
        Method::Iptw => iptw_hajek(data, plain()?),
        Method::IptwUnnormalized => iptw(data, plain()?),
        Method::Aiptw => aiptw(data, plain()?),
        Method::Tmle => tmle(data, plain()?),
        Method::CvIptw => cv_variant(BaseEstimator::Iptw, data, cross()?),
        Method::CvAiptw => cv_variant(BaseEstimator::Aiptw, data, cross()?),
        Method::CvTmle => cv_variant(BaseEstimator::Tmle, data, cross()?),
        Method::Ctmle => {
            let folds = crate::folds::make_folds(data.n(), ctmle_options.folds, rng)?;
            ctmle_greedy(data, &data.w, plain()?, &folds, ctmle_options)
        }
        Method::DiffInMeans => diff_in_means(data),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::DMatrix;

    pub(crate) fn dataset(a: &[f64], y: &[f64]) -> AnalysisDataset {
        let n = a.len();
        AnalysisDataset::new(DMatrix::zeros(n, 0), a.to_vec(), y.to_vec(), vec![]).unwrap()
    }

    pub(crate) fn bundle(g: &[f64], qa: &[f64], q1: &[f64], q0: &[f64]) -> NuisanceBundle {
        NuisanceBundle::new(g, qa.to_vec(), q1.to_vec(), q0.to_vec(), false, 0.0).unwrap()
    }

    #[test]
    fn truncation_examples() {
        assert_eq!(truncate_g(&[0.01, 0.5, 0.99], G_TRUNCATION), vec![0.025, 0.5, 0.975]);
    }

    #[test]
    fn iptw_balanced_pair() {
        let d = dataset(&[1.0, 0.0], &[3.0, 1.0]);
        let b = bundle(&[0.5, 0.5], &[0.0; 2], &[0.0; 2], &[0.0; 2]);
        assert_eq!(iptw(&d, &b).unwrap().psi, 2.0);
        assert_eq!(iptw_hajek(&d, &b).unwrap().psi, 2.0);
    }

    #[test]
    fn iptw_hand_example() {
        let d = dataset(&[1.0, 0.0, 1.0, 0.0], &[2.0, 0.0, 4.0, 2.0]);
        let b = bundle(&[0.5, 0.5, 0.8, 0.2], &[0.0; 4], &[0.0; 4], &[0.0; 4]);
        assert!((iptw(&d, &b).unwrap().psi - 1.625).abs() < 1e-12);
        assert!((iptw_hajek(&d, &b).unwrap().psi - 2.0).abs() < 1e-12);
        let shifted = dataset(&[1.0, 0.0, 1.0, 0.0], &[12.0, 10.0, 14.0, 12.0]);
        assert!((iptw_hajek(&shifted, &b).unwrap().psi - 2.0).abs() < 1e-10);
    }

    #[test]
    fn shift_moves_plain_iptw_but_not_hajek() {
        // Here the arm weight sums are unequal (3.25 vs 3.6667).
        let g = [0.5, 0.5, 0.8, 0.4];
        let b = bundle(&g, &[0.0; 4], &[0.0; 4], &[0.0; 4]);
        let y = [2.0, 0.0, 4.0, 2.0];
        let d = dataset(&[1.0, 0.0, 1.0, 0.0], &y);
        let shifted = dataset(&[1.0, 0.0, 1.0, 0.0], &y.map(|v| v + 10.0));
        let (h0, h1) = (iptw_hajek(&d, &b).unwrap().psi, iptw_hajek(&shifted, &b).unwrap().psi);
        assert!((h0 - h1).abs() < 1e-10);
        let (p0, p1) = (iptw(&d, &b).unwrap().psi, iptw(&shifted, &b).unwrap().psi);
        assert!((p1 - p0 - 10.0 * (3.25 - (2.0 + 1.0 / 0.6)) / 4.0).abs() < 1e-10);
        assert!((p1 - p0).abs() > 0.5);
    }

    #[test]
    fn iptw_needs_both_arms() {
        let d = dataset(&[1.0, 1.0], &[1.0, 2.0]);
        let b = bundle(&[0.5, 0.5], &[0.0; 2], &[0.0; 2], &[0.0; 2]);
        assert!(matches!(iptw_hajek(&d, &b), Err(EstimatorError::DegenerateArm { arm: 0 })));
    }

    #[test]
    fn aiptw_hand_example() {
        let d = dataset(&[1.0, 0.0], &[2.0, 1.0]);
        let b = bundle(&[0.5, 0.5], &[1.0, 0.0], &[1.0, 1.0], &[0.0, 0.0]);
        let e = aiptw(&d, &b).unwrap();
        assert!((e.psi - 1.0).abs() < 1e-12);
        assert!(mean(&e.ic).abs() < 1e-12);
    }

    #[test]
    fn aiptw_reductions() {
        let d = dataset(&[1.0, 0.0, 1.0, 0.0], &[2.0, 0.0, 4.0, 2.0]);
        let g = [0.5, 0.5, 0.8, 0.2];
        let zero = bundle(&g, &[0.0; 4], &[0.0; 4], &[0.0; 4]);
        assert!((aiptw(&d, &zero).unwrap().psi - iptw(&d, &zero).unwrap().psi).abs() < 1e-12);
        let exact = bundle(&g, &[2.0, 0.0, 4.0, 2.0], &[2.0, 1.0, 4.0, 3.0], &[1.0, 0.0, 2.5, 2.0]);
        let gcomp = mean(&[1.0, 1.0, 1.5, 1.0]);
        assert!((aiptw(&d, &exact).unwrap().psi - gcomp).abs() < 1e-12);
    }

    #[test]
    fn diff_in_means_hand_example() {
        let d = dataset(&[1.0, 1.0, 0.0, 0.0], &[3.0, 1.0, 2.0, 0.0]);
        let e = diff_in_means(&d).unwrap();
        assert_eq!(e.psi, 1.0);
        assert!((e.se - 2f64.sqrt()).abs() < 1e-12);
        assert!(e.ic.is_empty());
        let c = dataset(&[1.0, 1.0, 0.0, 0.0], &[3.0, 3.0, 1.0, 1.0]);
        let e = diff_in_means(&c).unwrap();
        assert_eq!(e.se, 0.0);
        assert_eq!(e.ci_width(), 0.0);
        let small = dataset(&[1.0, 0.0, 0.0], &[1.0, 2.0, 3.0]);
        assert!(matches!(diff_in_means(&small), Err(EstimatorError::VarianceUndefined { arm: 1, size: 1 })));
    }

    #[test]
    fn ci_width_is_exact() {
        let e = AteEstimate::from_se("x", 1.0, 0.3);
        assert!((e.ci_width() - 2.0 * Z_975 * 0.3).abs() < 1e-15);
        assert!(e.covers(1.5) && !e.covers(1.6));
    }

    #[test]
    fn cv_variant_equals_base_on_same_bundle() {
        let d = dataset(&[1.0, 0.0, 1.0, 0.0, 1.0], &[2.0, 0.5, 4.0, 2.0, 1.0]);
        let mut b = bundle(
            &[0.5, 0.4, 0.8, 0.2, 0.6],
            &[1.5, 0.7, 3.0, 1.5, 1.8],
            &[1.5, 1.0, 3.0, 2.2, 1.8],
            &[1.0, 0.7, 2.5, 1.5, 1.1],
        );
        assert!(cv_variant(BaseEstimator::Aiptw, &d, &b).is_err());
        b.cross_fitted = true;
        for (base, f) in [
            (
                BaseEstimator::Iptw,
                iptw_hajek as fn(&AnalysisDataset, &NuisanceBundle) -> Result<AteEstimate, EstimatorError>,
            ),
            (BaseEstimator::Aiptw, aiptw),
            (BaseEstimator::Tmle, tmle),
        ] {
            let cv = cv_variant(base, &d, &b).unwrap();
            let plain = f(&d, &b).unwrap();
            assert_eq!(cv.psi, plain.psi);
            assert_eq!(cv.se, plain.se);
            assert!(cv.method.starts_with("CV-"));
        }
    }

    #[test]
    fn method_names_parse() {
        for m in Method::ALL {
            assert_eq!(m.name().parse::<Method>().unwrap(), m);
        }
        assert_eq!("diff_in_means".parse::<Method>().unwrap(), Method::DiffInMeans);
        assert_eq!("cv_tmle".parse::<Method>().unwrap(), Method::CvTmle);
        assert!("bogus".parse::<Method>().is_err());
        let json = serde_json::to_string(&Method::CvAiptw).unwrap();
        assert_eq!(json, "\"CV-A-IPTW\"");
    }

    #[test]
    fn estimate_json_record() {
        let e = AteEstimate::from_ic("TMLE", 0.5, vec![0.1, -0.1]);
        let v: serde_json::Value = serde_json::to_value(&e).unwrap();
        for key in ["method", "psi", "se", "ci_lo", "ci_hi", "diagnostics"] {
            assert!(v.get(key).is_some());
        }
        assert!(v.get("ic").is_none());
    }
}
