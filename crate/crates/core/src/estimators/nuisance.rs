//! Super-learner nuisance fits: the propensity `g(W) = P(A = 1 | W)` and
//! the outcome regression `Q(A, W) = E[Y | A, W]`.

use serde::{Deserialize, Serialize};

use super::{EstimatorError, NuisanceBundle, G_TRUNCATION};
use crate::data_model::AnalysisDataset;
use crate::folds::make_folds;
use crate::link::Family;
use crate::rng::Stream;
use crate::super_learner::{fit_super_learner, SuperLearnerConfig, SuperLearnerFit};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BundleMode {
    Plain,
    CrossFitted,
    /// Both bundles from the same two ensemble fits.
    Both,
}

impl BundleMode {
    /// The cheapest mode serving every listed method.
    pub fn for_methods(methods: &[super::Method]) -> Option<BundleMode> {
        let plain = methods.iter().any(|m| m.needs_plain());
        let cross = methods.iter().any(|m| m.needs_cross_fitted());
        match (plain, cross) {
            (true, true) => Some(BundleMode::Both),
            (true, false) => Some(BundleMode::Plain),
            (false, true) => Some(BundleMode::CrossFitted),
            (false, false) => None,
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct NuisanceSet {
    pub plain: Option<NuisanceBundle>,
    pub cross_fitted: Option<NuisanceBundle>,
    /// Number of ensemble fits performed.
    pub sl_fits: usize,
}

/// Fits one ensemble for `g` (binomial on `W`) and one for `Q` (gaussian on
/// `(A, W)`) over a shared fold scheme drawn from `rng`. The cross-fitted
/// bundle predicts every row, including the counterfactual rows, with the
/// fits that excluded that row's fold. Truncation is applied last.
pub fn build_nuisances(
    data: &AnalysisDataset,
    sl: &SuperLearnerConfig,
    mode: BundleMode,
    rng: &mut Stream,
) -> Result<NuisanceSet, EstimatorError> {
    sl.validate()?;
    let folds = make_folds(data.n(), sl.folds, rng)?;
    let library = sl.learners();
    let g_fit = fit_super_learner(&data.w, &data.a, &library, Family::Binomial, &folds)?;
    let x_obs = data.treatment_design();
    let q_fit = fit_super_learner(&x_obs, &data.y, &library, Family::Gaussian, &folds)?;
    let x1 = data.counterfactual_design(1.0);
    let x0 = data.counterfactual_design(0.0);

    let plain = match mode {
        BundleMode::Plain | BundleMode::Both => Some(NuisanceBundle::new(
            &g_fit.predict(&data.w),
            q_fit.predict(&x_obs),
            q_fit.predict(&x1),
            q_fit.predict(&x0),
            false,
            G_TRUNCATION,
        )?),
        BundleMode::CrossFitted => None,
    };
    let cross_fitted = match mode {
        BundleMode::CrossFitted | BundleMode::Both => Some(cross_bundle(data, &g_fit, &q_fit, &x_obs, &x1, &x0)?),
        BundleMode::Plain => None,
    };
    Ok(NuisanceSet { plain, cross_fitted, sl_fits: 2 })
}

fn cross_bundle(
    data: &AnalysisDataset,
    g_fit: &SuperLearnerFit,
    q_fit: &SuperLearnerFit,
    x_obs: &nalgebra::DMatrix<f64>,
    x1: &nalgebra::DMatrix<f64>,
    x0: &nalgebra::DMatrix<f64>,
) -> Result<NuisanceBundle, EstimatorError> {
    NuisanceBundle::new(
        &g_fit.cross_fitted_predictions(&data.w)?,
        q_fit.cross_fitted_predictions(x_obs)?,
        q_fit.cross_fitted_predictions(x1)?,
        q_fit.cross_fitted_predictions(x0)?,
        true,
        G_TRUNCATION,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;
    use crate::super_learner::LearnerSpec;
    use nalgebra::DMatrix;
    use rand::Rng;

    fn small_config() -> SuperLearnerConfig {
        SuperLearnerConfig { library: vec![LearnerSpec::Mean, LearnerSpec::Glm], folds: 5 }
    }

    #[test]
    fn shapes_and_truncation() {
        let mut rng = stream(5, 0);
        let n = 200;
        let w = DMatrix::from_fn(n, 1, |i, _| if i < 100 { 0.0 } else { 1.0 });
        // W perfectly predicts A, so the raw propensity hits the boundary.
        let a: Vec<f64> = (0..n).map(|i| if i < 100 { 0.0 } else { 1.0 }).collect();
        let y: Vec<f64> = (0..n).map(|_| rng.random::<f64>()).collect();
        let d = AnalysisDataset::new(w, a, y, vec!["w".into()]).unwrap();
        let set = build_nuisances(&d, &small_config(), BundleMode::Both, &mut rng).unwrap();
        for b in [set.plain.unwrap(), set.cross_fitted.unwrap()] {
            assert_eq!(b.len(), n);
            assert_eq!(b.qbar_1.len(), n);
            assert!(b.g.iter().all(|g| (0.025..=0.975).contains(g)));
            assert!(b.g.contains(&0.025));
        }
        assert_eq!(set.sl_fits, 2);
    }

    #[test]
    fn independent_outcome_gives_flat_regression() {
        let mut rng = stream(6, 0);
        let n = 2000;
        let w = DMatrix::from_fn(n, 2, |_, _| rng.random::<f64>());
        let a: Vec<f64> = (0..n).map(|_| if rng.random::<f64>() < 0.5 { 1.0 } else { 0.0 }).collect();
        let y: Vec<f64> = (0..n).map(|_| rng.random::<f64>()).collect();
        let ybar = crate::stats::mean(&y);
        let d = AnalysisDataset::new(w, a, y, vec!["a".into(), "b".into()]).unwrap();
        let set = build_nuisances(&d, &small_config(), BundleMode::Plain, &mut rng).unwrap();
        let b = set.plain.unwrap();
        assert!(set.cross_fitted.is_none());
        for q in b.qbar_1.iter().chain(&b.qbar_0) {
            assert!((q - ybar).abs() < 0.05);
        }
    }

    #[test]
    fn mode_for_methods() {
        use super::super::Method;
        assert_eq!(BundleMode::for_methods(&[Method::Tmle]), Some(BundleMode::Plain));
        assert_eq!(BundleMode::for_methods(&[Method::CvTmle, Method::Aiptw]), Some(BundleMode::Both));
        assert_eq!(BundleMode::for_methods(&[Method::DiffInMeans]), None);
    }
}
