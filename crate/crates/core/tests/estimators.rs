//! Simulation checks of the cross-fitted and collaborative estimators.

use atebench::data_model::AnalysisDataset;
use atebench::estimators::{build_nuisances, ctmle_greedy, evaluate, BundleMode, CtmleOptions, Method, NuisanceBundle};
use atebench::folds::make_folds;
use atebench::rng::stream;
use atebench::{LearnerSpec, SuperLearnerConfig};
use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::StandardNormal;

#[test]
fn cv_iptw_tracks_iptw_under_randomization() {
    let sl = SuperLearnerConfig { library: vec![LearnerSpec::Mean], folds: 10 };
    let n = 2000;
    for r in 0..50 {
        let mut rng = stream(31, r);
        let w = DMatrix::from_fn(n, 2, |_, _| rng.random::<f64>());
        let a: Vec<f64> = (0..n).map(|_| f64::from(rng.random::<f64>() < 0.5)).collect();
        let y: Vec<f64> = (0..n).map(|i| a[i] + 2.0 * w[(i, 0)] + rng.sample::<f64, _>(StandardNormal)).collect();
        let data = AnalysisDataset::new(w, a, y, vec!["W1".into(), "W2".into()]).unwrap();
        let set = build_nuisances(&data, &sl, BundleMode::Both, &mut rng).unwrap();
        let opts = CtmleOptions::default();
        let plain = evaluate(Method::Iptw, &data, &set, &opts, &mut rng).unwrap().psi;
        let cv = evaluate(Method::CvIptw, &data, &set, &opts, &mut rng).unwrap().psi;
        assert!((plain - cv).abs() < 0.02, "replicate {r}: IPTW {plain} vs CV-IPTW {cv}");
    }
}

#[test]
fn ctmle_usually_leaves_out_an_instrument() {
    let n = 500;
    let reps = 100;
    let mut excluded = 0;
    for r in 0..reps {
        let mut rng = stream(32, r);
        // Z moves treatment strongly and has no effect on the outcome.
        let z: Vec<f64> = (0..n).map(|_| rng.random::<f64>()).collect();
        let a: Vec<f64> = z.iter().map(|&z| f64::from(rng.random::<f64>() < 0.1 + 0.8 * z)).collect();
        let y: Vec<f64> = a.iter().map(|&a| 1.0 + a + rng.sample::<f64, _>(StandardNormal)).collect();
        let arm_mean = |arm: f64| {
            let ys: Vec<f64> = (0..n).filter(|&i| a[i] == arm).map(|i| y[i]).collect();
            ys.iter().sum::<f64>() / ys.len() as f64
        };
        let (m1, m0) = (arm_mean(1.0), arm_mean(0.0));
        let qa: Vec<f64> = a.iter().map(|&a| if a == 1.0 { m1 } else { m0 }).collect();
        let bundle = NuisanceBundle::new(&vec![0.5; n], qa, vec![m1; n], vec![m0; n], false, 0.025).unwrap();
        let zm = DMatrix::from_column_slice(n, 1, &z);
        let data = AnalysisDataset::new(zm.clone(), a, y, vec!["Z".into()]).unwrap();
        let folds = make_folds(n, 5, &mut rng).unwrap();
        let est = ctmle_greedy(&data, &zm, &bundle, &folds, &CtmleOptions::default()).unwrap();
        if est.diagnostics["selected_covariates"] == 0.0 {
            excluded += 1;
        }
    }
    assert!(excluded * 2 > reps, "instrument excluded in only {excluded}/{reps} replicates");
}
