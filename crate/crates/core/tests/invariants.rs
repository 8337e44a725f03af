//! Property tests over randomly generated inputs.

use atebench::data_model::AnalysisDataset;
use atebench::estimators::{
    fluctuate, iptw_hajek, tmle, truncate_g, AteEstimate, Method, NuisanceBundle, OutcomeBounds,
};
use atebench::harness::{compute_metrics, MethodOutcome, RepResult};
use atebench::super_learner::simplex_least_squares;
use nalgebra::DMatrix;
use proptest::prelude::*;

fn data(a: &[bool], y: &[f64]) -> AnalysisDataset {
    let a: Vec<f64> = a.iter().map(|&t| f64::from(t)).collect();
    AnalysisDataset::new(DMatrix::zeros(a.len(), 0), a, y.to_vec(), vec![]).unwrap()
}

/// Treatment vector with both arms present.
fn arms(n: std::ops::Range<usize>) -> impl Strategy<Value = Vec<bool>> {
    prop::collection::vec(any::<bool>(), n).prop_map(|mut a| {
        a[0] = true;
        a[1] = false;
        a
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn truncation_is_bounded_and_idempotent(g in prop::collection::vec(0.0..=1.0f64, 1..50), delta in 0.0..0.5f64) {
        let t = truncate_g(&g, delta);
        prop_assert!(t.iter().all(|&v| v >= delta && v <= 1.0 - delta));
        prop_assert_eq!(truncate_g(&t, delta), t);
    }

    #[test]
    fn hajek_is_location_and_scale_equivariant(
        (a, y, g) in (4usize..40).prop_flat_map(|n| (
            arms(n..n + 1),
            prop::collection::vec(-10.0..10.0f64, n),
            prop::collection::vec(0.05..0.95f64, n),
        )),
        shift in -1e3..1e3f64,
        scale in 0.1..10.0f64,
    ) {
        let n = a.len();
        let b = NuisanceBundle::new(&g, vec![0.0; n], vec![0.0; n], vec![0.0; n], false, 0.0).unwrap();
        let base = iptw_hajek(&data(&a, &y), &b).unwrap().psi;
        let moved: Vec<f64> = y.iter().map(|v| scale * v + shift).collect();
        let psi = iptw_hajek(&data(&a, &moved), &b).unwrap().psi;
        prop_assert!((psi - scale * base).abs() <= 1e-9 * (1.0 + shift.abs()));
    }

    #[test]
    fn tmle_solves_its_score_equation(
        (a, y, g, q) in (3usize..60).prop_flat_map(|n| (
            arms(n..n + 1),
            prop::collection::vec(-5.0..5.0f64, n),
            prop::collection::vec(0.1..0.9f64, n),
            prop::collection::vec((-5.0..5.0f64, -5.0..5.0f64), n),
        )),
    ) {
        let d = data(&a, &y);
        let q1: Vec<f64> = q.iter().map(|p| p.0).collect();
        let q0: Vec<f64> = q.iter().map(|p| p.1).collect();
        let qa: Vec<f64> = (0..a.len()).map(|i| if a[i] { q1[i] } else { q0[i] }).collect();
        let b = NuisanceBundle::new(&g, qa, q1, q0, false, 0.0).unwrap();
        if let Ok(e) = tmle(&d, &b) {
            let f = fluctuate(&d, &b).unwrap();
            let mean_ic = e.ic.iter().sum::<f64>() / e.ic.len() as f64;
            let sd = (e.ic.iter().map(|v| (v - mean_ic).powi(2)).sum::<f64>() / (e.ic.len() - 1) as f64).sqrt();
            prop_assert!(mean_ic.abs() <= 1e-8 * sd.max(1e-300));
            for v in f.updated_qbar_1.iter().chain(&f.updated_qbar_0) {
                prop_assert!(*v > f.bounds.lo && *v < f.bounds.hi);
            }
        }
    }

    #[test]
    fn outcome_map_round_trips(y in prop::collection::vec(-1e4..1e4f64, 1..30), probe in -1e4..1e4f64) {
        let b = OutcomeBounds::from_outcome(&y);
        prop_assert!(b.width() > 0.0);
        prop_assert!(y.iter().all(|&v| b.to_unit(v) > 0.0 && b.to_unit(v) < 1.0));
        prop_assert!((b.from_unit(b.to_unit(probe)) - probe).abs() <= 1e-9 * (1.0 + probe.abs()));
    }

    #[test]
    fn simplex_weights_beat_every_vertex(
        (cols, y) in (5usize..40, 1usize..5).prop_flat_map(|(n, l)| (
            prop::collection::vec(prop::collection::vec(-3.0..3.0f64, n), l),
            prop::collection::vec(-3.0..3.0f64, n),
        )),
    ) {
        let n = y.len();
        let z = DMatrix::from_fn(n, cols.len(), |i, l| cols[l][i]);
        let w = simplex_least_squares(&z, &y);
        prop_assert!(w.iter().all(|&v| v >= 0.0));
        prop_assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        let sse = |pred: &dyn Fn(usize) -> f64| (0..n).map(|i| (y[i] - pred(i)).powi(2)).sum::<f64>();
        let combined = sse(&|i| (0..cols.len()).map(|l| w[l] * z[(i, l)]).sum());
        for l in 0..cols.len() {
            prop_assert!(combined <= sse(&|i| z[(i, l)]) + 1e-9);
        }
    }

    #[test]
    fn metrics_satisfy_the_mse_identity(
        estimates in prop::collection::vec((-3.0..3.0f64, 0.01..2.0f64), 2..80),
        truth in -1.0..1.0f64,
    ) {
        let results: Vec<RepResult> = estimates
            .iter()
            .enumerate()
            .map(|(r, &(psi, se))| RepResult {
                replicate_index: r,
                outcomes: vec![MethodOutcome {
                    method: Method::Tmle,
                    estimate: Some(AteEstimate::from_se("TMLE", psi, se)),
                    error: None,
                }],
                sl_fits: 2,
                elapsed_ms: 0.0,
            })
            .collect();
        let rows = compute_metrics("prop", &results, &[Method::Tmle], truth);
        let m = &rows[0];
        let r = estimates.len() as f64;
        prop_assert!((m.mse - (m.variance * (r - 1.0) / r + m.bias * m.bias)).abs() <= 1e-12);
        prop_assert!((0.0..=1.0).contains(&m.coverage) && (0.0..=1.0).contains(&m.coverage2));
    }
}
