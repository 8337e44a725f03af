//! Targeted maximum likelihood with a bounded-logistic fluctuation.
//!
//! The outcome and the initial regression are mapped to `[0, 1]`, the
//! regression is fluctuated along the clever covariate with `logit Q` as
//! offset, and the update is mapped back to the outcome scale.

use serde::{Deserialize, Serialize};

use super::{clever, AteEstimate, EstimatorError, Method, NuisanceBundle};
use crate::data_model::AnalysisDataset;
use crate::link::{expit, logit};
use crate::stats::mean;

/// Mapped regression values are clipped into `[Q_CLIP, 1 - Q_CLIP]`.
pub const Q_CLIP: f64 = 1e-4;
const PAD: f64 = 0.01;
const EPS_BOUND: f64 = 10.0;
const EPS_TOL: f64 = 1e-10;
const MAX_ITER: usize = 200;

/// Affine map between the outcome scale and `[0, 1]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OutcomeBounds {
    pub lo: f64,
    pub hi: f64,
}

impl OutcomeBounds {
    /// `[min(y) - 0.01 range, max(y) + 0.01 range]`. A constant outcome gets
    /// a padding of `0.01 max(|y|, 1)` on each side.
    pub fn from_outcome(y: &[f64]) -> Self {
        let lo = y.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = y.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let range = hi - lo;
        let pad = if range > 0.0 { PAD * range } else { PAD * lo.abs().max(1.0) };
        OutcomeBounds { lo: lo - pad, hi: hi + pad }
    }

    pub fn width(&self) -> f64 {
        self.hi - self.lo
    }

    pub fn to_unit(&self, v: f64) -> f64 {
        (v - self.lo) / self.width()
    }

    /// Maps into `[0, 1]` and clips to `[Q_CLIP, 1 - Q_CLIP]`.
    pub fn to_unit_clipped(&self, v: f64) -> f64 {
        self.to_unit(v).clamp(Q_CLIP, 1.0 - Q_CLIP)
    }

    pub fn from_unit(&self, u: f64) -> f64 {
        self.lo + self.width() * u
    }
}

/// Output of one fluctuation, with updated regressions on the outcome scale.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FluctuationResult {
    pub epsilon: f64,
    /// `H*(A_i, W_i)`
    pub clever: Vec<f64>,
    pub updated_qbar_1: Vec<f64>,
    pub updated_qbar_0: Vec<f64>,
    pub updated_qbar_a: Vec<f64>,
    pub iterations: usize,
    pub bounds: OutcomeBounds,
}

fn score(ystar: &[f64], offset: &[f64], h: &[f64], eps: f64) -> (f64, f64) {
    let mut s = 0.0;
    let mut info = 0.0;
    for ((y, o), h) in ystar.iter().zip(offset).zip(h) {
        let mu = expit(o + eps * h);
        s += h * (y - mu);
        info += h * h * mu * (1.0 - mu);
    }
    (s, info)
}

/// Root of the logistic score `sum H (y* - expit(offset + eps H))` on
/// `[-10, 10]` by Newton's method kept inside a bisection bracket. The
/// score is nonincreasing in `eps`. Returns `(eps, iterations)`.
pub fn solve_epsilon(ystar: &[f64], offset: &[f64], h: &[f64]) -> Result<(f64, usize), EstimatorError> {
    let (s0, _) = score(ystar, offset, h, 0.0);
    if s0 == 0.0 {
        return Ok((0.0, 0));
    }
    let (mut lo, mut hi) = (-EPS_BOUND, EPS_BOUND);
    let (s_lo, _) = score(ystar, offset, h, lo);
    let (s_hi, _) = score(ystar, offset, h, hi);
    if !(s_lo >= 0.0 && s_hi <= 0.0) {
        return Err(EstimatorError::Fluctuation(format!(
            "score has no root in [-{EPS_BOUND}, {EPS_BOUND}] (score({lo}) = {s_lo:.3e}, score({hi}) = {s_hi:.3e})"
        )));
    }
    let mut eps = 0.0;
    for iter in 1..=MAX_ITER {
        let (s, info) = score(ystar, offset, h, eps);
        if s == 0.0 {
            return Ok((eps, iter));
        }
        if s > 0.0 {
            lo = eps;
        } else {
            hi = eps;
        }
        let newton = if info > 0.0 { eps + s / info } else { f64::NAN };
        let next = if newton.is_finite() && newton > lo && newton < hi { newton } else { 0.5 * (lo + hi) };
        let step = (next - eps).abs();
        eps = next;
        if step < EPS_TOL || hi - lo < EPS_TOL {
            let (s, info) = score(ystar, offset, h, eps);
            if info > 0.0 {
                let polished = eps + s / info;
                if polished.is_finite() && (polished - eps).abs() < 1e3 * EPS_TOL {
                    eps = polished;
                }
            }
            return Ok((eps, iter));
        }
    }
    Err(EstimatorError::Fluctuation(format!("no convergence after {MAX_ITER} iterations (eps = {eps})")))
}

/// Unit-scale fluctuation shared with the collaborative variant.
pub(crate) struct UnitUpdate {
    pub epsilon: f64,
    pub iterations: usize,
    pub q_a: Vec<f64>,
    pub q_1: Vec<f64>,
    pub q_0: Vec<f64>,
    pub h: Vec<f64>,
}

/// Fluctuates unit-scale regressions `(q_a, q_1, q_0)` along the clever
/// covariate built from `g`.
pub(crate) fn fluctuate_unit(
    ystar: &[f64],
    a: &[f64],
    g: &[f64],
    q_a: &[f64],
    q_1: &[f64],
    q_0: &[f64],
) -> Result<UnitUpdate, EstimatorError> {
    let h: Vec<f64> = a.iter().zip(g).map(|(&a, &g)| clever(a, g)).collect();
    let offset: Vec<f64> = q_a.iter().map(|&q| logit(q)).collect();
    let (epsilon, iterations) = solve_epsilon(ystar, &offset, &h)?;
    Ok(apply_epsilon(epsilon, iterations, g, q_a, q_1, q_0, h))
}

pub(crate) fn apply_epsilon(
    epsilon: f64,
    iterations: usize,
    g: &[f64],
    q_a: &[f64],
    q_1: &[f64],
    q_0: &[f64],
    h: Vec<f64>,
) -> UnitUpdate {
    let upd = |q: f64, hv: f64| expit(logit(q) + epsilon * hv);
    UnitUpdate {
        epsilon,
        iterations,
        q_a: q_a.iter().zip(&h).map(|(&q, &hv)| upd(q, hv)).collect(),
        q_1: q_1.iter().zip(g).map(|(&q, &g)| upd(q, 1.0 / g)).collect(),
        q_0: q_0.iter().zip(g).map(|(&q, &g)| upd(q, -1.0 / (1.0 - g))).collect(),
        h,
    }
}

/// Runs the targeting step for `bundle`.
pub fn fluctuate(data: &AnalysisDataset, bundle: &NuisanceBundle) -> Result<FluctuationResult, EstimatorError> {
    bundle.check(data)?;
    let bounds = OutcomeBounds::from_outcome(&data.y);
    let ystar: Vec<f64> = data.y.iter().map(|&y| bounds.to_unit(y)).collect();
    let unit = |v: &[f64]| v.iter().map(|&q| bounds.to_unit_clipped(q)).collect::<Vec<_>>();
    let u = fluctuate_unit(
        &ystar,
        &data.a,
        &bundle.g,
        &unit(&bundle.qbar_a),
        &unit(&bundle.qbar_1),
        &unit(&bundle.qbar_0),
    )?;
    let back = |v: Vec<f64>| v.into_iter().map(|q| bounds.from_unit(q)).collect::<Vec<_>>();
    Ok(FluctuationResult {
        epsilon: u.epsilon,
        clever: u.h,
        updated_qbar_1: back(u.q_1),
        updated_qbar_0: back(u.q_0),
        updated_qbar_a: back(u.q_a),
        iterations: u.iterations,
        bounds,
    })
}

/// Plug-in estimate and influence curve from targeted regressions.
pub(crate) fn targeted_estimate(
    method: &str,
    y: &[f64],
    h: &[f64],
    q_a: &[f64],
    q_1: &[f64],
    q_0: &[f64],
) -> AteEstimate {
    let contrast: Vec<f64> = q_1.iter().zip(q_0).map(|(a, b)| a - b).collect();
    let psi = mean(&contrast);
    let ic = (0..y.len()).map(|i| (y[i] - q_a[i]) * h[i] + contrast[i] - psi).collect();
    AteEstimate::from_ic(method, psi, ic)
}

pub fn tmle(data: &AnalysisDataset, bundle: &NuisanceBundle) -> Result<AteEstimate, EstimatorError> {
    let f = fluctuate(data, bundle)?;
    let e = targeted_estimate(
        Method::Tmle.name(),
        &data.y,
        &f.clever,
        &f.updated_qbar_a,
        &f.updated_qbar_1,
        &f.updated_qbar_0,
    );
    Ok(e.with_diagnostic("epsilon", f.epsilon).with_diagnostic("iterations", f.iterations as f64))
}

#[cfg(test)]
mod tests {
    use super::super::tests::{bundle, dataset};
    use super::*;
    use crate::stats::sample_sd;

    fn fixture() -> (AnalysisDataset, NuisanceBundle) {
        let d = dataset(&[1.0, 0.0, 1.0, 0.0], &[2.0, 0.5, 3.5, 1.0]);
        let b = bundle(&[0.6, 0.3, 0.7, 0.45], &[1.5, 1.0, 2.5, 0.8], &[1.5, 1.6, 2.5, 1.9], &[0.7, 1.0, 1.4, 0.8]);
        (d, b)
    }

    /// Plain bisection on the log-likelihood derivative, written out
    /// independently of the production solver.
    fn bisection_oracle(d: &AnalysisDataset, b: &NuisanceBundle) -> f64 {
        let lo_y = d.y.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi_y = d.y.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let (lo_b, hi_b) = (lo_y - 0.01 * (hi_y - lo_y), hi_y + 0.01 * (hi_y - lo_y));
        let s = |v: f64| ((v - lo_b) / (hi_b - lo_b)).clamp(1e-4, 1.0 - 1e-4);
        let lg = |p: f64| (p / (1.0 - p)).ln();
        let ex = |x: f64| 1.0 / (1.0 + (-x).exp());
        let h: Vec<f64> = (0..4).map(|i| if d.a[i] == 1.0 { 1.0 / b.g[i] } else { -1.0 / (1.0 - b.g[i]) }).collect();
        let deriv = |e: f64| -> f64 {
            (0..4).map(|i| h[i] * ((d.y[i] - lo_b) / (hi_b - lo_b) - ex(lg(s(b.qbar_a[i])) + e * h[i]))).sum()
        };
        let (mut lo, mut hi) = (-10.0, 10.0);
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if deriv(mid) > 0.0 {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        let eps = 0.5 * (lo + hi);
        let psi: f64 = (0..4)
            .map(|i| {
                let q1 = ex(lg(s(b.qbar_1[i])) + eps / b.g[i]);
                let q0 = ex(lg(s(b.qbar_0[i])) - eps / (1.0 - b.g[i]));
                (hi_b - lo_b) * (q1 - q0)
            })
            .sum::<f64>()
            / 4.0;
        psi
    }

    #[test]
    fn matches_bisection_oracle() {
        let (d, b) = fixture();
        let e = tmle(&d, &b).unwrap();
        assert!((e.psi - bisection_oracle(&d, &b)).abs() < 1e-8, "{} vs {}", e.psi, bisection_oracle(&d, &b));
    }

    #[test]
    fn eic_mean_is_zero_after_update() {
        let (d, b) = fixture();
        let e = tmle(&d, &b).unwrap();
        assert!(mean(&e.ic).abs() <= 1e-8 * sample_sd(&e.ic));
    }

    #[test]
    fn zero_score_gives_zero_epsilon() {
        // Residuals on the unit scale are +-c with weights balancing H.
        let d = dataset(&[1.0, 1.0, 0.0, 0.0], &[0.0, 2.0, 0.0, 2.0]);
        let b = bundle(&[0.5; 4], &[1.0; 4], &[1.0; 4], &[1.0; 4]);
        let f = fluctuate(&d, &b).unwrap();
        assert!(f.epsilon.abs() < 1e-12);
        let e = tmle(&d, &b).unwrap();
        assert!(e.psi.abs() < 1e-12);
    }

    #[test]
    fn bounded_at_truncation_limits() {
        let d = dataset(&[1.0, 0.0, 1.0, 0.0, 1.0], &[10.0, -3.0, 4.0, 0.0, 7.0]);
        let b = NuisanceBundle::new(
            &[0.0, 1.0, 0.5, 0.99, 0.02],
            vec![0.0, 0.0, 1.0, 2.0, 3.0],
            vec![0.0, 1.0, 1.0, 2.0, 3.0],
            vec![1.0, 0.0, 2.0, 2.0, 0.0],
            false,
            super::super::G_TRUNCATION,
        )
        .unwrap();
        let f = fluctuate(&d, &b).unwrap();
        let contrast: Vec<f64> = f.updated_qbar_1.iter().zip(&f.updated_qbar_0).map(|(a, b)| a - b).collect();
        let psi = tmle(&d, &b).unwrap().psi;
        assert!(psi.is_finite());
        let lo = contrast.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = contrast.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        assert!(lo <= psi && psi <= hi);
        for v in f.updated_qbar_1.iter().chain(&f.updated_qbar_0) {
            assert!(*v > f.bounds.lo && *v < f.bounds.hi);
        }
    }

    #[test]
    fn root_outside_bracket_is_an_error() {
        let err = solve_epsilon(&[1.0, 1.0], &[-30.0, -30.0], &[1.0, 1.0]).unwrap_err();
        assert!(matches!(err, EstimatorError::Fluctuation(_)));
    }

    #[test]
    fn constant_outcome_bounds() {
        let b = OutcomeBounds::from_outcome(&[5.0, 5.0]);
        assert!(b.lo < 5.0 && b.hi > 5.0);
        assert!((b.from_unit(b.to_unit(5.0)) - 5.0).abs() < 1e-12);
    }
}
