//! Built-in generating distributions.
//!
//! Synthetic scenarios are ordinary [`DgdModel`]s whose outcome regression
//! and propensity are written directly as indicator-basis expansions, so
//! they flow through the same sampler, serializer and true-ATE computation
//! as a model fitted to study data.

use std::fmt;
use std::str::FromStr;

use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::dgd_sim::{DgdError, DgdModel, PropensityModel, TRUE_ATE_DRAWS};
use crate::hal::{HalFit, Term};
use crate::link::Family;
use crate::rng::{child_seed, Stream};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScenarioKind {
    FromDgd,
    RandomizedRct,
    PositivityStress,
}

impl ScenarioKind {
    pub fn name(self) -> &'static str {
        match self {
            ScenarioKind::FromDgd => "from_dgd",
            ScenarioKind::RandomizedRct => "randomized_rct",
            ScenarioKind::PositivityStress => "positivity_stress",
        }
    }

    /// The covariate that nearly separates the arms, if any.
    pub fn offending_covariate(self) -> Option<&'static str> {
        match self {
            ScenarioKind::PositivityStress => Some(POSITIVITY_COVARIATE),
            _ => None,
        }
    }
}

impl fmt::Display for ScenarioKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, thiserror::Error, PartialEq)]
#[error("unknown scenario `{0}` (expected from_dgd, randomized_rct or positivity_stress)")]
pub struct UnknownScenario(pub String);

impl FromStr for ScenarioKind {
    type Err = UnknownScenario;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().replace('-', "_").as_str() {
            "from_dgd" | "dgd" => Ok(ScenarioKind::FromDgd),
            "randomized_rct" | "rct" => Ok(ScenarioKind::RandomizedRct),
            "positivity_stress" | "positivity" => Ok(ScenarioKind::PositivityStress),
            _ => Err(UnknownScenario(s.to_string())),
        }
    }
}

/// Randomized trial: `g = p_bar`, `Q = effect * A + prognostic staircase`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RctParams {
    pub p_bar: f64,
    pub effect: f64,
    /// Height of each of the nine steps of the W1 staircase.
    pub prognostic_step: f64,
    pub residual_sd: f64,
    pub pool_size: usize,
}

impl Default for RctParams {
    fn default() -> Self {
        RctParams { p_bar: 0.5, effect: 1.0, prognostic_step: 0.3, residual_sd: 1.0, pool_size: 5000 }
    }
}

/// Near-violation of positivity driven by a covariate (`W1`) that does not
/// affect the outcome, plus a moderate confounder (`W2`) and an effect
/// modifier (`W3`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PositivityParams {
    /// Logit of `P(A = 1)` moves by this much when `W1` crosses 0.5.
    pub separation: f64,
    /// Logit shift from the confounder `W2`.
    pub confounding: f64,
    pub effect: f64,
    pub residual_sd: f64,
    pub pool_size: usize,
}

impl Default for PositivityParams {
    fn default() -> Self {
        PositivityParams { separation: 11.0, confounding: 1.0, effect: 1.0, residual_sd: 1.0, pool_size: 5000 }
    }
}

pub const POSITIVITY_COVARIATE: &str = "W1";

/// Scenario with its parameters.
#[derive(Debug, Clone)]
pub enum Scenario {
    FromDgd(Box<DgdModel>),
    RandomizedRct(RctParams),
    PositivityStress(PositivityParams),
}

impl Scenario {
    pub fn kind(&self) -> ScenarioKind {
        match self {
            Scenario::FromDgd(_) => ScenarioKind::FromDgd,
            Scenario::RandomizedRct(_) => ScenarioKind::RandomizedRct,
            Scenario::PositivityStress(_) => ScenarioKind::PositivityStress,
        }
    }
}

fn step(support: Vec<usize>, knot: Vec<f64>, coefficient: f64) -> Term {
    Term { support, knot, coefficient }
}

fn with_treatment(w: &DMatrix<f64>) -> DMatrix<f64> {
    crate::data_model::with_treatment_column(w, &vec![0.0; w.nrows()])
}

/// Builds the generating model. `rng` supplies the covariate pool and the
/// model seed; a fitted model passes through unchanged.
pub fn make_scenario(scenario: Scenario, rng: &mut Stream) -> Result<DgdModel, DgdError> {
    match scenario {
        Scenario::FromDgd(model) => Ok(*model),
        Scenario::RandomizedRct(p) => randomized_rct(&p, rng),
        Scenario::PositivityStress(p) => positivity_stress(&p, rng),
    }
}

fn check_pool(pool_size: usize, residual_sd: f64) -> Result<(), DgdError> {
    if pool_size < 2 {
        return Err(DgdError::Invalid("scenario pool needs at least 2 rows".into()));
    }
    if !(residual_sd >= 0.0 && residual_sd.is_finite()) {
        return Err(DgdError::Invalid(format!("residual SD {residual_sd} must be finite and nonnegative")));
    }
    Ok(())
}

fn randomized_rct(p: &RctParams, rng: &mut Stream) -> Result<DgdModel, DgdError> {
    check_pool(p.pool_size, p.residual_sd)?;
    if !(p.p_bar > 0.0 && p.p_bar < 1.0) {
        return Err(DgdError::Invalid(format!("p_bar {} must lie in (0, 1)", p.p_bar)));
    }
    // W1 ~ U(0, 1) is prognostic; W2 ~ N(0, 1) is noise.
    let w =
        DMatrix::from_fn(p.pool_size, 2, |_, j| if j == 0 { rng.random::<f64>() } else { rng.sample(StandardNormal) });
    let mut terms = vec![step(vec![0], vec![1.0], p.effect)];
    terms.extend((1..10).map(|k| step(vec![1], vec![k as f64 / 10.0], p.prognostic_step)));
    let q = HalFit::from_terms(Family::Gaussian, 0.0, terms, 0.0, &with_treatment(&w));
    let seed = child_seed(rng);
    DgdModel::new(
        q,
        PropensityModel::Randomized { p_bar: p.p_bar },
        w,
        vec!["W1".into(), "W2".into()],
        p.residual_sd,
        seed,
        TRUE_ATE_DRAWS,
        ScenarioKind::RandomizedRct.name(),
    )
}

fn positivity_stress(p: &PositivityParams, rng: &mut Stream) -> Result<DgdModel, DgdError> {
    check_pool(p.pool_size, p.residual_sd)?;
    // W1 ~ U(0, 1) drives treatment only; W2 ~ N(0, 1) confounds;
    // W3 ~ U(0, 1) modifies the effect.
    let w = DMatrix::from_fn(p.pool_size, 3, |_, j| match j {
        1 => rng.sample(StandardNormal),
        _ => rng.random::<f64>(),
    });
    let half = p.separation / 2.0;
    let g_terms = vec![step(vec![0], vec![0.5], p.separation), step(vec![1], vec![0.0], p.confounding)];
    let g = HalFit::from_terms(Family::Binomial, -half - p.confounding / 2.0, g_terms, 0.0, &w);
    let q_terms = vec![
        step(vec![0], vec![1.0], p.effect),
        step(vec![2], vec![-1.0], 0.5),
        step(vec![2], vec![0.0], 1.0),
        step(vec![2], vec![1.0], 0.5),
        step(vec![3], vec![0.5], 0.5),
        step(vec![0, 3], vec![1.0, 0.5], 0.5),
        step(vec![0, 2], vec![1.0, 0.0], -0.5),
    ];
    let q = HalFit::from_terms(Family::Gaussian, 0.0, q_terms, 0.0, &with_treatment(&w));
    let seed = child_seed(rng);
    DgdModel::new(
        q,
        PropensityModel::Hal { fit: g },
        w,
        vec![POSITIVITY_COVARIATE.into(), "W2".into(), "W3".into()],
        p.residual_sd,
        seed,
        TRUE_ATE_DRAWS,
        ScenarioKind::PositivityStress.name(),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;
    use crate::stats::{mean, sample_variance};

    #[test]
    fn rct_is_randomized_with_known_effect() {
        let m = make_scenario(Scenario::RandomizedRct(RctParams::default()), &mut stream(1, 0)).unwrap();
        assert!(m.g_model.is_randomized());
        assert!((m.true_ate - 1.0).abs() < 1e-12);
        // Prognostic share of the control-arm outcome variance.
        let q0: Vec<f64> = (0..m.w_pool.nrows()).map(|i| m.q_row(0.0, &m.w_pool, i)).collect();
        let v = sample_variance(&q0);
        assert!(v / (v + m.residual_sd.powi(2)) >= 0.3);
    }

    #[test]
    fn positivity_has_extreme_propensities() {
        let m = make_scenario(Scenario::PositivityStress(PositivityParams::default()), &mut stream(2, 0)).unwrap();
        let mut rng = stream(2, 1);
        let d = m.sample(10_000, &mut rng).unwrap();
        let g = m.g_model.probabilities(&d.w);
        let outside = g.iter().filter(|&&g| !(0.025..=0.975).contains(&g)).count();
        assert!(outside as f64 >= 0.1 * 10_000.0, "{outside}");
        let high: Vec<f64> = (0..d.n()).filter(|&i| d.w[(i, 0)] >= 0.5).map(|i| g[i]).collect();
        assert!(high.iter().all(|&g| g >= 0.99));
        // W1 does not enter the outcome regression.
        assert!(m.q_fit.terms.iter().all(|t| !t.support.contains(&1)));
        assert!(mean(&d.a) > 0.2 && mean(&d.a) < 0.8);
    }

    #[test]
    fn from_dgd_passes_through() {
        let m = make_scenario(Scenario::RandomizedRct(RctParams::default()), &mut stream(3, 0)).unwrap();
        let same = make_scenario(Scenario::FromDgd(Box::new(m.clone())), &mut stream(4, 0)).unwrap();
        assert_eq!(m, same);
    }

    #[test]
    fn kinds_parse() {
        for k in [ScenarioKind::FromDgd, ScenarioKind::RandomizedRct, ScenarioKind::PositivityStress] {
            assert_eq!(k.name().parse::<ScenarioKind>().unwrap(), k);
        }
        assert!("nope".parse::<ScenarioKind>().is_err());
    }
}
