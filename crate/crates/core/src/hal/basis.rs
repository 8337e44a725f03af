//! Zero-order HAL basis: tensor products of indicators `I(x_s >= knot)`.

use std::collections::HashMap;
use std::hash::{Hash, Hasher};

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use super::lasso::{Column, Design};
use super::{HalConfig, HalError};

/// `phi(x) = prod_{k in support} I(x_k >= knot_k)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BasisFunction {
    pub support: Vec<usize>,
    pub knot: Vec<f64>,
}

impl BasisFunction {
    pub fn new(support: Vec<usize>, knot: Vec<f64>) -> Self {
        debug_assert_eq!(support.len(), knot.len());
        debug_assert!(support.windows(2).all(|w| w[0] < w[1]));
        BasisFunction { support, knot }
    }

    pub fn degree(&self) -> usize {
        self.support.len()
    }

    #[inline]
    pub fn evaluate(&self, x: &[f64]) -> f64 {
        evaluate_basis(self, x)
    }

    /// Evaluates on row `i` of a matrix.
    #[inline]
    pub fn evaluate_row(&self, x: &DMatrix<f64>, i: usize) -> f64 {
        if self.support.iter().zip(&self.knot).all(|(&k, &t)| x[(i, k)] >= t) {
            1.0
        } else {
            0.0
        }
    }
}

/// 1 iff `x_k >= knot_k` for every `k` in the support (inclusive).
#[inline]
pub fn evaluate_basis(f: &BasisFunction, x: &[f64]) -> f64 {
    if f.support.iter().zip(&f.knot).all(|(&k, &t)| x[k] >= t) {
        1.0
    } else {
        0.0
    }
}

/// Deduplicated basis functions and their training design.
#[derive(Debug, Clone)]
pub struct BasisExpansion {
    pub functions: Vec<BasisFunction>,
    pub design: Design,
}

impl BasisExpansion {
    pub fn len(&self) -> usize {
        self.functions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.functions.is_empty()
    }
}

/// Equal-mass knot reduction of one column: values are floored to at most
/// `cap` cut points taken at the `k/cap` empirical quantiles.
fn bin_column(values: &[f64], cap: usize) -> Vec<f64> {
    let mut sorted: Vec<f64> = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let mut unique = sorted.clone();
    unique.dedup();
    if unique.len() <= cap {
        return values.to_vec();
    }
    let n = sorted.len();
    let mut cuts: Vec<f64> = (0..cap).map(|k| sorted[k * n / cap]).collect();
    cuts.dedup();
    values
        .iter()
        .map(|&v| {
            let pos = cuts.partition_point(|&c| c <= v);
            cuts[pos.saturating_sub(1)]
        })
        .collect()
}

fn combinations(p: usize, d: usize) -> Vec<Vec<usize>> {
    fn rec(start: usize, p: usize, d: usize, cur: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
        if cur.len() == d {
            out.push(cur.clone());
            return;
        }
        for j in start..p {
            cur.push(j);
            rec(j + 1, p, d, cur, out);
            cur.pop();
        }
    }
    let mut out = Vec::new();
    rec(0, p, d, &mut Vec::with_capacity(d), &mut out);
    out
}

fn fingerprint(idx: &[u32]) -> u64 {
    let mut h = std::collections::hash_map::DefaultHasher::new();
    idx.hash(&mut h);
    h.finish()
}

/// Enumerates indicator basis functions with knots at observed (binned)
/// values for every support set up to the configured interaction degree.
/// Enumeration order is degree, then support, then knot, all ascending, and
/// a column duplicating an earlier one is dropped.
pub fn enumerate_basis(x: &DMatrix<f64>, config: &HalConfig) -> Result<BasisExpansion, HalError> {
    let (n, p) = x.shape();
    if n < 2 {
        return Err(HalError::InvalidInput("basis enumeration needs at least 2 rows".into()));
    }
    if p == 0 {
        return Ok(BasisExpansion { functions: Vec::new(), design: Design::new(n, Vec::new()) });
    }
    let max_degree = config.max_degree(p).min(p);
    let columns_raw: Vec<Vec<f64>> = x.column_iter().map(|c| c.iter().copied().collect()).collect();

    let mut functions = Vec::new();
    let mut columns: Vec<Column> = Vec::new();
    let mut seen: HashMap<u64, Vec<usize>> = HashMap::new();

    for d in 1..=max_degree {
        let cap = config.knot_cap(n, d);
        let binned: Vec<Vec<f64>> = columns_raw.iter().map(|c| bin_column(c, cap)).collect();
        for support in combinations(p, d) {
            let mut knots: Vec<Vec<f64>> = (0..n).map(|i| support.iter().map(|&k| binned[k][i]).collect()).collect();
            knots.sort_by(|a, b| {
                a.iter().zip(b).map(|(u, v)| u.total_cmp(v)).find(|o| o.is_ne()).unwrap_or(std::cmp::Ordering::Equal)
            });
            knots.dedup();
            for knot in knots {
                let idx: Vec<u32> = (0..n)
                    .filter(|&i| support.iter().zip(&knot).all(|(&k, &t)| columns_raw[k][i] >= t))
                    .map(|i| i as u32)
                    .collect();
                if idx.is_empty() {
                    continue;
                }
                let fp = fingerprint(&idx);
                let bucket = seen.entry(fp).or_default();
                if bucket.iter().any(|&j| matches!(&columns[j], Column::Indicator(c) if *c == idx)) {
                    continue;
                }
                bucket.push(columns.len());
                columns.push(Column::Indicator(idx));
                functions.push(BasisFunction::new(support.clone(), knot));
                if columns.len() > config.max_columns {
                    return Err(HalError::Capacity { cap: config.max_columns });
                }
            }
        }
    }
    Ok(BasisExpansion { functions, design: Design::new(n, columns) })
}

/// Training design for an existing list of functions evaluated on `x`.
pub fn design_for(functions: &[BasisFunction], x: &DMatrix<f64>) -> Design {
    let n = x.nrows();
    let columns = functions
        .iter()
        .map(|f| Column::Indicator((0..n).filter(|&i| f.evaluate_row(x, i) > 0.0).map(|i| i as u32).collect()))
        .collect();
    Design::new(n, columns)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn evaluate_examples() {
        assert_eq!(evaluate_basis(&BasisFunction::new(vec![0], vec![0.2]), &[0.3]), 1.0);
        assert_eq!(evaluate_basis(&BasisFunction::new(vec![0, 1], vec![0.2, 0.7]), &[0.3, 0.5]), 0.0);
        assert_eq!(evaluate_basis(&BasisFunction::new(vec![0], vec![0.3]), &[0.3]), 1.0);
    }

    #[test]
    fn single_covariate_dedup() {
        let x = DMatrix::from_column_slice(3, 1, &[0.2, 0.5, 0.5]);
        let e = enumerate_basis(&x, &HalConfig::default()).unwrap();
        let knots: Vec<f64> = e.functions.iter().map(|f| f.knot[0]).collect();
        assert_eq!(knots, vec![0.2, 0.5]);
    }

    #[test]
    fn two_binary_covariates() {
        // Enumerating by hand: knots (0), (1) on each margin and all four
        // pairs; the design columns reduce to the constant column plus
        // I(x1>=1), I(x2>=1) and their product.
        let x = DMatrix::from_row_slice(4, 2, &[0., 0., 1., 0., 0., 1., 1., 1.]);
        let e = enumerate_basis(&x, &HalConfig::default()).unwrap();
        let nontrivial: Vec<&BasisFunction> = e
            .functions
            .iter()
            .zip(e.design.columns())
            .filter(|(_, c)| !matches!(c, Column::Indicator(i) if i.len() == 4))
            .map(|(f, _)| f)
            .collect();
        assert_eq!(nontrivial.len(), 3);
        assert_eq!(nontrivial[0], &BasisFunction::new(vec![0], vec![1.0]));
        assert_eq!(nontrivial[1], &BasisFunction::new(vec![1], vec![1.0]));
        assert_eq!(nontrivial[2], &BasisFunction::new(vec![0, 1], vec![1.0, 1.0]));
        assert_eq!(e.len(), 4);
    }

    #[test]
    fn degree_rule() {
        let c = HalConfig::default();
        assert_eq!(c.max_degree(20), 2);
        assert_eq!(c.max_degree(19), 3);
    }

    #[test]
    fn binning_caps_knots() {
        let n = 100;
        let x = DMatrix::from_fn(n, 1, |i, _| i as f64);
        let e = enumerate_basis(&x, &HalConfig::default()).unwrap();
        // floor(sqrt(100) / 2^0) = 10 knots
        assert_eq!(e.len(), 10);
        let x = DMatrix::from_fn(n, 2, |i, j| if j == 0 { i as f64 } else { (i * 37 % n) as f64 });
        let e = enumerate_basis(&x, &HalConfig::default()).unwrap();
        let distinct = |d: usize, k: usize| {
            let mut v: Vec<f64> = e.functions.iter().filter(|f| f.degree() == d).map(|f| f.knot[k]).collect();
            v.sort_by(f64::total_cmp);
            v.dedup();
            v.len()
        };
        assert!(distinct(2, 0) <= 5 && distinct(2, 1) <= 5);
    }

    #[test]
    fn capacity_error() {
        let x = DMatrix::from_fn(50, 3, |i, j| ((i * (j + 3)) % 17) as f64);
        let cfg = HalConfig { max_columns: 10, ..Default::default() };
        assert!(matches!(enumerate_basis(&x, &cfg), Err(HalError::Capacity { .. })));
    }

    #[test]
    fn no_duplicate_columns() {
        let x = DMatrix::from_fn(40, 3, |i, j| ((i * (j + 2)) % 5) as f64);
        let e = enumerate_basis(&x, &HalConfig::default()).unwrap();
        let cols: Vec<&Column> = e.design.columns().iter().collect();
        for a in 0..cols.len() {
            for b in a + 1..cols.len() {
                assert_ne!(cols[a], cols[b]);
            }
            assert!(matches!(cols[a], Column::Indicator(i) if !i.is_empty()));
        }
    }

    proptest! {
        #[test]
        fn evaluation_is_monotone(
            knot in proptest::collection::vec(-1.0f64..1.0, 3),
            x in proptest::collection::vec(-1.0f64..1.0, 3),
            bump in proptest::collection::vec(0.0f64..1.0, 3),
        ) {
            let f = BasisFunction::new(vec![0, 1, 2], knot);
            let y: Vec<f64> = x.iter().zip(&bump).map(|(a, b)| a + b).collect();
            prop_assert!(evaluate_basis(&f, &x) <= evaluate_basis(&f, &y));
        }
    }
}
