//! V-fold partitions.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rng::Stream;

#[derive(Debug, Error, PartialEq)]
#[error("cannot split {n} rows into {folds} folds")]
pub struct FoldError {
    pub n: usize,
    pub folds: usize,
}

/// Fold id (0-based) per observation.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldScheme {
    pub assignments: Vec<usize>,
    pub v: usize,
}

impl FoldScheme {
    /// Rows in fold `k`, ascending.
    pub fn validation(&self, k: usize) -> Vec<usize> {
        (0..self.assignments.len()).filter(|&i| self.assignments[i] == k).collect()
    }

    /// Rows outside fold `k`, ascending.
    pub fn training(&self, k: usize) -> Vec<usize> {
        (0..self.assignments.len()).filter(|&i| self.assignments[i] != k).collect()
    }

    pub fn sizes(&self) -> Vec<usize> {
        let mut s = vec![0; self.v];
        for &f in &self.assignments {
            s[f] += 1;
        }
        s
    }
}

/// Random permutation dealt round-robin into `v` folds, so sizes differ by
/// at most one.
pub fn make_folds(n: usize, v: usize, rng: &mut Stream) -> Result<FoldScheme, FoldError> {
    if v < 2 || n < v {
        return Err(FoldError { n, folds: v });
    }
    let mut perm: Vec<usize> = (0..n).collect();
    perm.shuffle(rng);
    let mut assignments = vec![0; n];
    for (pos, &i) in perm.iter().enumerate() {
        assignments[i] = pos % v;
    }
    Ok(FoldScheme { assignments, v })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;

    #[test]
    fn leave_one_out_when_n_equals_v() {
        let f = make_folds(10, 10, &mut stream(1, 0)).unwrap();
        assert_eq!(f.sizes(), vec![1; 10]);
    }

    #[test]
    fn remainder_goes_to_one_fold() {
        let f = make_folds(11, 10, &mut stream(1, 0)).unwrap();
        let mut s = f.sizes();
        s.sort();
        assert_eq!(s, vec![1, 1, 1, 1, 1, 1, 1, 1, 1, 2]);
    }

    #[test]
    fn deterministic_given_seed() {
        let a = make_folds(50, 5, &mut stream(9, 2)).unwrap();
        let b = make_folds(50, 5, &mut stream(9, 2)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn too_few_rows() {
        assert_eq!(make_folds(3, 10, &mut stream(1, 0)), Err(FoldError { n: 3, folds: 10 }));
    }
}
