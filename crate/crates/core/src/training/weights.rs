//! Per-language class weights.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// L×C loss weights `w[l][c] = n_l / (C · n[l][c])`, where `n_l` is the
/// number of training examples in language `l` and `n[l][c]` the number of
/// those with label `c`.
///
/// Each language keeps its total mass: `Σ_c n[l][c] · w[l][c] = n_l`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightTable {
    pub w: Vec<Vec<f64>>,
}

impl WeightTable {
    pub fn get(&self, language: usize, label: usize) -> Option<f64> {
        self.w.get(language).and_then(|row| row.get(label)).copied()
    }

    pub fn n_languages(&self) -> usize {
        self.w.len()
    }
}

pub fn compute_weights(counts: &[Vec<u64>]) -> Result<WeightTable> {
    let w = counts
        .iter()
        .enumerate()
        .map(|(l, row)| {
            let n_classes = row.len() as f64;
            let n_l: u64 = row.iter().sum();
            row.iter()
                .enumerate()
                .map(|(c, &n_lc)| {
                    if n_lc == 0 {
                        Err(Error::ZeroCount {
                            language: l,
                            label: c,
                        })
                    } else {
                        Ok(n_l as f64 / (n_classes * n_lc as f64))
                    }
                })
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<Vec<_>>>()?;
    if w.is_empty() {
        return Err(Error::Empty("count table"));
    }
    Ok(WeightTable { w })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn assert_row(row: &[f64], expected: &[f64]) {
        for (a, b) in row.iter().zip(expected) {
            assert!((a - b).abs() < 1e-9, "{row:?} vs {expected:?}");
        }
    }

    #[test]
    fn uniform_counts_give_unit_weights() {
        let t = compute_weights(&[vec![7, 7, 7], vec![7, 7, 7]]).unwrap();
        assert!(t.w.iter().flatten().all(|&w| w == 1.0));
    }

    #[test]
    fn amazon_fractions() {
        let t = compute_weights(&[vec![1, 2, 3, 4, 5], vec![5, 4, 3, 2, 1]]).unwrap();
        assert_row(&t.w[0], &[3.0, 1.5, 1.0, 0.75, 0.6]);
        assert_row(&t.w[1], &[0.6, 0.75, 1.0, 1.5, 3.0]);
    }

    #[test]
    fn xnli_fractions() {
        let t = compute_weights(&[vec![300, 200, 100], vec![100, 200, 300]]).unwrap();
        assert_row(&t.w[0], &[2.0 / 3.0, 1.0, 2.0]);
        assert_row(&t.w[1], &[2.0, 1.0, 2.0 / 3.0]);
    }

    #[test]
    fn empty_cell_is_an_error() {
        assert!(matches!(
            compute_weights(&[vec![3, 0], vec![1, 1]]),
            Err(Error::ZeroCount {
                language: 0,
                label: 1
            })
        ));
    }

    proptest! {
        #[test]
        fn mass_is_preserved_per_language(
            counts in proptest::collection::vec(proptest::collection::vec(1u64..500, 2..6), 1..5)
        ) {
            let c = counts[0].len();
            let counts: Vec<Vec<u64>> = counts.into_iter().map(|mut r| { r.resize(c, 1); r }).collect();
            let t = compute_weights(&counts).unwrap();
            for (row, w) in counts.iter().zip(&t.w) {
                let n_l: u64 = row.iter().sum();
                let mass: f64 = row.iter().zip(w).map(|(&n, &w)| n as f64 * w).sum();
                prop_assert!((mass - n_l as f64).abs() < 1e-9);
            }
        }
    }
}
