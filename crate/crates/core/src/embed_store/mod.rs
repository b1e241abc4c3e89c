//! Embedding matrices, labeled datasets and their on-disk formats, plus the
//! reference statistics of an LLM token-embedding table.

mod dataset;
mod io;
mod matrix;

pub use dataset::LabeledDataset;
pub use io::{
    decode_bin, encode_bin, load_matrix, load_matrix_auto, parse_csv, render_csv, save_matrix,
    save_matrix_auto, MatrixFormat, MAGIC,
};
pub use matrix::EmbeddingMatrix;

use crate::error::{Error, Result};
use crate::stats::{self, CompensatedSum};

/// Target moments for per-row normalization.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NormalizationParams {
    pub target_mean: f64,
    pub target_var: f64,
}

impl NormalizationParams {
    pub fn new(target_mean: f64, target_var: f64) -> Result<Self> {
        if !(target_var >= 0.0) || !target_mean.is_finite() || !target_var.is_finite() {
            return Err(Error::invalid(format!(
                "normalization target must be finite with var >= 0, got ({target_mean}, {target_var})"
            )));
        }
        Ok(Self {
            target_mean,
            target_var,
        })
    }
}

/// Average of per-row means and per-row population variances over every row
/// that is not identically zero.
pub fn fit_normalization(llm_table: &EmbeddingMatrix) -> Result<NormalizationParams> {
    let mut means = CompensatedSum::new();
    let mut vars = CompensatedSum::new();
    let mut included = 0usize;
    for row in llm_table.rows() {
        if row.is_empty() || row.iter().all(|&v| v == 0.0) {
            continue;
        }
        means.add(stats::mean(row));
        vars.add(stats::population_variance(row));
        included += 1;
    }
    if included == 0 {
        return Err(Error::NoNonZeroRows);
    }
    let n = included as f64;
    NormalizationParams::new(means.value() / n, vars.value() / n)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn skips_all_zero_rows() {
        let t = EmbeddingMatrix::from_rows(&[[1.0, 3.0], [0.0, 0.0], [2.0, 2.0]]).unwrap();
        let p = fit_normalization(&t).unwrap();
        assert_eq!(p, NormalizationParams { target_mean: 2.0, target_var: 0.5 });
    }

    #[test]
    fn constant_row_has_zero_variance() {
        let t = EmbeddingMatrix::from_rows(&[[1.5, 1.5, 1.5, 1.5]]).unwrap();
        let p = fit_normalization(&t).unwrap();
        assert_eq!((p.target_mean, p.target_var), (1.5, 0.0));
    }

    #[test]
    fn all_zero_table_is_an_error() {
        let t = EmbeddingMatrix::from_rows(&[[0.0, 0.0]]).unwrap();
        assert!(matches!(fit_normalization(&t), Err(Error::NoNonZeroRows)));
        assert!(fit_normalization(&EmbeddingMatrix::zeros(0, 3)).is_err());
    }

    fn table() -> impl Strategy<Value = Vec<Vec<f64>>> {
        proptest::collection::vec(proptest::collection::vec(-10.0f64..10.0, 4), 1..12)
    }

    proptest! {
        #[test]
        fn permutation_invariant(rows in table(), seed in any::<u64>()) {
            use rand::seq::SliceRandom;
            let a = fit_normalization(&EmbeddingMatrix::from_rows(&rows).unwrap()).unwrap();
            let mut shuffled = rows.clone();
            shuffled.shuffle(&mut crate::rng::stream(seed));
            let b = fit_normalization(&EmbeddingMatrix::from_rows(&shuffled).unwrap()).unwrap();
            prop_assert!((a.target_mean - b.target_mean).abs() <= 1e-12 * (1.0 + a.target_mean.abs()));
            prop_assert!((a.target_var - b.target_var).abs() <= 1e-12 * (1.0 + a.target_var));
        }

        #[test]
        fn duplication_invariant(rows in table()) {
            let a = fit_normalization(&EmbeddingMatrix::from_rows(&rows).unwrap()).unwrap();
            let doubled: Vec<_> = rows.iter().chain(rows.iter()).cloned().collect();
            let b = fit_normalization(&EmbeddingMatrix::from_rows(&doubled).unwrap()).unwrap();
            prop_assert!((a.target_mean - b.target_mean).abs() <= 1e-12 * (1.0 + a.target_mean.abs()));
            prop_assert!((a.target_var - b.target_var).abs() <= 1e-12 * (1.0 + a.target_var));
        }
    }
}
