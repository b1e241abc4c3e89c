//! PCA fitted by eigendecomposition of the population covariance, and the
//! bracketed fixed-point rendering used for text-level injection.

use std::fs;
use std::path::Path;

use nalgebra::{DMatrix, SymmetricEigen};

use crate::embed_store::{load_matrix, save_matrix, EmbeddingMatrix, MatrixFormat};
use crate::error::{Error, Result};
use crate::stats::CompensatedSum;

pub const DEFAULT_PCA_DIM: usize = 20;
pub const DEFAULT_PRECISION: usize = 2;
pub const MAX_PRECISION: usize = 10;

#[derive(Debug, Clone, PartialEq)]
pub struct PcaModel {
    mean: Vec<f64>,
    /// `d_fm × d_reduced`, orthonormal columns.
    components: EmbeddingMatrix,
    explained_variance: Vec<f64>,
}

impl PcaModel {
    pub fn from_parts(mean: Vec<f64>, components: EmbeddingMatrix, explained_variance: Vec<f64>) -> Result<Self> {
        if components.n_rows() != mean.len() {
            return Err(Error::DimensionMismatch {
                context: "pca components rows vs mean length",
                expected: mean.len(),
                found: components.n_rows(),
            });
        }
        if components.dim() != explained_variance.len() {
            return Err(Error::DimensionMismatch {
                context: "pca components columns vs explained variance",
                expected: components.dim(),
                found: explained_variance.len(),
            });
        }
        Ok(Self {
            mean,
            components,
            explained_variance,
        })
    }

    pub fn mean(&self) -> &[f64] {
        &self.mean
    }

    pub fn components(&self) -> &EmbeddingMatrix {
        &self.components
    }

    pub fn explained_variance(&self) -> &[f64] {
        &self.explained_variance
    }

    pub fn d_fm(&self) -> usize {
        self.mean.len()
    }

    pub fn d_reduced(&self) -> usize {
        self.explained_variance.len()
    }

    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let row = |v: &[f64]| EmbeddingMatrix::new(1, v.len(), v.to_vec());
        save_matrix(&row(&self.mean)?, dir.join("mean.bin"), MatrixFormat::Bin)?;
        save_matrix(&self.components, dir.join("components.bin"), MatrixFormat::Bin)?;
        save_matrix(
            &row(&self.explained_variance)?,
            dir.join("explained_variance.bin"),
            MatrixFormat::Bin,
        )
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let mean = load_matrix(dir.join("mean.bin"), MatrixFormat::Bin)?.into_values();
        let components = load_matrix(dir.join("components.bin"), MatrixFormat::Bin)?;
        let ev = load_matrix(dir.join("explained_variance.bin"), MatrixFormat::Bin)?.into_values();
        Self::from_parts(mean, components, ev)
    }
}

/// Column means and the population covariance (divisor n) of `h`.
pub fn population_covariance(h: &EmbeddingMatrix) -> (Vec<f64>, Vec<f64>) {
    let (n, d) = (h.n_rows(), h.dim());
    let mean: Vec<f64> = (0..d)
        .map(|j| h.rows().map(|r| r[j]).collect::<CompensatedSum>().value() / n as f64)
        .collect();
    let mut cov = vec![0.0; d * d];
    let mut centered = vec![0.0; d];
    for row in h.rows() {
        for (c, (x, m)) in centered.iter_mut().zip(row.iter().zip(&mean)) {
            *c = x - m;
        }
        for i in 0..d {
            let ci = centered[i];
            for j in i..d {
                cov[i * d + j] += ci * centered[j];
            }
        }
    }
    for i in 0..d {
        for j in i..d {
            let v = cov[i * d + j] / n as f64;
            cov[i * d + j] = v;
            cov[j * d + i] = v;
        }
    }
    (mean, cov)
}

/// Flip `v` so its largest-magnitude entry (first on ties) is positive.
pub fn canonical_sign(v: &mut [f64]) {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if x.abs() > v[best].abs() {
            best = i;
        }
    }
    if v.get(best).is_some_and(|&x| x < 0.0) {
        v.iter_mut().for_each(|x| *x = -*x);
    }
}

pub fn fit_pca(h_train: &EmbeddingMatrix, d_reduced: usize) -> Result<PcaModel> {
    let (n, d) = (h_train.n_rows(), h_train.dim());
    if n < 2 {
        return Err(Error::invalid(format!("PCA needs at least 2 rows, got {n}")));
    }
    if d_reduced == 0 || d_reduced > n.min(d) {
        return Err(Error::invalid(format!(
            "d_reduced must be in [1, {}], got {d_reduced}",
            n.min(d)
        )));
    }
    let (mean, cov) = population_covariance(h_train);
    let eig = SymmetricEigen::new(DMatrix::from_row_slice(d, d, &cov));

    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]).then(a.cmp(&b)));

    let trace: f64 = (0..d).map(|i| cov[i * d + i]).sum();
    let zero_tol = 1e-12 * trace.max(0.0);

    let mut columns: Vec<Vec<f64>> = Vec::with_capacity(d_reduced);
    let mut variances = Vec::with_capacity(d_reduced);
    for &k in order.iter().take(d_reduced) {
        let lambda = eig.eigenvalues[k];
        if lambda <= zero_tol {
            break;
        }
        let mut v: Vec<f64> = eig.eigenvectors.column(k).iter().copied().collect();
        canonical_sign(&mut v);
        columns.push(v);
        variances.push(lambda);
    }
    fill_null_space(&mut columns, d, d_reduced);
    variances.resize(d_reduced, 0.0);

    let mut comps = EmbeddingMatrix::zeros(d, d_reduced);
    for (c, col) in columns.iter().enumerate() {
        for (r, &x) in col.iter().enumerate() {
            comps.row_mut(r)[c] = x;
        }
    }
    PcaModel::from_parts(mean, comps, variances)
}

/// Complete `columns` to `want` orthonormal vectors by Gram–Schmidt over the
/// canonical basis e_0, e_1, ... so zero-variance directions are fixed
/// independently of the eigensolver.
fn fill_null_space(columns: &mut Vec<Vec<f64>>, d: usize, want: usize) {
    for axis in 0..d {
        if columns.len() >= want {
            break;
        }
        let mut v = vec![0.0; d];
        v[axis] = 1.0;
        // two passes of classical Gram–Schmidt for stability
        for _ in 0..2 {
            for c in columns.iter() {
                let p: f64 = c.iter().zip(&v).map(|(a, b)| a * b).sum();
                v.iter_mut().zip(c).for_each(|(x, ci)| *x -= p * ci);
            }
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-8 {
            v.iter_mut().for_each(|x| *x /= norm);
            canonical_sign(&mut v);
            columns.push(v);
        }
    }
}

/// `(h − mean) · components`.
pub fn apply_pca(model: &PcaModel, h: &EmbeddingMatrix) -> Result<EmbeddingMatrix> {
    if h.dim() != model.d_fm() {
        return Err(Error::DimensionMismatch {
            context: "apply_pca input dim",
            expected: model.d_fm(),
            found: h.dim(),
        });
    }
    let mut centered = h.clone();
    for i in 0..centered.n_rows() {
        centered
            .row_mut(i)
            .iter_mut()
            .zip(&model.mean)
            .for_each(|(x, m)| *x -= m);
    }
    centered.matmul(&model.components)
}

/// `h_pca · componentsᵀ + mean`.
pub fn reconstruct(model: &PcaModel, h_pca: &EmbeddingMatrix) -> Result<EmbeddingMatrix> {
    let mut out = h_pca.matmul(&model.components.transpose())?;
    for i in 0..out.n_rows() {
        out.row_mut(i)
            .iter_mut()
            .zip(&model.mean)
            .for_each(|(x, m)| *x += m);
    }
    Ok(out)
}

/// Fixed-point rendering with negative zero folded to zero.
pub fn format_fixed(v: f64, precision: usize) -> String {
    let s = format!("{v:.precision$}");
    match s.strip_prefix('-') {
        Some(rest) if rest.bytes().all(|b| b == b'0' || b == b'.') => rest.to_string(),
        _ => s,
    }
}

pub fn stringify_row(row: &[f64], precision: usize) -> String {
    let body = row
        .iter()
        .map(|&v| format_fixed(v, precision))
        .collect::<Vec<_>>()
        .join(", ");
    format!("[{body}]")
}

/// One `"[v1, v2, ...]"` string per row.
pub fn stringify(h_pca: &EmbeddingMatrix, precision: usize) -> Result<Vec<String>> {
    if precision > MAX_PRECISION {
        return Err(Error::invalid(format!(
            "precision must be in [0, {MAX_PRECISION}], got {precision}"
        )));
    }
    Ok(h_pca.rows().map(|r| stringify_row(r, precision)).collect())
}

/// Inverse of [`stringify_row`].
pub fn parse_vector_string(s: &str) -> Result<Vec<f64>> {
    let inner = s
        .trim()
        .strip_prefix('[')
        .and_then(|t| t.strip_suffix(']'))
        .ok_or_else(|| Error::invalid(format!("not a bracketed vector: {s:?}")))?;
    if inner.trim().is_empty() {
        return Ok(Vec::new());
    }
    inner
        .split(',')
        .map(|t| {
            t.trim()
                .parse::<f64>()
                .map_err(|_| Error::invalid(format!("bad vector entry {t:?}")))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::{rng, stats};
    use proptest::prelude::*;

    fn orthonormality_error(m: &PcaModel) -> f64 {
        let c = m.components();
        let gram = c.transpose().matmul(c).unwrap();
        let mut worst: f64 = 0.0;
        for i in 0..gram.n_rows() {
            for j in 0..gram.dim() {
                let expect = if i == j { 1.0 } else { 0.0 };
                worst = worst.max((gram.get(i, j) - expect).abs());
            }
        }
        worst
    }

    #[test]
    fn diagonal_line() {
        let h = EmbeddingMatrix::from_rows(&[[1.0, 1.0], [2.0, 2.0], [3.0, 3.0], [4.0, 4.0]]).unwrap();
        let m = fit_pca(&h, 1).unwrap();
        let s = std::f64::consts::FRAC_1_SQRT_2;
        assert!((m.components().get(0, 0) - s).abs() < 1e-12);
        assert!((m.components().get(1, 0) - s).abs() < 1e-12);
        assert!((m.explained_variance()[0] - 2.5).abs() < 1e-12);
        assert_eq!(m.mean(), &[2.5, 2.5]);
    }

    #[test]
    fn full_rank_preserves_total_variance() {
        let h = EmbeddingMatrix::new(30, 5, rng::normal_vec(3, 150)).unwrap();
        let m = fit_pca(&h, 5).unwrap();
        let total: f64 = (0..5).map(|j| stats::population_variance(&h.column(j))).sum();
        let ev: f64 = m.explained_variance().iter().sum();
        assert!((ev - total).abs() < 1e-10);
    }

    #[test]
    fn identical_rows_give_canonical_basis() {
        let h = EmbeddingMatrix::from_rows(&[[3.0, -1.0, 2.0], [3.0, -1.0, 2.0]]).unwrap();
        let m = fit_pca(&h, 2).unwrap();
        assert_eq!(m.explained_variance(), &[0.0, 0.0]);
        assert_eq!(m.components().values(), &[1.0, 0.0, 0.0, 1.0, 0.0, 0.0]);
    }

    #[test]
    fn rank_deficient_trailing_components_are_orthogonal_fill() {
        // rank 1 data in 3-D, ask for 3 components (n = 4 rows)
        let h = EmbeddingMatrix::from_rows(&[[1.0, 2.0, 0.0], [2.0, 4.0, 0.0], [3.0, 6.0, 0.0], [0.0, 0.0, 0.0]]).unwrap();
        let m = fit_pca(&h, 3).unwrap();
        assert!(m.explained_variance()[0] > 0.0);
        assert_eq!(&m.explained_variance()[1..], &[0.0, 0.0]);
        assert!(orthonormality_error(&m) < 1e-10);
    }

    #[test]
    fn d_reduced_range_checked() {
        let h = EmbeddingMatrix::new(3, 4, rng::normal_vec(1, 12)).unwrap();
        assert!(fit_pca(&h, 0).is_err());
        assert!(fit_pca(&h, 4).is_err());
        assert!(fit_pca(&EmbeddingMatrix::zeros(1, 4), 1).is_err());
    }

    #[test]
    fn apply_centers_and_matches_variance() {
        let h = EmbeddingMatrix::new(40, 6, rng::normal_vec(9, 240)).unwrap();
        let m = fit_pca(&h, 4).unwrap();
        let z = apply_pca(&m, &h).unwrap();
        for j in 0..4 {
            let v = stats::population_variance(&z.column(j));
            assert!((v - m.explained_variance()[j]).abs() < 1e-8);
        }
        let means = EmbeddingMatrix::from_rows(&[m.mean().to_vec(), m.mean().to_vec()]).unwrap();
        assert!(apply_pca(&m, &means).unwrap().values().iter().all(|&x| x == 0.0));
        assert!(apply_pca(&m, &EmbeddingMatrix::zeros(1, 5)).is_err());
    }

    #[test]
    fn identity_model_is_passthrough() {
        let eye = EmbeddingMatrix::from_rows(&[[1.0, 0.0], [0.0, 1.0]]).unwrap();
        let m = PcaModel::from_parts(vec![0.0, 0.0], eye, vec![1.0, 1.0]).unwrap();
        let h = EmbeddingMatrix::from_rows(&[[0.5, -2.0]]).unwrap();
        assert_eq!(apply_pca(&m, &h).unwrap(), h);
    }

    #[test]
    fn stringify_examples() {
        let h = EmbeddingMatrix::from_rows(&[[1.234567, -0.5]]).unwrap();
        assert_eq!(stringify(&h, 2).unwrap(), vec!["[1.23, -0.50]"]);
        let z = EmbeddingMatrix::from_rows(&[[-0.0]]).unwrap();
        assert_eq!(stringify(&z, 2).unwrap(), vec!["[0.00]"]);
        assert_eq!(format_fixed(-0.001, 2), "0.00");
        assert_eq!(format_fixed(-0.4, 0), "0");
        assert_eq!(format_fixed(1e20, 1), "100000000000000000000.0");
        assert_eq!(stringify(&EmbeddingMatrix::zeros(1, 0), 2).unwrap(), vec!["[]"]);
        assert!(stringify(&h, 11).is_err());
    }

    #[test]
    fn save_load_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let h = EmbeddingMatrix::new(10, 3, rng::normal_vec(4, 30)).unwrap();
        let m = fit_pca(&h, 2).unwrap();
        m.save(dir.path()).unwrap();
        assert_eq!(PcaModel::load(dir.path()).unwrap(), m);
    }

    proptest! {
        #[test]
        fn fit_invariants_hold(seed in any::<u64>(), n in 3usize..15, d in 1usize..6) {
            let h = EmbeddingMatrix::new(n, d, rng::normal_vec(seed, n * d)).unwrap();
            let k = n.min(d);
            let m = fit_pca(&h, k).unwrap();
            prop_assert!(orthonormality_error(&m) < 1e-10);
            let ev = m.explained_variance();
            prop_assert!(ev.windows(2).all(|w| w[0] >= w[1]));
            prop_assert!(ev.iter().all(|&v| v >= 0.0));
            if k == d {
                let back = reconstruct(&m, &apply_pca(&m, &h).unwrap()).unwrap();
                for (a, b) in back.values().iter().zip(h.values()) {
                    prop_assert!((a - b).abs() < 1e-8);
                }
            }
        }

        #[test]
        fn stringify_parse_round_trip(values in proptest::collection::vec(-1e4f64..1e4, 0..8), precision in 0usize..=10) {
            let s = stringify_row(&values, precision);
            let parsed = parse_vector_string(&s).unwrap();
            prop_assert_eq!(parsed.len(), values.len());
            prop_assert_eq!(stringify_row(&parsed, precision), s);
        }
    }
}
