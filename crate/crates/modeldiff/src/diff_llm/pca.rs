//! Principal component analysis over mean-centered data, via SVD.

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum PcaError {
    #[error("need at least 2 rows, have {0}")]
    TooFewRows(usize),
    #[error("k={k} exceeds min(n, d)={limit}")]
    KTooLarge { k: usize, limit: usize },
    #[error("k must be >= 1")]
    ZeroComponents,
    #[error("non-finite value at row {row}, column {col}")]
    NonFinite { row: usize, col: usize },
    #[error("row {row} has {len} values, expected {expected}")]
    RaggedRows {
        row: usize,
        len: usize,
        expected: usize,
    },
    #[error("empty input")]
    Empty,
}

/// A fitted PCA basis.
#[derive(Debug, Clone)]
pub struct Pca {
    pub mean: DVector<f64>,
    /// d x k matrix with orthonormal columns (the top-k principal
    /// directions). All-zero when the data had no variance.
    pub components: DMatrix<f64>,
    /// Variance explained by each component, non-increasing.
    pub explained_variance: Vec<f64>,
    /// Total variance of the data (trace of the sample covariance).
    pub total_variance: f64,
    /// Set when the input had (numerically) zero variance; the projection
    /// is all zeros in that case.
    pub zero_variance: bool,
}

impl Pca {
    /// Fits the top-`k` principal components of the mean-centered rows of
    /// `data` (n x d).
    pub fn fit(data: &DMatrix<f64>, k: usize) -> Result<Self, PcaError> {
        let (n, d) = data.shape();
        if n < 2 {
            return Err(PcaError::TooFewRows(n));
        }
        if k == 0 {
            return Err(PcaError::ZeroComponents);
        }
        let limit = n.min(d);
        if k > limit {
            return Err(PcaError::KTooLarge { k, limit });
        }
        for row in 0..n {
            for col in 0..d {
                if !data[(row, col)].is_finite() {
                    return Err(PcaError::NonFinite { row, col });
                }
            }
        }

        let mean = DVector::from_iterator(d, (0..d).map(|j| data.column(j).sum() / n as f64));
        let mut centered = data.clone();
        for mut row in centered.row_iter_mut() {
            row -= mean.transpose();
        }
        let total_variance = centered.iter().map(|v| v * v).sum::<f64>() / (n as f64 - 1.0);

        if total_variance <= f64::EPSILON * f64::EPSILON {
            log::warn!("PCA input has zero variance; projection is all zeros");
            return Ok(Self {
                mean,
                components: DMatrix::zeros(d, k),
                explained_variance: vec![0.0; k],
                total_variance: 0.0,
                zero_variance: true,
            });
        }

        let svd = centered.svd(false, true);
        let v_t = svd.v_t.expect("v_t requested");
        let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
        order.sort_by(|&a, &b| {
            svd.singular_values[b]
                .partial_cmp(&svd.singular_values[a])
                .unwrap_or(std::cmp::Ordering::Equal)
                .then(a.cmp(&b))
        });

        let mut components = DMatrix::zeros(d, k);
        let mut explained_variance = Vec::with_capacity(k);
        for (col, &idx) in order.iter().take(k).enumerate() {
            let sigma = svd.singular_values[idx];
            explained_variance.push(sigma * sigma / (n as f64 - 1.0));
            let direction = v_t.row(idx).transpose();
            // Deterministic sign: the largest-magnitude coordinate is positive.
            let mut extreme = 0;
            for i in 1..d {
                if direction[i].abs() > direction[extreme].abs() {
                    extreme = i;
                }
            }
            let sign = if direction[extreme] < 0.0 { -1.0 } else { 1.0 };
            components.set_column(col, &(direction * sign));
        }

        Ok(Self {
            mean,
            components,
            explained_variance,
            total_variance,
            zero_variance: false,
        })
    }

    /// Projects rows of `data` onto the fitted basis, yielding n x k.
    pub fn transform(&self, data: &DMatrix<f64>) -> DMatrix<f64> {
        let mut centered = data.clone();
        for mut row in centered.row_iter_mut() {
            row -= self.mean.transpose();
        }
        centered * &self.components
    }

    /// Maps reduced rows back into the original space.
    pub fn inverse_transform(&self, reduced: &DMatrix<f64>) -> DMatrix<f64> {
        let mut restored = reduced * self.components.transpose();
        for mut row in restored.row_iter_mut() {
            row += self.mean.transpose();
        }
        restored
    }

    /// Fraction of total variance captured by the first `k` components.
    pub fn explained_variance_ratio(&self) -> f64 {
        if self.total_variance == 0.0 {
            return 0.0;
        }
        self.explained_variance.iter().sum::<f64>() / self.total_variance
    }
}

/// Converts row vectors into a dense matrix, validating shape.
pub fn rows_to_matrix(rows: &[Vec<f64>]) -> Result<DMatrix<f64>, PcaError> {
    if rows.is_empty() {
        return Err(PcaError::Empty);
    }
    let d = rows[0].len();
    for (i, row) in rows.iter().enumerate() {
        if row.len() != d {
            return Err(PcaError::RaggedRows {
                row: i,
                len: row.len(),
                expected: d,
            });
        }
    }
    Ok(DMatrix::from_fn(rows.len(), d, |i, j| rows[i][j]))
}

/// Convenience wrapper: fit + transform, returning reduced rows alongside
/// the fitted model.
pub fn reduce_dimensions(embeddings: &[Vec<f64>], k: usize) -> Result<(Vec<Vec<f64>>, Pca), PcaError> {
    let matrix = rows_to_matrix(embeddings)?;
    let pca = Pca::fit(&matrix, k)?;
    let reduced = pca.transform(&matrix);
    let rows = (0..reduced.nrows())
        .map(|i| reduced.row(i).iter().copied().collect())
        .collect();
    Ok((rows, pca))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn frobenius_sq(m: &DMatrix<f64>) -> f64 {
        m.iter().map(|v| v * v).sum()
    }

    /// Independent oracle: eigenvalues of the sample covariance matrix,
    /// ascending.
    fn covariance_eigenvalues(data: &DMatrix<f64>) -> Vec<f64> {
        let (n, d) = data.shape();
        let mean = DVector::from_iterator(d, (0..d).map(|j| data.column(j).sum() / n as f64));
        let mut centered = data.clone();
        for mut row in centered.row_iter_mut() {
            row -= mean.transpose();
        }
        let cov = centered.transpose() * &centered / (n as f64 - 1.0);
        let mut eigen: Vec<f64> = cov.symmetric_eigen().eigenvalues.iter().copied().collect();
        eigen.sort_by(|a, b| a.partial_cmp(b).unwrap());
        eigen
    }

    fn reconstruction_error(data: &DMatrix<f64>, k: usize) -> f64 {
        let pca = Pca::fit(data, k).unwrap();
        let restored = pca.inverse_transform(&pca.transform(data));
        frobenius_sq(&(data - restored)) / (data.nrows() as f64 - 1.0)
    }

    #[test]
    fn subspace_projection_preserves_distances() {
        // 3-D points confined to a 2-D plane through random rotation.
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let basis = [
            [1.0 / 2f64.sqrt(), 1.0 / 2f64.sqrt(), 0.0],
            [0.0, 0.0, 1.0],
        ];
        let n = 40;
        let data = DMatrix::from_fn(n, 3, |_, _| 0.0);
        let mut data = data;
        let coeffs: Vec<(f64, f64)> = (0..n)
            .map(|_| (rng.gen::<f64>() * 4.0 - 2.0, rng.gen::<f64>() * 4.0 - 2.0))
            .collect();
        for (i, (a, b)) in coeffs.iter().enumerate() {
            for j in 0..3 {
                data[(i, j)] = a * basis[0][j] + b * basis[1][j];
            }
        }
        let pca = Pca::fit(&data, 2).unwrap();
        let reduced = pca.transform(&data);
        for i in 0..n {
            for j in (i + 1)..n {
                let orig = (data.row(i) - data.row(j)).norm();
                let proj = (reduced.row(i) - reduced.row(j)).norm();
                assert!((orig - proj).abs() < 1e-9, "pair ({i},{j}): {orig} vs {proj}");
            }
        }
    }

    #[test]
    fn collinear_points_need_one_component() {
        let data = DMatrix::from_row_slice(4, 2, &[0.0, 0.0, 1.0, 2.0, 2.0, 4.0, 3.0, 6.0]);
        let pca = Pca::fit(&data, 1).unwrap();
        assert!((pca.explained_variance_ratio() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn reconstruction_error_matches_eigendecomposition_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let data = DMatrix::from_fn(50, 10, |_, _| rng.gen::<f64>() * 2.0 - 1.0);

        // full-rank projection is lossless
        assert!(reconstruction_error(&data, 10) < 1e-8);

        // k=5 error equals the sum of the 5 smallest covariance eigenvalues
        let eigen = covariance_eigenvalues(&data);
        let expected: f64 = eigen[..5].iter().sum();
        let actual = reconstruction_error(&data, 5);
        assert!(
            (actual - expected).abs() < 1e-8,
            "recon {actual} vs oracle {expected}"
        );
    }

    #[test]
    fn basis_is_orthonormal_and_variance_non_increasing() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let data = DMatrix::from_fn(60, 12, |_, _| rng.gen::<f64>() * 10.0);
        let pca = Pca::fit(&data, 6).unwrap();
        let gram = pca.components.transpose() * &pca.components;
        for i in 0..6 {
            for j in 0..6 {
                let expected = if i == j { 1.0 } else { 0.0 };
                assert!((gram[(i, j)] - expected).abs() < 1e-9);
            }
        }
        for w in pca.explained_variance.windows(2) {
            assert!(w[0] >= w[1] - 1e-12);
        }
    }

    #[test]
    fn zero_variance_sets_flag_and_zeros() {
        let data = DMatrix::from_element(5, 3, 2.5);
        let pca = Pca::fit(&data, 2).unwrap();
        assert!(pca.zero_variance);
        let reduced = pca.transform(&data);
        assert!(reduced.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn k_too_large_is_an_error() {
        let data = DMatrix::from_element(3, 5, 1.0);
        assert!(matches!(
            Pca::fit(&data, 4),
            Err(PcaError::KTooLarge { k: 4, limit: 3 })
        ));
    }

    #[test]
    fn non_finite_is_an_error() {
        let mut data = DMatrix::from_element(3, 2, 1.0);
        data[(1, 1)] = f64::NAN;
        assert!(matches!(Pca::fit(&data, 1), Err(PcaError::NonFinite { row: 1, col: 1 })));
    }

    #[test]
    fn rank_k_data_round_trips_losslessly() {
        // rank-3 data in 8 dimensions
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let factors = DMatrix::from_fn(30, 3, |_, _| rng.gen::<f64>() - 0.5);
        let loadings = DMatrix::from_fn(3, 8, |_, _| rng.gen::<f64>() - 0.5);
        let data = factors * loadings;
        let pca = Pca::fit(&data, 3).unwrap();
        let restored = pca.inverse_transform(&pca.transform(&data));
        assert!(frobenius_sq(&(&data - restored)) < 1e-8);
    }
}
