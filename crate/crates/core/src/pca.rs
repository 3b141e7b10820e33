//! PCA by singular value decomposition of the column-centered data.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Top-`k` principal directions of a fitted matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PcaTransform {
    /// features x k, orthonormal columns.
    pub components: DMatrix<f64>,
    pub column_means: DVector<f64>,
    pub k: usize,
    /// Sample variance of the data along each component (non-increasing).
    pub explained_variance: Vec<f64>,
}

impl PcaTransform {
    /// Fit `k` components; requires `k <= min(rows - 1, cols)`.
    ///
    /// Components are ordered by decreasing singular value and the largest
    /// magnitude entry of each is made positive.
    pub fn fit(x: &DMatrix<f64>, k: usize) -> Result<Self> {
        let (n, p) = x.shape();
        if k == 0 {
            return Err(Error::InvalidArgument("k must be positive".into()));
        }
        if n < 2 || k > (n - 1).min(p) {
            return Err(Error::InvalidArgument(format!(
                "k = {k} exceeds min(rows - 1, cols) = {}",
                n.saturating_sub(1).min(p)
            )));
        }
        let column_means = DVector::from_iterator(p, x.column_iter().map(|c| c.mean()));
        let mut centered = x.clone();
        for (j, mut col) in centered.column_iter_mut().enumerate() {
            col.add_scalar_mut(-column_means[j]);
        }
        let svd = centered.svd(false, true);
        let v_t = svd
            .v_t
            .ok_or_else(|| Error::Numerical("SVD did not produce right singular vectors".into()))?;
        let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
        order.sort_by(|&a, &b| svd.singular_values[b].total_cmp(&svd.singular_values[a]));

        let mut components = DMatrix::zeros(p, k);
        let mut explained_variance = Vec::with_capacity(k);
        for (out, &idx) in order.iter().take(k).enumerate() {
            let mut dir: DVector<f64> = v_t.row(idx).transpose();
            let pivot = dir
                .iter()
                .copied()
                .max_by(|a, b| a.abs().total_cmp(&b.abs()))
                .unwrap_or(0.0);
            if pivot < 0.0 {
                dir.neg_mut();
            }
            components.set_column(out, &dir);
            let s = svd.singular_values[idx];
            explained_variance.push(s * s / (n as f64 - 1.0));
        }
        Ok(Self {
            components,
            column_means,
            k,
            explained_variance,
        })
    }

    /// `(x - column_means) * components`.
    pub fn apply(&self, x: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        if x.ncols() != self.column_means.len() {
            return Err(Error::DimensionMismatch {
                expected: self.column_means.len(),
                got: x.ncols(),
            });
        }
        let mut centered = x.clone();
        for (j, mut col) in centered.column_iter_mut().enumerate() {
            col.add_scalar_mut(-self.column_means[j]);
        }
        Ok(centered * &self.components)
    }

    /// Map component scores back to (centered-then-uncentered) feature space.
    pub fn reconstruct(&self, scores: &DMatrix<f64>) -> DMatrix<f64> {
        let mut out = scores * self.components.transpose();
        for (j, mut col) in out.column_iter_mut().enumerate() {
            col.add_scalar_mut(self.column_means[j]);
        }
        out
    }
}
