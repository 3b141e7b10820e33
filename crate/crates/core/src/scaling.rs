//! Column standardization fitted on training rows and reused on test rows.

use nalgebra::{DMatrix, DVector, RowDVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Per-feature location and scale.
///
/// Scales are sample (n - 1) standard deviations; zero-variance columns get
/// scale 1 so they map to an all-zero column.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScalingParams {
    pub means: Vec<f64>,
    pub scales: Vec<f64>,
}

impl ScalingParams {
    pub fn n_features(&self) -> usize {
        self.means.len()
    }

    /// Fit on `x`; needs at least two rows.
    pub fn fit(x: &DMatrix<f64>) -> Result<Self> {
        if x.nrows() < 2 {
            return Err(Error::InsufficientData(format!(
                "standardization needs at least 2 rows, got {}",
                x.nrows()
            )));
        }
        Ok(Self::fit_unchecked(x))
    }

    /// Like [`ScalingParams::fit`], but with fewer than two rows falls back
    /// to centering only (scale 1). Used by sequential learners early on.
    pub fn fit_lenient(x: &DMatrix<f64>) -> Self {
        if x.nrows() >= 2 {
            return Self::fit_unchecked(x);
        }
        let p = x.ncols();
        let means = if x.nrows() == 1 {
            x.row(0).iter().copied().collect()
        } else {
            vec![0.0; p]
        };
        Self {
            means,
            scales: vec![1.0; p],
        }
    }

    fn fit_unchecked(x: &DMatrix<f64>) -> Self {
        let n = x.nrows() as f64;
        let mut means = Vec::with_capacity(x.ncols());
        let mut scales = Vec::with_capacity(x.ncols());
        for col in x.column_iter() {
            let mean = col.iter().sum::<f64>() / n;
            let ss: f64 = col.iter().map(|v| (v - mean) * (v - mean)).sum();
            let sd = (ss / (n - 1.0)).sqrt();
            means.push(mean);
            // relative threshold so round-off in a constant column reads as constant
            let constant = sd <= 1e-14 * mean.abs().max(f64::MIN_POSITIVE);
            scales.push(if sd == 0.0 || constant { 1.0 } else { sd });
        }
        Self { means, scales }
    }

    fn check(&self, cols: usize) -> Result<()> {
        if cols != self.n_features() {
            return Err(Error::DimensionMismatch {
                expected: self.n_features(),
                got: cols,
            });
        }
        Ok(())
    }

    /// `(x - mean) / scale`, column by column.
    pub fn apply(&self, x: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        self.check(x.ncols())?;
        let mut out = x.clone();
        for (j, mut col) in out.column_iter_mut().enumerate() {
            let (m, s) = (self.means[j], self.scales[j]);
            col.apply(|v| *v = (*v - m) / s);
        }
        Ok(out)
    }

    /// Standardize one row vector.
    pub fn apply_row(&self, x: &RowDVector<f64>) -> Result<RowDVector<f64>> {
        self.check(x.len())?;
        Ok(RowDVector::from_iterator(
            x.len(),
            x.iter()
                .enumerate()
                .map(|(j, v)| (v - self.means[j]) / self.scales[j]),
        ))
    }

    pub fn apply_vec(&self, x: &DVector<f64>) -> Result<DVector<f64>> {
        self.check(x.len())?;
        Ok(DVector::from_iterator(
            x.len(),
            x.iter()
                .enumerate()
                .map(|(j, v)| (v - self.means[j]) / self.scales[j]),
        ))
    }

    /// Inverse of [`ScalingParams::apply`].
    pub fn invert(&self, z: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        self.check(z.ncols())?;
        let mut out = z.clone();
        for (j, mut col) in out.column_iter_mut().enumerate() {
            let (m, s) = (self.means[j], self.scales[j]);
            col.apply(|v| *v = *v * s + m);
        }
        Ok(out)
    }
}

/// Fit on `x` and return the standardized matrix.
pub fn standardize(x: &DMatrix<f64>) -> Result<(ScalingParams, DMatrix<f64>)> {
    let params = ScalingParams::fit(x)?;
    let z = params.apply(x)?;
    Ok((params, z))
}
