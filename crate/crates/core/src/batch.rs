use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Channel-major feature matrix: `C` rows (channels) by `B` columns (samples).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureBatch(DMatrix<f64>);

impl FeatureBatch {
    /// Wraps a matrix, rejecting empty shapes and non-finite entries.
    pub fn new(data: DMatrix<f64>) -> Result<Self> {
        if data.nrows() == 0 || data.ncols() == 0 {
            return Err(Error::NumericalInput(format!(
                "empty batch ({}x{})",
                data.nrows(),
                data.ncols()
            )));
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            let (r, c) = (pos % data.nrows(), pos / data.nrows());
            return Err(Error::NumericalInput(format!(
                "non-finite value {} at channel {r}, sample {c}",
                data[(r, c)]
            )));
        }
        Ok(Self(data))
    }

    /// Builds a batch from row-major channel data (`channels` rows of `samples` values).
    pub fn from_row_slice(channels: usize, samples: usize, data: &[f64]) -> Result<Self> {
        if data.len() != channels * samples {
            return Err(Error::NumericalInput(format!(
                "expected {} values for a {channels}x{samples} batch, got {}",
                channels * samples,
                data.len()
            )));
        }
        Self::new(DMatrix::from_row_slice(channels, samples, data))
    }

    /// Builds a batch from sample rows (`B` rows of `C` features), transposing
    /// into channel-major layout.
    pub fn from_samples(rows: &[Vec<f64>]) -> Result<Self> {
        let b = rows.len();
        let c = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != c) {
            return Err(Error::NumericalInput("ragged sample rows".into()));
        }
        Self::new(DMatrix::from_fn(c, b, |i, j| rows[j][i]))
    }

    pub(crate) fn from_matrix_unchecked(data: DMatrix<f64>) -> Self {
        Self(data)
    }

    /// Requires at least two samples, the minimum for a covariance estimate.
    pub fn require_covariance_ready(&self) -> Result<()> {
        if self.samples() < 2 {
            return Err(Error::NumericalInput(format!(
                "covariance needs at least 2 samples, batch has {}",
                self.samples()
            )));
        }
        Ok(())
    }

    pub fn channels(&self) -> usize {
        self.0.nrows()
    }

    pub fn samples(&self) -> usize {
        self.0.ncols()
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.0
    }

    pub fn into_matrix(self) -> DMatrix<f64> {
        self.0
    }

    /// Row-major copy of the data.
    pub fn to_row_major(&self) -> Vec<f64> {
        self.0.transpose().as_slice().to_vec()
    }
}

impl AsRef<DMatrix<f64>> for FeatureBatch {
    fn as_ref(&self) -> &DMatrix<f64> {
        &self.0
    }
}
