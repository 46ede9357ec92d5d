//! Differentiable ZCA channel whitening.
//!
//! Training mode whitens a batch with its own statistics,
//! `φ(X) = Σ^{-1/2} (X − u·1ᵀ)` where `Σ = (1/d)·X_c X_cᵀ + εI` and the inverse
//! square root comes from the symmetric eigendecomposition `Σ = V Λ Vᵀ`.
//! Inference mode applies exponential moving averages of `u` and `Σ^{-1/2}`.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::batch::FeatureBatch;
use crate::error::{Error, Result};

/// Eigenvalue pairs closer than this contribute no gradient through the
/// eigenvector rotation term.
pub const DEGENERACY_FLOOR: f64 = 1e-8;

const EIGEN_MAX_ITER: usize = 10_000;

/// Normaliser for the covariance estimate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CovarianceDivisor {
    /// Divide by the sample count `B`; whitened output has identity covariance.
    #[default]
    Samples,
    /// Divide by the channel count `C`; whitened covariance becomes `(C/B)·I`.
    Channels,
}

impl CovarianceDivisor {
    fn value(self, channels: usize, samples: usize) -> f64 {
        match self {
            CovarianceDivisor::Samples => samples as f64,
            CovarianceDivisor::Channels => channels as f64,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct WhiteningConfig {
    pub epsilon: f64,
    pub momentum: f64,
    pub divisor: CovarianceDivisor,
}

impl Default for WhiteningConfig {
    fn default() -> Self {
        Self {
            epsilon: 1e-5,
            momentum: 0.1,
            divisor: CovarianceDivisor::Samples,
        }
    }
}

impl WhiteningConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon > 0.0 && self.epsilon.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "epsilon must be positive, got {}",
                self.epsilon
            )));
        }
        if !(self.momentum > 0.0 && self.momentum <= 1.0) {
            return Err(Error::InvalidArgument(format!(
                "momentum must lie in (0, 1], got {}",
                self.momentum
            )));
        }
        Ok(())
    }
}

/// Batch mean and `ε`-regularised covariance of a channel-major batch.
pub fn compute_covariance(
    batch: &FeatureBatch,
    epsilon: f64,
    divisor: CovarianceDivisor,
) -> Result<(DVector<f64>, DMatrix<f64>)> {
    batch.require_covariance_ready()?;
    if !(epsilon >= 0.0 && epsilon.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "epsilon must be non-negative, got {epsilon}"
        )));
    }
    let x = batch.matrix();
    let (c, b) = x.shape();
    let mean = x.column_mean();
    let centered = center(x, &mean);
    let mut cov = &centered * centered.transpose() / divisor.value(c, b);
    symmetrize(&mut cov);
    for i in 0..c {
        cov[(i, i)] += epsilon;
    }
    Ok((mean, cov))
}

fn center(x: &DMatrix<f64>, mean: &DVector<f64>) -> DMatrix<f64> {
    let mut out = x.clone();
    for mut col in out.column_iter_mut() {
        col -= mean;
    }
    out
}

fn symmetrize(m: &mut DMatrix<f64>) {
    let n = m.nrows();
    for i in 0..n {
        for j in (i + 1)..n {
            let v = 0.5 * (m[(i, j)] + m[(j, i)]);
            m[(i, j)] = v;
            m[(j, i)] = v;
        }
    }
}

/// Ratio of extreme singular values; infinite when the matrix is singular or
/// the SVD itself fails.
pub fn condition_number(m: &DMatrix<f64>) -> f64 {
    match m.clone().try_svd(false, false, f64::EPSILON, EIGEN_MAX_ITER) {
        Some(svd) => {
            let max = svd.singular_values.max();
            let min = svd.singular_values.min();
            if min > 0.0 {
                max / min
            } else {
                f64::INFINITY
            }
        }
        None => f64::INFINITY,
    }
}

/// Eigendecomposition sorted by descending eigenvalue.
pub fn sorted_symmetric_eigen(m: &DMatrix<f64>) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let eig = SymmetricEigen::try_new(m.clone(), f64::EPSILON, EIGEN_MAX_ITER).ok_or_else(|| Error::LinearAlgebra {
        message: format!(
            "symmetric eigendecomposition of {0}x{0} matrix did not converge",
            m.nrows()
        ),
        condition_number: condition_number(m),
    })?;
    let n = m.nrows();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let values = DVector::from_iterator(n, order.iter().map(|&i| eig.eigenvalues[i]));
    let vectors = DMatrix::from_fn(n, n, |r, c| eig.eigenvectors[(r, order[c])]);
    Ok((values, vectors))
}

/// Statistics and transform of the whitening layer, plus the running
/// averages used at inference.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WhiteningState {
    pub epsilon: f64,
    pub momentum: f64,
    pub divisor: CovarianceDivisor,
    /// `u`
    pub batch_mean: DVector<f64>,
    /// `Σ`, including `εI`.
    pub covariance: DMatrix<f64>,
    /// `Λ`, descending and clamped below at `ε`.
    pub eigenvalues: DVector<f64>,
    /// `V`, columns ordered like `eigenvalues`.
    pub eigenvectors: DMatrix<f64>,
    /// `W = Σ^{-1/2}`
    pub transform: DMatrix<f64>,
    pub running_mean: DVector<f64>,
    pub running_transform: DMatrix<f64>,
    /// Number of `update_running_stats` calls applied so far.
    pub updates: u64,
}

impl WhiteningState {
    pub fn new(channels: usize, config: &WhiteningConfig) -> Result<Self> {
        config.validate()?;
        if channels == 0 {
            return Err(Error::InvalidArgument("whitening needs at least one channel".into()));
        }
        Ok(Self {
            epsilon: config.epsilon,
            momentum: config.momentum,
            divisor: config.divisor,
            batch_mean: DVector::zeros(channels),
            covariance: DMatrix::identity(channels, channels),
            eigenvalues: DVector::from_element(channels, 1.0),
            eigenvectors: DMatrix::identity(channels, channels),
            transform: DMatrix::identity(channels, channels),
            running_mean: DVector::zeros(channels),
            running_transform: DMatrix::identity(channels, channels),
            updates: 0,
        })
    }

    pub fn channels(&self) -> usize {
        self.batch_mean.len()
    }

    pub fn config(&self) -> WhiteningConfig {
        WhiteningConfig {
            epsilon: self.epsilon,
            momentum: self.momentum,
            divisor: self.divisor,
        }
    }

    /// Recomputes `u`, `Σ`, `V`, `Λ` and `W` from a training batch.
    pub fn fit(&mut self, batch: &FeatureBatch) -> Result<()> {
        self.check_channels(batch)?;
        let (mean, cov) = compute_covariance(batch, self.epsilon, self.divisor)?;
        let (mut values, vectors) = sorted_symmetric_eigen(&cov)?;
        values.apply(|v| *v = v.max(self.epsilon));
        let inv_sqrt = values.map(|v| v.powf(-0.5));
        let mut transform = &vectors * DMatrix::from_diagonal(&inv_sqrt) * vectors.transpose();
        symmetrize(&mut transform);

        self.batch_mean = mean;
        self.covariance = cov;
        self.eigenvalues = values;
        self.eigenvectors = vectors;
        self.transform = transform;
        Ok(())
    }

    /// Fits to `batch` and returns its whitened features.
    pub fn forward_train(&mut self, batch: &FeatureBatch) -> Result<FeatureBatch> {
        self.fit(batch)?;
        zca_forward(batch, self)
    }

    fn check_channels(&self, batch: &FeatureBatch) -> Result<()> {
        if batch.channels() != self.channels() {
            return Err(Error::NumericalInput(format!(
                "batch has {} channels, whitening state expects {}",
                batch.channels(),
                self.channels()
            )));
        }
        Ok(())
    }
}

/// Applies the current batch transform: `V Λ^{-1/2} Vᵀ (X − u·1ᵀ)`.
pub fn zca_forward(batch: &FeatureBatch, state: &WhiteningState) -> Result<FeatureBatch> {
    state.check_channels(batch)?;
    let centered = center(batch.matrix(), &state.batch_mean);
    Ok(FeatureBatch::from_matrix_unchecked(&state.transform * centered))
}

/// Result of [`zca_backward`].
#[derive(Debug, Clone)]
pub struct ZcaGradient {
    /// `dL/dX`
    pub grad_input: FeatureBatch,
    /// Eigenvalue pairs whose spacing fell below [`DEGENERACY_FLOOR`] and were
    /// dropped from the rotation term.
    pub degenerate_pairs: usize,
}

/// Back-propagates `dL/dφ(X)` to `dL/dX` through the mean, the covariance and
/// its eigendecomposition.
///
/// With `M = Vᵀ (dL/dW) V` the covariance gradient is
/// `dL/dΣ = V (P ∘ sym(M)) Vᵀ` where `P_ii = f'(λ_i)` and
/// `P_ij = (f(λ_i) − f(λ_j))·K_ij`, `K_ij = 1/(λ_i − λ_j)`, `f(λ) = λ^{-1/2}`.
/// This is the eigenvector term `Kᵀ ∘ (Vᵀ dL/dV)` and eigenvalue term
/// `diag(dL/dΛ)` of the symmetric eigendecomposition chain rule, collected.
pub fn zca_backward(grad_output: &FeatureBatch, batch: &FeatureBatch, state: &WhiteningState) -> Result<ZcaGradient> {
    state.check_channels(batch)?;
    if grad_output.matrix().shape() != batch.matrix().shape() {
        return Err(Error::NumericalInput(format!(
            "gradient shape {:?} does not match batch shape {:?}",
            grad_output.matrix().shape(),
            batch.matrix().shape()
        )));
    }
    let (c, b) = batch.matrix().shape();
    let g = grad_output.matrix();
    let centered = center(batch.matrix(), &state.batch_mean);
    let v = &state.eigenvectors;
    let lambda = &state.eigenvalues;

    let grad_w = g * centered.transpose();
    let m = v.transpose() * &grad_w * v;

    let f = |l: f64| l.powf(-0.5);
    let df = |l: f64| {
        if l > state.epsilon {
            -0.5 * l.powf(-1.5)
        } else {
            0.0
        }
    };
    let mut degenerate_pairs = 0;
    let mut inner = DMatrix::zeros(c, c);
    for i in 0..c {
        inner[(i, i)] = df(lambda[i]) * m[(i, i)];
        for j in (i + 1)..c {
            let gap = lambda[i] - lambda[j];
            let k = if gap.abs() < DEGENERACY_FLOOR {
                degenerate_pairs += 1;
                0.0
            } else {
                1.0 / gap
            };
            let p = (f(lambda[i]) - f(lambda[j])) * k;
            let sym = 0.5 * (m[(i, j)] + m[(j, i)]);
            inner[(i, j)] = p * sym;
            inner[(j, i)] = p * sym;
        }
    }
    let grad_cov = v * inner * v.transpose();

    let d = state.divisor.value(c, b);
    let mut grad_centered = &state.transform * g + (2.0 / d) * grad_cov * &centered;
    let row_mean = grad_centered.column_mean();
    for mut col in grad_centered.column_iter_mut() {
        col -= &row_mean;
    }
    Ok(ZcaGradient {
        grad_input: FeatureBatch::from_matrix_unchecked(grad_centered),
        degenerate_pairs,
    })
}

/// Folds the current `u` and `W` into the running averages.
pub fn update_running_stats(state: &mut WhiteningState) {
    let m = state.momentum;
    state.running_mean = (1.0 - m) * &state.running_mean + m * &state.batch_mean;
    state.running_transform = (1.0 - m) * &state.running_transform + m * &state.transform;
    state.updates += 1;
}

/// Whitens with the running statistics. Accepts single-sample batches.
pub fn zca_inference(batch: &FeatureBatch, state: &WhiteningState) -> Result<FeatureBatch> {
    if state.updates == 0 {
        return Err(Error::UninitializedStatistics);
    }
    state.check_channels(batch)?;
    let centered = center(batch.matrix(), &state.running_mean);
    Ok(FeatureBatch::from_matrix_unchecked(&state.running_transform * centered))
}
