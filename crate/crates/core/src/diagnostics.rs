//! Measurement instruments for pre-classifier features: Pearson channel
//! correlation, singular-value spectra and the covariance stability metric
//! `E = tr(Σ)`, with a JSON-lines report stream (one record per epoch).

use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::batch::FeatureBatch;
use crate::error::{Error, Result};

/// Bins spanning `[-1, 1]` in the serialized correlation histogram.
pub const RHO_HIST_BINS: usize = 20;

#[derive(Debug, Clone, PartialEq)]
pub struct CorrelationReport {
    pub rho: DMatrix<f64>,
    pub mean_abs_offdiag: f64,
    pub epoch: usize,
}

impl CorrelationReport {
    /// Fraction of upper-triangle coefficients per bin over `[-1, 1]`.
    pub fn histogram(&self, bins: usize) -> Vec<f64> {
        let c = self.rho.nrows();
        let mut hist = vec![0.0; bins];
        if c < 2 || bins == 0 {
            return hist;
        }
        let mut total = 0usize;
        for i in 0..c {
            for j in (i + 1)..c {
                let t = (self.rho[(i, j)] + 1.0) / 2.0;
                let bin = ((t * bins as f64) as usize).min(bins - 1);
                hist[bin] += 1.0;
                total += 1;
            }
        }
        hist.iter_mut().for_each(|h| *h /= total as f64);
        hist
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SpectrumReport {
    /// Descending, non-negative; length `min(C, B)`.
    pub singular_values: Vec<f64>,
    pub epoch: usize,
}

impl SpectrumReport {
    pub fn frac_below(&self, threshold: f64) -> f64 {
        if self.singular_values.is_empty() {
            return 0.0;
        }
        let n = self.singular_values.iter().filter(|&&s| s < threshold).count();
        n as f64 / self.singular_values.len() as f64
    }

    /// Count of singular values above `tol` times the largest one.
    pub fn numerical_rank(&self, tol: f64) -> usize {
        let max = self.singular_values.first().copied().unwrap_or(0.0);
        self.singular_values.iter().filter(|&&s| s > tol * max).count()
    }
}

/// Per-batch `E` values, with the index of the first batch of each epoch.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct StabilityTrace {
    pub per_batch_e: Vec<f64>,
    pub epoch_starts: Vec<usize>,
}

impl StabilityTrace {
    pub fn push(&mut self, e: f64) {
        self.per_batch_e.push(e);
    }

    pub fn mark_epoch(&mut self) {
        self.epoch_starts.push(self.per_batch_e.len());
    }

    pub fn epoch(&self, index: usize) -> &[f64] {
        let start = self.epoch_starts.get(index).copied().unwrap_or(self.per_batch_e.len());
        let end = self
            .epoch_starts
            .get(index + 1)
            .copied()
            .unwrap_or(self.per_batch_e.len());
        &self.per_batch_e[start..end]
    }
}

/// Pearson correlation between every pair of channels (rows).
///
/// A zero-variance channel correlates 0 with every other channel and 1 with
/// itself.
pub fn ppmcc(batch: &FeatureBatch) -> Result<CorrelationReport> {
    batch.require_covariance_ready()?;
    let x = batch.matrix();
    let c = x.nrows();
    let mean = x.column_mean();
    let mut centered = x.clone();
    for mut col in centered.column_iter_mut() {
        col -= &mean;
    }
    let norms: Vec<f64> = centered.row_iter().map(|r| r.norm()).collect();
    let gram = &centered * centered.transpose();
    let mut rho = DMatrix::identity(c, c);
    let mut abs_sum = 0.0;
    for i in 0..c {
        for j in (i + 1)..c {
            let denom = norms[i] * norms[j];
            let r = if denom > 0.0 {
                (gram[(i, j)] / denom).clamp(-1.0, 1.0)
            } else {
                0.0
            };
            rho[(i, j)] = r;
            rho[(j, i)] = r;
            abs_sum += 2.0 * r.abs();
        }
    }
    let mean_abs_offdiag = if c > 1 { abs_sum / (c * (c - 1)) as f64 } else { 0.0 };
    Ok(CorrelationReport {
        rho,
        mean_abs_offdiag,
        epoch: 0,
    })
}

/// Singular values of the mean-centered batch, descending.
pub fn singular_spectrum(batch: &FeatureBatch) -> Result<SpectrumReport> {
    let x = batch.matrix();
    let mean = x.column_mean();
    let mut centered = x.clone();
    for mut col in centered.column_iter_mut() {
        col -= &mean;
    }
    let svd = centered
        .clone()
        .try_svd(false, false, f64::EPSILON, 10_000)
        .ok_or_else(|| Error::LinearAlgebra {
            message: "singular value decomposition did not converge".into(),
            condition_number: f64::INFINITY,
        })?;
    let mut singular_values: Vec<f64> = svd.singular_values.iter().map(|s| s.max(0.0)).collect();
    singular_values.sort_by(|a, b| b.total_cmp(a));
    Ok(SpectrumReport {
        singular_values,
        epoch: 0,
    })
}

/// Sum of channel variances (trace of the covariance).
pub fn stability_e(covariance: &DMatrix<f64>) -> f64 {
    covariance.trace()
}

/// Population standard deviation.
pub fn std_dev(values: &[f64]) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt()
}

/// One line of the diagnostics stream. Field names are a stable contract.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub mean_abs_offdiag: f64,
    pub rho_hist: Vec<f64>,
    pub singular_values: Vec<f64>,
    #[serde(rename = "E_per_batch")]
    pub e_per_batch: Vec<f64>,
}

impl EpochRecord {
    pub fn new(
        epoch: usize,
        correlation: Option<&CorrelationReport>,
        spectrum: Option<&SpectrumReport>,
        e_per_batch: &[f64],
    ) -> Self {
        Self {
            epoch,
            mean_abs_offdiag: correlation.map_or(0.0, |c| c.mean_abs_offdiag),
            rho_hist: correlation.map_or_else(Vec::new, |c| c.histogram(RHO_HIST_BINS)),
            singular_values: spectrum.map_or_else(Vec::new, |s| s.singular_values.clone()),
            e_per_batch: e_per_batch.to_vec(),
        }
    }
}

/// Appending writer for the JSON-lines diagnostics stream.
pub struct ReportWriter {
    path: PathBuf,
    out: BufWriter<File>,
}

impl ReportWriter {
    /// Opens `path` for appending, creating it if needed.
    pub fn open(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref().to_path_buf();
        let file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(&path)
            .map_err(|e| Error::io(&path, e))?;
        Ok(Self {
            path,
            out: BufWriter::new(file),
        })
    }

    pub fn write(&mut self, record: &EpochRecord) -> Result<()> {
        serde_json::to_writer(&mut self.out, record)?;
        self.out
            .write_all(b"\n")
            .and_then(|_| self.out.flush())
            .map_err(|e| Error::io(&self.path, e))
    }
}

/// Appends one record per epoch to the report at `path`.
pub fn emit_report(records: &[EpochRecord], path: impl AsRef<Path>) -> Result<()> {
    let mut writer = ReportWriter::open(path)?;
    records.iter().try_for_each(|r| writer.write(r))
}

pub fn load_report(path: impl AsRef<Path>) -> Result<Vec<EpochRecord>> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut records = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let record = serde_json::from_str(&line).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            message: e.to_string(),
        })?;
        records.push(record);
    }
    Ok(records)
}
