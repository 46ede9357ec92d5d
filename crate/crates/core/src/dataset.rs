//! Synthetic long-tailed datasets and a plain CSV loader.

use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::sampler::{count_labels, ClassInventory};

/// Labelled samples stored channel-major: column `i` holds sample `i`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub features: DMatrix<f64>,
    pub labels: Vec<usize>,
    pub num_classes: usize,
}

impl Dataset {
    pub fn new(features: DMatrix<f64>, labels: Vec<usize>, num_classes: usize) -> Result<Self> {
        if features.ncols() != labels.len() {
            return Err(Error::InvalidArgument(format!(
                "{} feature columns but {} labels",
                features.ncols(),
                labels.len()
            )));
        }
        if let Some(&l) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(Error::InvalidArgument(format!("label {l} outside 0..{num_classes}")));
        }
        Ok(Self {
            features,
            labels,
            num_classes,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn feature_dim(&self) -> usize {
        self.features.nrows()
    }

    pub fn class_counts(&self) -> Vec<usize> {
        count_labels(&self.labels, self.num_classes)
    }

    /// Classes with no samples in this split.
    pub fn missing_classes(&self) -> Vec<usize> {
        self.class_counts()
            .iter()
            .enumerate()
            .filter(|(_, &c)| c == 0)
            .map(|(i, _)| i)
            .collect()
    }

    pub fn inventory(&self) -> Result<ClassInventory> {
        ClassInventory::from_counts(&self.class_counts())
    }

    /// Gathers the given samples into a `D × B` matrix and their labels.
    pub fn gather(&self, indices: &[usize]) -> (DMatrix<f64>, Vec<usize>) {
        let x = self.features.select_columns(indices);
        let y = indices.iter().map(|&i| self.labels[i]).collect();
        (x, y)
    }
}

/// Parameters of the synthetic long-tailed generator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ImbalanceSpec {
    pub num_classes: usize,
    pub n_max: usize,
    pub gamma: f64,
    pub feature_dim: usize,
    /// Distance between class means.
    #[serde(default = "default_distance")]
    pub class_distance: f64,
    /// Balanced test samples per class.
    #[serde(default = "default_test_per_class")]
    pub test_per_class: usize,
    #[serde(default)]
    pub seed: u64,
}

fn default_distance() -> f64 {
    3.0
}

fn default_test_per_class() -> usize {
    100
}

impl ImbalanceSpec {
    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if self.num_classes < 2 {
            problems.push("dataset.num_classes must be at least 2".to_string());
        }
        if self.n_max == 0 {
            problems.push("dataset.n_max must be positive".to_string());
        }
        if !(self.gamma >= 1.0 && self.gamma.is_finite()) {
            problems.push(format!("dataset.gamma must be >= 1, got {}", self.gamma));
        }
        if self.feature_dim == 0 {
            problems.push("dataset.feature_dim must be positive".to_string());
        }
        if !(self.class_distance > 0.0 && self.class_distance.is_finite()) {
            problems.push("dataset.class_distance must be positive".to_string());
        }
        if self.test_per_class == 0 {
            problems.push("dataset.test_per_class must be positive".to_string());
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(problems))
        }
    }

    /// `count_k = round(n_max · γ^{−k/(N−1)})`, at least 1, for zero-based `k`.
    pub fn class_counts(&self) -> Vec<usize> {
        let n = self.num_classes;
        (0..n)
            .map(|k| {
                let exponent = if n > 1 { k as f64 / (n - 1) as f64 } else { 0.0 };
                ((self.n_max as f64 * self.gamma.powf(-exponent)).round() as usize).max(1)
            })
            .collect()
    }
}

/// Long-tailed training split and balanced test split.
#[derive(Debug, Clone, PartialEq)]
pub struct LongTailedData {
    pub train: Dataset,
    pub test: Dataset,
}

/// Class-conditional unit-covariance Gaussians; class 0 is the head.
///
/// Means sit at scaled simplex vertices `(d/√2)·e_k` when `N ≤ D` (pairwise
/// distance exactly `d`), otherwise at random directions on the sphere of
/// radius `d/√2`. Each class draws from its own ChaCha stream so the output
/// depends only on the seed.
pub fn generate(spec: &ImbalanceSpec) -> Result<LongTailedData> {
    spec.validate()?;
    let means = class_means(spec);
    let counts = spec.class_counts();
    let train = sample_split(spec, &means, &counts, 0)?;
    let test = sample_split(spec, &means, &vec![spec.test_per_class; spec.num_classes], 1)?;
    Ok(LongTailedData { train, test })
}

fn class_means(spec: &ImbalanceSpec) -> Vec<DVector<f64>> {
    let radius = spec.class_distance / std::f64::consts::SQRT_2;
    let d = spec.feature_dim;
    if spec.num_classes <= d {
        return (0..spec.num_classes)
            .map(|k| {
                let mut m = DVector::zeros(d);
                m[k] = radius;
                m
            })
            .collect();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(u64::MAX);
    (0..spec.num_classes)
        .map(|_| {
            let v = DVector::from_fn(d, |_, _| StandardNormal.sample(&mut rng));
            v.normalize() * radius
        })
        .collect()
}

fn sample_split(spec: &ImbalanceSpec, means: &[DVector<f64>], counts: &[usize], split: u64) -> Result<Dataset> {
    let total: usize = counts.iter().sum();
    let d = spec.feature_dim;
    let mut features = DMatrix::zeros(d, total);
    let mut labels = Vec::with_capacity(total);
    let mut col = 0;
    for (k, (&count, mean)) in counts.iter().zip(means).enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        rng.set_stream(2 * k as u64 + split);
        for _ in 0..count {
            for r in 0..d {
                let z: f64 = StandardNormal.sample(&mut rng);
                features[(r, col)] = mean[r] + z;
            }
            labels.push(k);
            col += 1;
        }
    }
    Dataset::new(features, labels, spec.num_classes)
}

/// Reads rows of `label, f1, …, fD`. The class count is inferred from the
/// largest label unless given; labels outside `0..num_classes` are errors.
pub fn load_tabular(path: impl AsRef<Path>, num_classes: Option<usize>) -> Result<Dataset> {
    let path = path.as_ref();
    let parse_err = |line: usize, message: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        message,
    };
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .trim(csv::Trim::All)
        .comment(Some(b'#'))
        .from_path(path)
        .map_err(|e| match e.into_kind() {
            csv::ErrorKind::Io(io) => Error::io(path, io),
            other => parse_err(0, format!("{other:?}")),
        })?;

    let mut labels = Vec::new();
    let mut values = Vec::new();
    let mut dim: Option<usize> = None;
    for record in reader.records() {
        let record = record.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line() as usize);
            parse_err(line, e.to_string())
        })?;
        let line = record.position().map_or(0, |p| p.line() as usize);
        if record.len() < 2 {
            return Err(parse_err(line, "expected a label and at least one feature".into()));
        }
        let width = record.len() - 1;
        match dim {
            None => dim = Some(width),
            Some(d) if d != width => {
                return Err(parse_err(line, format!("ragged row: {width} features, expected {d}")))
            }
            _ => {}
        }
        let label: usize = record[0]
            .parse()
            .map_err(|_| parse_err(line, format!("invalid label {:?}", &record[0])))?;
        if let Some(n) = num_classes {
            if label >= n {
                return Err(parse_err(line, format!("unknown label {label} (expected < {n})")));
            }
        }
        labels.push(label);
        for field in record.iter().skip(1) {
            let v: f64 = field
                .parse()
                .map_err(|_| parse_err(line, format!("non-numeric field {field:?}")))?;
            if !v.is_finite() {
                return Err(parse_err(line, format!("non-finite field {field:?}")));
            }
            values.push(v);
        }
    }
    let Some(d) = dim else {
        return Err(parse_err(0, "file contains no samples".into()));
    };
    let n = num_classes.unwrap_or_else(|| labels.iter().max().map_or(0, |m| m + 1));
    let features = DMatrix::from_column_slice(d, labels.len(), &values);
    Dataset::new(features, labels, n)
}

pub fn write_tabular(dataset: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut writer = csv::Writer::from_path(path).map_err(|e| csv_write_err(path, e))?;
    for (i, label) in dataset.labels.iter().enumerate() {
        let mut row = vec![label.to_string()];
        row.extend(dataset.features.column(i).iter().map(|v| v.to_string()));
        writer.write_record(&row).map_err(|e| csv_write_err(path, e))?;
    }
    writer.flush().map_err(|e| Error::io(path, e))
}

fn csv_write_err(path: &Path, e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::io(path, std::io::Error::other(format!("{other:?}"))),
    }
}
