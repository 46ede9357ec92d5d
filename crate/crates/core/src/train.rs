//! Interleaved training: random-sampler steps with GRBS batches embedded every
//! `T` iterations (BET), evaluation and checkpointing.

use std::fs;
use std::path::Path;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::batch::FeatureBatch;
use crate::dataset::Dataset;
use crate::diagnostics::{self, EpochRecord, ReportWriter};
use crate::error::{Error, Result};
use crate::nn::{cross_entropy, Model, ModelConfig, Sgd};
use crate::whitening;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SamplerKind {
    #[default]
    Random,
    ClassBalanced,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Fractions of `epochs` at which the learning rate is multiplied by
    /// `lr_decay_factor`.
    pub lr_decay_at: Vec<f64>,
    pub lr_decay_factor: f64,
    /// Base sampler for the main stream.
    pub sampler: SamplerKind,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 0.1,
            momentum: 0.9,
            weight_decay: 2e-4,
            batch_size: 128,
            epochs: 200,
            lr_decay_at: vec![0.8, 0.9],
            lr_decay_factor: 0.1,
            sampler: SamplerKind::Random,
        }
    }
}

impl TrainConfig {
    pub fn problems(&self) -> Vec<String> {
        let mut p = Vec::new();
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            p.push(format!("train.lr must be positive, got {}", self.lr));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            p.push(format!("train.momentum must lie in [0, 1), got {}", self.momentum));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            p.push(format!(
                "train.weight_decay must be non-negative, got {}",
                self.weight_decay
            ));
        }
        if self.batch_size < 2 {
            p.push(format!("train.batch_size must be at least 2, got {}", self.batch_size));
        }
        if self.epochs == 0 {
            p.push("train.epochs must be positive".into());
        }
        if !(self.lr_decay_factor > 0.0 && self.lr_decay_factor <= 1.0) {
            p.push(format!(
                "train.lr_decay_factor must lie in (0, 1], got {}",
                self.lr_decay_factor
            ));
        }
        if self.lr_decay_at.iter().any(|f| !(0.0..=1.0).contains(f)) {
            p.push("train.lr_decay_at entries must be fractions in [0, 1]".into());
        }
        p
    }

    /// Learning rate for a zero-based epoch.
    pub fn lr_at_epoch(&self, epoch: usize) -> f64 {
        let decays = self
            .lr_decay_at
            .iter()
            .filter(|&&f| epoch >= (f * self.epochs as f64).round() as usize)
            .count();
        self.lr * self.lr_decay_factor.powi(decays as i32)
    }
}

/// `T` (interval), `T1` (random-sampler iterations) and `T2` (GRBS
/// iterations per injection).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BetSchedule {
    pub interval: usize,
    pub random_iters: usize,
    pub grbs_iters: usize,
}

impl BetSchedule {
    pub fn new(interval: usize, random_iters: usize, grbs_iters: usize) -> Result<Self> {
        if interval == 0 || grbs_iters == 0 || random_iters == 0 {
            return Err(Error::InvalidArgument(format!(
                "BET schedule needs T >= 1, T1 >= 1, T2 >= 1 (got T={interval}, T1={random_iters}, T2={grbs_iters})"
            )));
        }
        Ok(Self {
            interval,
            random_iters,
            grbs_iters,
        })
    }

    /// Schedule without GRBS injections.
    pub fn plain(random_iters: usize) -> Self {
        Self {
            interval: random_iters + 1,
            random_iters,
            grbs_iters: 1,
        }
    }

    pub fn injections(&self) -> usize {
        self.random_iters / self.interval
    }

    /// `T1 + ⌊T1/T⌋·T2`
    pub fn total_steps(&self) -> usize {
        self.random_iters + self.injections() * self.grbs_iters
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StepMode {
    Random,
    Grbs,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepOutcome {
    pub loss: f64,
    /// Covariance trace of the pre-whitening features of this batch.
    pub e: f64,
    pub degenerate_pairs: usize,
}

/// Forward, loss, backward and one SGD update on a `D × B` batch. Whitening
/// running statistics are refreshed after the update.
pub fn train_step(
    model: &mut Model,
    opt: &mut Sgd,
    x: &DMatrix<f64>,
    labels: &[usize],
    lr: f64,
) -> Result<StepOutcome> {
    if labels.is_empty() || x.ncols() != labels.len() {
        return Err(Error::InvalidArgument(format!(
            "batch has {} samples and {} labels",
            x.ncols(),
            labels.len()
        )));
    }
    let trace = model.forward_train(x)?;
    let (loss, grad_logits) = cross_entropy(&trace.logits, labels);
    if !loss.is_finite() {
        return Err(Error::NanLoss {
            step: 0,
            dump: batch_dump(x, &trace.features, &trace.logits),
        });
    }
    let (grads, degenerate_pairs) = model.backward(&trace, &grad_logits)?;
    opt.step(model, &grads, lr);
    if let Some(state) = &mut model.whitening {
        whitening::update_running_stats(state);
    }
    if !model.is_finite() {
        return Err(Error::NanLoss {
            step: 0,
            dump: format!(
                "parameters became non-finite; {}",
                batch_dump(x, &trace.features, &trace.logits)
            ),
        });
    }
    Ok(StepOutcome {
        loss,
        e: feature_variance_sum(&trace.features),
        degenerate_pairs,
    })
}

/// `E` of a channel-major feature matrix (1/B divisor, no ε).
pub fn feature_variance_sum(z: &DMatrix<f64>) -> f64 {
    let b = z.ncols() as f64;
    z.row_iter()
        .map(|r| {
            let m = r.sum() / b;
            r.iter().map(|v| (v - m).powi(2)).sum::<f64>() / b
        })
        .sum()
}

fn batch_dump(x: &DMatrix<f64>, z: &DMatrix<f64>, logits: &DMatrix<f64>) -> String {
    let stats = |m: &DMatrix<f64>| {
        let finite: Vec<f64> = m.iter().copied().filter(|v| v.is_finite()).collect();
        let (lo, hi) = finite.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
            (lo.min(v), hi.max(v))
        });
        format!(
            "{}x{} min={lo:e} max={hi:e} non_finite={}",
            m.nrows(),
            m.ncols(),
            m.len() - finite.len()
        )
    };
    format!(
        "input[{}] features[{}] logits[{}] E={:e}",
        stats(x),
        stats(z),
        stats(logits),
        feature_variance_sum(z)
    )
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub mode: StepMode,
    pub epoch: usize,
    pub loss: f64,
    pub e: f64,
}

#[derive(Debug, Clone, Default)]
pub struct RunOutput {
    pub steps: Vec<StepRecord>,
    pub records: Vec<EpochRecord>,
    pub degenerate_pairs: usize,
}

impl RunOutput {
    pub fn random_steps(&self) -> usize {
        self.steps.iter().filter(|s| s.mode == StepMode::Random).count()
    }

    pub fn grbs_steps(&self) -> usize {
        self.steps.iter().filter(|s| s.mode == StepMode::Grbs).count()
    }

    /// Mean loss over the steps of the last epoch.
    pub fn final_epoch_loss(&self) -> f64 {
        let Some(last) = self.steps.last().map(|s| s.epoch) else {
            return f64::NAN;
        };
        let losses: Vec<f64> = self.steps.iter().filter(|s| s.epoch == last).map(|s| s.loss).collect();
        losses.iter().sum::<f64>() / losses.len() as f64
    }

    pub fn e_trace(&self) -> Vec<f64> {
        self.steps.iter().map(|s| s.e).collect()
    }
}

/// Loop bookkeeping that is not part of the schedule.
#[derive(Default)]
pub struct RunOptions<'a> {
    /// Random-sampler iterations per epoch; epochs close every this many
    /// random steps.
    pub iters_per_epoch: usize,
    /// Training samples used for the per-epoch correlation and spectrum probe.
    pub probe: Vec<usize>,
    pub report: Option<&'a mut ReportWriter>,
}

pub type BatchStream<'a> = dyn Iterator<Item = Vec<usize>> + 'a;

/// Runs `T1` random-stream steps; after every `T`-th of them runs `T2`
/// GRBS-stream steps. One diagnostics record is produced per epoch.
pub fn run_bet(
    model: &mut Model,
    data: &Dataset,
    random_stream: &mut BatchStream<'_>,
    mut grbs_stream: Option<&mut BatchStream<'_>>,
    schedule: &BetSchedule,
    config: &TrainConfig,
    options: RunOptions<'_>,
) -> Result<RunOutput> {
    if schedule.injections() > 0 && grbs_stream.is_none() {
        return Err(Error::InvalidArgument(
            "schedule injects GRBS batches but no GRBS stream was given".into(),
        ));
    }
    let iters_per_epoch = options.iters_per_epoch.max(1);
    let mut report = options.report;
    let mut opt = Sgd::new(model, config.momentum, config.weight_decay);
    let mut out = RunOutput::default();
    let expected = schedule.total_steps();
    let mut epoch_start = 0;

    let step = |model: &mut Model,
                opt: &mut Sgd,
                out: &mut RunOutput,
                indices: Option<Vec<usize>>,
                mode: StepMode,
                epoch: usize|
     -> Result<()> {
        let completed = out.steps.len();
        let indices = indices.ok_or(Error::StreamExhausted { completed, expected })?;
        let (x, y) = data.gather(&indices);
        let outcome = train_step(model, opt, &x, &y, config.lr_at_epoch(epoch)).map_err(|e| match e {
            Error::NanLoss { dump, .. } => Error::NanLoss { step: completed, dump },
            other => other,
        })?;
        out.degenerate_pairs += outcome.degenerate_pairs;
        out.steps.push(StepRecord {
            mode,
            epoch,
            loss: outcome.loss,
            e: outcome.e,
        });
        Ok(())
    };

    for t1 in 1..=schedule.random_iters {
        let epoch = (t1 - 1) / iters_per_epoch;
        step(model, &mut opt, &mut out, random_stream.next(), StepMode::Random, epoch)?;
        if t1 % schedule.interval == 0 {
            let grbs = grbs_stream.as_deref_mut().expect("checked above");
            for _ in 0..schedule.grbs_iters {
                step(model, &mut opt, &mut out, grbs.next(), StepMode::Grbs, epoch)?;
            }
        }
        if t1 % iters_per_epoch == 0 || t1 == schedule.random_iters {
            let e_values: Vec<f64> = out.steps[epoch_start..].iter().map(|s| s.e).collect();
            epoch_start = out.steps.len();
            let record = epoch_record(model, data, &options.probe, epoch, &e_values)?;
            if let Some(writer) = report.as_deref_mut() {
                writer.write(&record)?;
            }
            out.records.push(record);
        }
    }
    Ok(out)
}

fn epoch_record(model: &Model, data: &Dataset, probe: &[usize], epoch: usize, e_values: &[f64]) -> Result<EpochRecord> {
    if probe.len() < 2 {
        return Ok(EpochRecord::new(epoch, None, None, e_values));
    }
    let batch = FeatureBatch::new(probe_features(model, data, probe)?)?;
    let mut corr = diagnostics::ppmcc(&batch)?;
    corr.epoch = epoch;
    let mut spectrum = diagnostics::singular_spectrum(&batch)?;
    spectrum.epoch = epoch;
    Ok(EpochRecord::new(epoch, Some(&corr), Some(&spectrum), e_values))
}

/// Classifier-input features of the given training samples, whitened with
/// the probe's own batch statistics when whitening is enabled.
pub fn probe_features(model: &Model, data: &Dataset, probe: &[usize]) -> Result<DMatrix<f64>> {
    let (x, _) = data.gather(probe);
    model.probe_classifier_input(&x)
}

/// Training-count thresholds for the many/medium/few-shot splits.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ShotThresholds {
    /// Classes with more training samples than this are many-shot.
    pub many_above: usize,
    /// Classes with fewer training samples than this are few-shot.
    pub few_below: usize,
}

impl Default for ShotThresholds {
    fn default() -> Self {
        Self {
            many_above: 100,
            few_below: 20,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub overall: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub many: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub medium: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub few: Option<f64>,
    /// `null` for classes absent from the test set.
    pub per_class: Vec<Option<f64>>,
}

/// Accuracy overall, per class and per shot split. A split with no test
/// samples is reported as absent.
pub fn evaluate(model: &Model, test: &Dataset, train_counts: &[usize], thresholds: &ShotThresholds) -> Result<Metrics> {
    let predictions = model.predict(&test.features)?;
    score(&predictions, &test.labels, test.num_classes, train_counts, thresholds)
}

/// Scores predictions against labels.
pub fn score(
    predictions: &[usize],
    labels: &[usize],
    num_classes: usize,
    train_counts: &[usize],
    thresholds: &ShotThresholds,
) -> Result<Metrics> {
    if labels.is_empty() || predictions.len() != labels.len() {
        return Err(Error::InvalidArgument(format!(
            "{} predictions for {} labels",
            predictions.len(),
            labels.len()
        )));
    }
    let mut correct = vec![0usize; num_classes];
    let mut total = vec![0usize; num_classes];
    for (&p, &y) in predictions.iter().zip(labels) {
        total[y] += 1;
        if p == y {
            correct[y] += 1;
        }
    }
    let overall = correct.iter().sum::<usize>() as f64 / labels.len() as f64;
    let per_class: Vec<Option<f64>> = correct
        .iter()
        .zip(&total)
        .map(|(&c, &t)| (t > 0).then(|| c as f64 / t as f64))
        .collect();
    let split = |keep: &dyn Fn(usize) -> bool| {
        let (c, t) = (0..num_classes)
            .filter(|&k| keep(train_counts.get(k).copied().unwrap_or(0)))
            .fold((0, 0), |(c, t), k| (c + correct[k], t + total[k]));
        (t > 0).then(|| c as f64 / t as f64)
    };
    Ok(Metrics {
        overall,
        many: split(&|n| n > thresholds.many_above),
        medium: split(&|n| n >= thresholds.few_below && n <= thresholds.many_above),
        few: split(&|n| n < thresholds.few_below),
        per_class,
    })
}

pub const CHECKPOINT_FORMAT: &str = "whitenet-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Channel-major dump of classifier-input features.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureDump {
    pub channels: usize,
    pub samples: usize,
    /// Row-major, `channels × samples`.
    pub data: Vec<f64>,
}

impl FeatureDump {
    pub fn from_matrix(m: &DMatrix<f64>) -> Self {
        Self {
            channels: m.nrows(),
            samples: m.ncols(),
            data: m.transpose().as_slice().to_vec(),
        }
    }

    pub fn to_batch(&self) -> Result<FeatureBatch> {
        FeatureBatch::from_row_slice(self.channels, self.samples, &self.data)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub config_hash: String,
    /// SHA-256 of the serialized `model`.
    pub checksum: String,
    pub model: Model,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub feature_dump: Option<FeatureDump>,
}

impl Checkpoint {
    pub fn new(model: Model, config_hash: String, feature_dump: Option<FeatureDump>) -> Result<Self> {
        let checksum = model_checksum(&model)?;
        Ok(Self {
            format: CHECKPOINT_FORMAT.into(),
            version: CHECKPOINT_VERSION,
            config_hash,
            checksum,
            model,
            feature_dump,
        })
    }

    /// Releases the model after checking it matches the architecture an
    /// evaluation expects.
    pub fn into_model_for(self, config: &ModelConfig) -> Result<Model> {
        let model = self.model;
        match (config.whitening.enabled, model.whitening.is_some()) {
            (true, false) => {
                return Err(Error::ConfigMismatch(
                    "checkpoint was trained without whitening but whitening is enabled".into(),
                ))
            }
            (false, true) => {
                return Err(Error::ConfigMismatch(
                    "checkpoint was trained with whitening but whitening is disabled".into(),
                ))
            }
            _ => {}
        }
        if model.feature_dim() != config.feature_dim {
            return Err(Error::ConfigMismatch(format!(
                "checkpoint feature dim {} differs from configured {}",
                model.feature_dim(),
                config.feature_dim
            )));
        }
        if model.activation != config.activation || model.backbone.len() != config.hidden.len() + 1 {
            return Err(Error::ConfigMismatch(
                "checkpoint backbone differs from configuration".into(),
            ));
        }
        Ok(model)
    }
}

fn model_checksum(model: &Model) -> Result<String> {
    let bytes = serde_json::to_vec(model)?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

pub fn save_checkpoint(checkpoint: &Checkpoint, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes = serde_json::to_vec(checkpoint)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Loads and verifies a checkpoint; never returns a partially read model.
pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let header: serde_json::Value = serde_json::from_slice(&bytes)
        .map_err(|e| Error::Checkpoint(format!("{}: unreadable or truncated: {e}", path.display())))?;
    if header.get("format").and_then(|v| v.as_str()) != Some(CHECKPOINT_FORMAT) {
        return Err(Error::Checkpoint(format!(
            "{}: not a whitenet checkpoint",
            path.display()
        )));
    }
    let version = header.get("version").and_then(|v| v.as_u64());
    if version != Some(CHECKPOINT_VERSION as u64) {
        return Err(Error::Checkpoint(format!(
            "{}: unsupported checkpoint version {version:?}, expected {CHECKPOINT_VERSION}",
            path.display()
        )));
    }
    let checkpoint: Checkpoint =
        serde_json::from_value(header).map_err(|e| Error::Checkpoint(format!("{}: malformed: {e}", path.display())))?;
    if model_checksum(&checkpoint.model)? != checkpoint.checksum {
        return Err(Error::Checkpoint(format!("{}: checksum mismatch", path.display())));
    }
    Ok(checkpoint)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_arithmetic() {
        let s = BetSchedule::new(60, 120, 10).unwrap();
        assert_eq!(s.injections(), 2);
        assert_eq!(s.total_steps(), 140);
        let idle = BetSchedule::new(200, 120, 10).unwrap();
        assert_eq!(idle.total_steps(), 120);
        assert_eq!(BetSchedule::plain(57).total_steps(), 57);
        assert!(BetSchedule::new(0, 10, 1).is_err());
    }

    #[test]
    fn lr_milestones() {
        let cfg = TrainConfig::default();
        assert_eq!(cfg.lr_at_epoch(0), 0.1);
        assert_eq!(cfg.lr_at_epoch(159), 0.1);
        assert!((cfg.lr_at_epoch(160) - 0.01).abs() < 1e-15);
        assert!((cfg.lr_at_epoch(199) - 0.001).abs() < 1e-15);
    }

    #[test]
    fn constant_prediction_scores_one_over_n() {
        let labels: Vec<usize> = (0..4).flat_map(|k| [k; 5]).collect();
        let m = score(&[0; 20], &labels, 4, &[500, 50, 50, 5], &ShotThresholds::default()).unwrap();
        assert_eq!(m.overall, 0.25);
        assert_eq!(m.many, Some(1.0));
        assert_eq!(m.medium, Some(0.0));
        assert_eq!(m.few, Some(0.0));
    }

    #[test]
    fn empty_split_is_absent() {
        let labels = vec![0, 1];
        let m = score(&labels, &labels, 2, &[500, 200], &ShotThresholds::default()).unwrap();
        assert_eq!(m.overall, 1.0);
        assert_eq!(m.medium, None);
        assert_eq!(m.few, None);
        let json = serde_json::to_string(&m).unwrap();
        assert!(!json.contains("few"));
    }

    #[test]
    fn config_problems() {
        let cfg = TrainConfig {
            lr: 0.0,
            lr_decay_factor: 1.5,
            ..Default::default()
        };
        assert_eq!(cfg.problems().len(), 2);
    }
}
