//! Config-driven runs: data, model, samplers and schedule assembled from an
//! [`ExperimentConfig`], and the run-directory layout.

use std::fs;
use std::path::Path;

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::{DatasetSource, ExperimentConfig};
use crate::dataset::{self, Dataset, LongTailedData};
use crate::diagnostics::ReportWriter;
use crate::error::{Error, Result};
use crate::nn::Model;
use crate::sampler::{self, ClassBalancedSampler, ClassInventory, GrbsSampler, GroupPlan, RandomSampler};
use crate::train::{self, BetSchedule, Checkpoint, FeatureDump, Metrics, RunOptions, RunOutput, SamplerKind};

pub const CONFIG_FILE: &str = "config.json";
pub const CONFIG_HASH_FILE: &str = "config.sha256";
pub const METRICS_FILE: &str = "metrics.json";
pub const DIAGNOSTICS_FILE: &str = "diagnostics.jsonl";
pub const CHECKPOINT_FILE: &str = "checkpoint.json";
pub const FEATURES_FILE: &str = "features.csv";

/// Rows of the ablation lattice.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Variant {
    Erm,
    Whitening,
    /// GRBS replaces the random sampler entirely.
    WhiteningGrbs,
    WhiteningGrbsBet,
}

impl Variant {
    pub const ALL: [Variant; 4] = [
        Variant::Erm,
        Variant::Whitening,
        Variant::WhiteningGrbs,
        Variant::WhiteningGrbsBet,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Erm => "erm",
            Variant::Whitening => "whitening",
            Variant::WhiteningGrbs => "whitening_grbs",
            Variant::WhiteningGrbsBet => "whitening_grbs_bet",
        }
    }

    /// Sets the toggles of `config` for this variant.
    pub fn apply(self, config: &mut ExperimentConfig) {
        let (whitening, grbs, bet) = match self {
            Variant::Erm => (false, false, false),
            Variant::Whitening => (true, false, false),
            Variant::WhiteningGrbs => (true, true, false),
            Variant::WhiteningGrbsBet => (true, true, true),
        };
        config.model.whitening.enabled = whitening;
        config.grbs.enabled = grbs;
        config.bet.enabled = bet;
        config.train.sampler = SamplerKind::Random;
    }
}

#[derive(Debug, Clone)]
pub struct ExperimentResult {
    pub metrics: Metrics,
    pub run: RunOutput,
    pub model: Model,
    pub plan: Option<GroupPlan>,
    pub schedule: BetSchedule,
    /// Classifier-input features of the probe after training.
    pub features: FeatureDump,
    pub config_hash: String,
    pub train_counts: Vec<usize>,
}

pub fn load_data(config: &ExperimentConfig, base_dir: &Path) -> Result<LongTailedData> {
    match &config.dataset {
        DatasetSource::Synthetic(s) => dataset::generate(&s.to_spec(config.seed)),
        DatasetSource::Tabular { train, test } => {
            let train = dataset::load_tabular(base_dir.join(train), None)?;
            let test = dataset::load_tabular(base_dir.join(test), Some(train.num_classes))?;
            if test.feature_dim() != train.feature_dim() {
                return Err(Error::Config(vec![format!(
                    "dataset: test feature dim {} differs from train {}",
                    test.feature_dim(),
                    train.feature_dim()
                )]));
            }
            let missing = train.missing_classes();
            if !missing.is_empty() {
                return Err(Error::Config(vec![format!(
                    "dataset.tabular.train: classes {missing:?} have no samples"
                )]));
            }
            Ok(LongTailedData { train, test })
        }
    }
}

/// GRBS plan for the training split.
pub fn build_plan(config: &ExperimentConfig, train: &Dataset) -> Result<GroupPlan> {
    let inventory = ClassInventory::from_counts(&train.class_counts())?;
    sampler::plan_grbs(&inventory, &config.grbs.params(), config.train.batch_size)
        .map_err(|e| Error::Config(vec![format!("grbs: {e}")]))
}

fn derived_seed(seed: u64, stream: u64) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15)
        .wrapping_add(stream.wrapping_mul(0xD1B5_4A32_D192_ED03))
        ^ stream
}

/// Runs one experiment in memory, optionally streaming diagnostics.
pub fn run_experiment(
    config: &ExperimentConfig,
    base_dir: &Path,
    report: Option<&mut ReportWriter>,
) -> Result<ExperimentResult> {
    config.validate(base_dir)?;
    let data = load_data(config, base_dir)?;
    run_on_data(config, &data, report)
}

/// As [`run_experiment`] with the data supplied.
pub fn run_on_data(
    config: &ExperimentConfig,
    data: &LongTailedData,
    report: Option<&mut ReportWriter>,
) -> Result<ExperimentResult> {
    let train_set = &data.train;
    let batch = config.train.batch_size;
    let mut model = Model::new(
        train_set.feature_dim(),
        train_set.num_classes,
        &config.model,
        derived_seed(config.seed, 1),
    )?;

    let mut base: Box<dyn Iterator<Item = Vec<usize>>> = match config.train.sampler {
        SamplerKind::Random => Box::new(RandomSampler::new(
            train_set.len(),
            batch,
            derived_seed(config.seed, 2),
        )?),
        SamplerKind::ClassBalanced => Box::new(ClassBalancedSampler::new(
            &train_set.labels,
            train_set.num_classes,
            batch,
            derived_seed(config.seed, 2),
        )?),
    };
    let iters_per_epoch = (train_set.len() / batch).max(1);
    let random_iters = config.train.epochs * iters_per_epoch;

    let plan = if config.grbs.enabled {
        Some(build_plan(config, train_set)?)
    } else {
        None
    };
    let mut grbs: Option<GrbsSampler> = plan
        .as_ref()
        .map(|p| GrbsSampler::new(p, &train_set.labels, derived_seed(config.seed, 3)))
        .transpose()?;

    let schedule = match (&plan, config.bet.enabled) {
        (Some(p), true) => BetSchedule::new(
            config.bet.interval,
            random_iters,
            config.bet.grbs_iters.unwrap_or(p.num_groups),
        )?,
        _ => BetSchedule::plain(random_iters),
    };
    if plan.is_some() && !config.bet.enabled {
        base = Box::new(grbs.take().expect("plan implies sampler"));
    }

    let probe = if config.probe_size >= 2 {
        let mut rng = ChaCha8Rng::seed_from_u64(derived_seed(config.seed, 4));
        let n = config.probe_size.min(train_set.len());
        let mut idx = index::sample(&mut rng, train_set.len(), n).into_vec();
        idx.sort_unstable();
        idx
    } else {
        Vec::new()
    };

    let options = RunOptions {
        iters_per_epoch,
        probe: probe.clone(),
        report,
    };
    let grbs_stream = grbs.as_mut().map(|g| g as &mut train::BatchStream<'_>);
    let run = train::run_bet(
        &mut model,
        train_set,
        base.as_mut(),
        grbs_stream,
        &schedule,
        &config.train,
        options,
    )?;

    let train_counts = train_set.class_counts();
    let metrics = train::evaluate(&model, &data.test, &train_counts, &config.evaluation)?;
    let features = if probe.len() >= 2 {
        train::probe_features(&model, train_set, &probe)?
    } else {
        let (x, _) = train_set.gather(&(0..train_set.len().min(2)).collect::<Vec<_>>());
        model.probe_classifier_input(&x)?
    };
    Ok(ExperimentResult {
        metrics,
        run,
        model,
        plan,
        schedule,
        features: FeatureDump::from_matrix(&features),
        config_hash: config.hash()?,
        train_counts,
    })
}

/// Runs an experiment and writes the run directory: config copy and hash,
/// diagnostics stream, metrics, checkpoint and the probe feature dump.
pub fn run_to_dir(config: &ExperimentConfig, base_dir: &Path, out_dir: &Path) -> Result<ExperimentResult> {
    config.validate(base_dir)?;
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let write = |name: &str, contents: &[u8]| {
        let path = out_dir.join(name);
        fs::write(&path, contents).map_err(|e| Error::io(&path, e))
    };
    write(CONFIG_FILE, config.to_json()?.as_bytes())?;
    write(CONFIG_HASH_FILE, format!("{}\n", config.hash()?).as_bytes())?;

    let diag_path = out_dir.join(DIAGNOSTICS_FILE);
    if diag_path.exists() {
        fs::remove_file(&diag_path).map_err(|e| Error::io(&diag_path, e))?;
    }
    let mut writer = ReportWriter::open(&diag_path)?;
    let result = run_experiment(config, base_dir, Some(&mut writer))?;

    let mut metrics = serde_json::to_string_pretty(&result.metrics)?;
    metrics.push('\n');
    write(METRICS_FILE, metrics.as_bytes())?;
    let checkpoint = Checkpoint::new(
        result.model.clone(),
        result.config_hash.clone(),
        Some(result.features.clone()),
    )?;
    train::save_checkpoint(&checkpoint, out_dir.join(CHECKPOINT_FILE))?;
    write_feature_csv(&result.features, &out_dir.join(FEATURES_FILE))?;
    Ok(result)
}

/// Writes a `C × B` dump as CSV, one channel per row.
pub fn write_feature_csv(dump: &FeatureDump, path: &Path) -> Result<()> {
    let mut text = String::new();
    for row in dump.data.chunks(dump.samples.max(1)) {
        let line: Vec<String> = row.iter().map(|v| v.to_string()).collect();
        text.push_str(&line.join(","));
        text.push('\n');
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}
