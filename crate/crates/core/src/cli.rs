//! `whitenet` command line: `train`, `sample-plan` and `diagnose`.
//!
//! Exit codes: 0 success, 1 I/O or other failure, 2 invalid configuration or
//! input, 3 numerical abort.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use serde::Serialize;

use crate::batch::FeatureBatch;
use crate::config::ExperimentConfig;
use crate::diagnostics::{self, RHO_HIST_BINS};
use crate::error::Error;
use crate::experiment;
use crate::train::{self, CHECKPOINT_FORMAT};
use crate::whitening::{self, CovarianceDivisor};

pub const EXIT_OK: i32 = 0;
pub const EXIT_FAILURE: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_NUMERICAL: i32 = 3;

#[derive(Debug, Parser)]
#[command(
    name = "whitenet",
    version,
    about = "Whitening and balanced-sampling experiments for imbalanced classification"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train per a JSON experiment config and write a run directory.
    Train {
        config: PathBuf,
        /// Overrides the config seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Overrides the config output directory.
        #[arg(long)]
        out_dir: Option<PathBuf>,
    },
    /// Print the GRBS group plan the config would use.
    SamplePlan {
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        /// Write the plan JSON here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Correlation, spectrum and covariance trace of a C×B feature dump
    /// (CSV, one channel per row, or a checkpoint with a feature dump).
    Diagnose {
        features: PathBuf,
        /// Write the report JSON here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

/// Output of `diagnose`.
#[derive(Debug, Clone, Serialize)]
pub struct DiagnoseReport {
    pub channels: usize,
    pub samples: usize,
    pub mean_abs_offdiag: f64,
    pub rho_hist: Vec<f64>,
    pub singular_values: Vec<f64>,
    #[serde(rename = "E")]
    pub e: f64,
}

pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Config(_)
        | Error::ConfigMismatch(_)
        | Error::Parse { .. }
        | Error::InvalidArgument(_)
        | Error::NumericalInput(_)
        | Error::Json(_) => EXIT_CONFIG,
        Error::NanLoss { .. } | Error::LinearAlgebra { .. } => EXIT_NUMERICAL,
        _ => EXIT_FAILURE,
    }
}

/// Runs a parsed command, printing errors to stderr, and returns the exit code.
pub fn run(cli: Cli) -> i32 {
    let result = match cli.command {
        Command::Train { config, seed, out_dir } => cmd_train(&config, seed, out_dir.as_deref()),
        Command::SamplePlan { config, seed, out } => cmd_sample_plan(&config, seed, out.as_deref()),
        Command::Diagnose { features, out } => cmd_diagnose(&features, out.as_deref()),
    };
    match result {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

/// Writes to stdout; a closed reader (e.g. `| head`) is not an error.
fn emit(text: &str) -> crate::Result<()> {
    let mut stdout = std::io::stdout().lock();
    match stdout.write_all(text.as_bytes()).and_then(|()| stdout.flush()) {
        Err(e) if e.kind() != std::io::ErrorKind::BrokenPipe => Err(Error::io("<stdout>", e)),
        _ => Ok(()),
    }
}

fn load_config(path: &Path, seed: Option<u64>) -> crate::Result<(ExperimentConfig, PathBuf)> {
    let mut config = ExperimentConfig::load(path)?;
    if let Some(s) = seed {
        config.seed = s;
    }
    let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
    config.validate(&base)?;
    Ok((config, base))
}

pub fn cmd_train(config_path: &Path, seed: Option<u64>, out_dir: Option<&Path>) -> crate::Result<()> {
    let (mut config, base) = load_config(config_path, seed)?;
    if let Some(dir) = out_dir {
        config.output_dir = Some(dir.to_path_buf());
    }
    let out = match &config.output_dir {
        Some(dir) if dir.is_relative() && out_dir.is_none() => base.join(dir),
        Some(dir) => dir.clone(),
        None => return Err(Error::Config(vec!["output_dir: required (or pass --out-dir)".into()])),
    };
    let result = experiment::run_to_dir(&config, &base, &out)?;
    let m = &result.metrics;
    let fmt = |v: Option<f64>| v.map_or_else(|| "-".to_string(), |x| format!("{x:.4}"));
    emit(&format!(
        "overall={:.4} many={} medium={} few={} steps={} -> {}\n",
        m.overall,
        fmt(m.many),
        fmt(m.medium),
        fmt(m.few),
        result.run.steps.len(),
        out.display()
    ))
}

pub fn cmd_sample_plan(config_path: &Path, seed: Option<u64>, out: Option<&Path>) -> crate::Result<()> {
    let (config, base) = load_config(config_path, seed)?;
    let data = experiment::load_data(&config, &base)?;
    let plan = experiment::build_plan(&config, &data.train)?;
    let json = plan.to_json()?;
    let mut audit = String::new();
    audit.push_str(&format!(
        "r_min={} S={} S0={}\n",
        plan.r_min, plan.scale, plan.scale_threshold
    ));
    for (i, g) in plan.groups.iter().enumerate() {
        let sum: f64 = g.probs.iter().sum();
        audit.push_str(&format!(
            "group {}: classes={} F'={} sum_r={sum:.12}{}\n",
            i + 1,
            g.len(),
            g.boosted,
            if g.degenerate { " degenerate" } else { "" }
        ));
    }
    match out {
        Some(path) => {
            fs::write(path, json + "\n").map_err(|e| Error::io(path, e))?;
            emit(&audit)
        }
        None => {
            eprint!("{audit}");
            emit(&format!("{json}\n"))
        }
    }
}

/// Reads a feature dump: a checkpoint container with a feature-dump section,
/// or CSV with one channel per row.
pub fn load_feature_dump(path: &Path) -> crate::Result<FeatureBatch> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    if text.trim_start().starts_with('{') {
        let checkpoint = train::load_checkpoint(path).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: 0,
            message: e.to_string(),
        })?;
        let dump = checkpoint.feature_dump.ok_or_else(|| Error::Parse {
            path: path.to_path_buf(),
            line: 0,
            message: format!("{CHECKPOINT_FORMAT} has no feature dump"),
        })?;
        return dump.to_batch();
    }
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let row = line
            .split(',')
            .map(|f| f.trim().parse::<f64>())
            .collect::<Result<Vec<_>, _>>()
            .map_err(|e| Error::Parse {
                path: path.to_path_buf(),
                line: i + 1,
                message: e.to_string(),
            })?;
        if let Some(first) = rows.first() {
            if first.len() != row.len() {
                return Err(Error::Parse {
                    path: path.to_path_buf(),
                    line: i + 1,
                    message: format!("ragged row: {} values, expected {}", row.len(), first.len()),
                });
            }
        }
        rows.push(row);
    }
    if rows.is_empty() {
        return Err(Error::Parse {
            path: path.to_path_buf(),
            line: 0,
            message: "empty feature dump".into(),
        });
    }
    let (c, b) = (rows.len(), rows[0].len());
    FeatureBatch::from_row_slice(c, b, &rows.concat())
}

pub fn diagnose(batch: &FeatureBatch) -> crate::Result<DiagnoseReport> {
    let corr = diagnostics::ppmcc(batch)?;
    let spectrum = diagnostics::singular_spectrum(batch)?;
    let (_, cov) = whitening::compute_covariance(batch, 0.0, CovarianceDivisor::Samples)?;
    Ok(DiagnoseReport {
        channels: batch.channels(),
        samples: batch.samples(),
        mean_abs_offdiag: corr.mean_abs_offdiag,
        rho_hist: corr.histogram(RHO_HIST_BINS),
        singular_values: spectrum.singular_values,
        e: diagnostics::stability_e(&cov),
    })
}

pub fn cmd_diagnose(features: &Path, out: Option<&Path>) -> crate::Result<()> {
    let batch = load_feature_dump(features)?;
    let report = diagnose(&batch)?;
    let json = serde_json::to_string_pretty(&report)?;
    match out {
        Some(path) => fs::write(path, json + "\n").map_err(|e| Error::io(path, e)),
        None => emit(&format!("{json}\n")),
    }
}
