//! Versioned JSON experiment configuration.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::dataset::ImbalanceSpec;
use crate::error::{Error, Result};
use crate::nn::ModelConfig;
use crate::sampler::GrbsParams;
use crate::train::{SamplerKind, ShotThresholds, TrainConfig};

pub const CONFIG_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticConfig {
    pub num_classes: usize,
    pub n_max: usize,
    pub gamma: f64,
    pub feature_dim: usize,
    #[serde(default = "default_distance")]
    pub class_distance: f64,
    #[serde(default = "default_test_per_class")]
    pub test_per_class: usize,
    /// Dataset seed; the experiment seed when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

fn default_distance() -> f64 {
    3.0
}

fn default_test_per_class() -> usize {
    100
}

impl SyntheticConfig {
    pub fn to_spec(&self, experiment_seed: u64) -> ImbalanceSpec {
        ImbalanceSpec {
            num_classes: self.num_classes,
            n_max: self.n_max,
            gamma: self.gamma,
            feature_dim: self.feature_dim,
            class_distance: self.class_distance,
            test_per_class: self.test_per_class,
            seed: self.seed.unwrap_or(experiment_seed),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetSource {
    Synthetic(SyntheticConfig),
    /// CSV files of `label, f1, …, fD`, relative to the config file.
    Tabular {
        train: PathBuf,
        test: PathBuf,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GrbsSettings {
    pub enabled: bool,
    pub groups: usize,
    pub r0: f64,
    pub alpha: f64,
}

impl Default for GrbsSettings {
    fn default() -> Self {
        let p = GrbsParams::default();
        Self {
            enabled: false,
            groups: p.groups,
            r0: p.r0,
            alpha: p.alpha,
        }
    }
}

impl GrbsSettings {
    pub fn params(&self) -> GrbsParams {
        GrbsParams {
            groups: self.groups,
            r0: self.r0,
            alpha: self.alpha,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BetSettings {
    pub enabled: bool,
    /// `T`
    pub interval: usize,
    /// `T2`; one batch per group when absent.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub grbs_iters: Option<usize>,
}

impl Default for BetSettings {
    fn default() -> Self {
        Self {
            enabled: false,
            interval: 60,
            grbs_iters: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub version: u32,
    #[serde(default)]
    pub seed: u64,
    pub dataset: DatasetSource,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub grbs: GrbsSettings,
    #[serde(default)]
    pub bet: BetSettings,
    #[serde(default)]
    pub evaluation: ShotThresholds,
    /// Training samples in the per-epoch diagnostics probe.
    #[serde(default = "default_probe_size")]
    pub probe_size: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output_dir: Option<PathBuf>,
}

fn default_probe_size() -> usize {
    512
}

impl ExperimentConfig {
    /// Synthetic experiment with every default.
    pub fn synthetic(dataset: SyntheticConfig) -> Self {
        Self {
            version: CONFIG_VERSION,
            seed: 0,
            dataset: DatasetSource::Synthetic(dataset),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            grbs: GrbsSettings::default(),
            bet: BetSettings::default(),
            evaluation: ShotThresholds::default(),
            probe_size: default_probe_size(),
            output_dir: None,
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Config(vec![format!("invalid config: {e}")]))
    }

    /// Reads a config file. Relative dataset paths resolve against its directory.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// SHA-256 of the compact serialization.
    pub fn hash(&self) -> Result<String> {
        Ok(hex::encode(Sha256::digest(serde_json::to_vec(self)?)))
    }

    /// Checks every field, reporting all problems at once.
    pub fn validate(&self, base_dir: &Path) -> Result<()> {
        let mut p = Vec::new();
        if self.version != CONFIG_VERSION {
            p.push(format!("version: expected {CONFIG_VERSION}, got {}", self.version));
        }
        match &self.dataset {
            DatasetSource::Synthetic(s) => {
                if let Err(Error::Config(msgs)) = s.to_spec(self.seed).validate() {
                    p.extend(msgs);
                }
            }
            DatasetSource::Tabular { train, test } => {
                for (name, path) in [("train", train), ("test", test)] {
                    if !base_dir.join(path).is_file() {
                        p.push(format!("dataset.tabular.{name}: {} not found", path.display()));
                    }
                }
            }
        }
        if self.model.feature_dim == 0 || self.model.hidden.contains(&0) {
            p.push("model: layer widths must be positive".into());
        }
        if self.model.whitening.enabled {
            if let Err(e) = self.model.whitening.params().validate() {
                p.push(format!("model.whitening: {e}"));
            }
        }
        p.extend(self.train.problems());
        if self.bet.enabled && !self.grbs.enabled {
            p.push("bet.enabled requires grbs.enabled".into());
        }
        if self.grbs.enabled {
            if self.grbs.groups == 0 {
                p.push("grbs.groups must be at least 1".into());
            }
            if !(self.grbs.r0 > 0.0 && self.grbs.r0 <= 1.0) {
                p.push(format!("grbs.r0 must lie in (0, 1], got {}", self.grbs.r0));
            }
            if !(self.grbs.alpha > 0.0 && self.grbs.alpha.is_finite()) {
                p.push(format!("grbs.alpha must be positive, got {}", self.grbs.alpha));
            }
            if let DatasetSource::Synthetic(s) = &self.dataset {
                if self.grbs.groups > s.num_classes {
                    p.push(format!(
                        "grbs.groups ({}) exceeds the class count ({})",
                        self.grbs.groups, s.num_classes
                    ));
                } else if let Some(f) = s.num_classes.checked_div(self.grbs.groups) {
                    if self.grbs.r0 > 1.0 / f as f64 {
                        p.push(format!("grbs.r0 must not exceed 1/F = {}", 1.0 / f as f64));
                    }
                    if self.train.batch_size < f {
                        p.push(format!("train.batch_size must be at least F = {f}"));
                    }
                }
            }
            if !self.bet.enabled && self.train.sampler != SamplerKind::Random {
                p.push("grbs without bet replaces the base sampler; train.sampler must be \"random\"".into());
            }
        }
        if self.bet.enabled {
            if self.bet.interval == 0 {
                p.push("bet.interval must be at least 1".into());
            }
            if self.bet.grbs_iters == Some(0) {
                p.push("bet.grbs_iters must be at least 1".into());
            }
        }
        if self.probe_size == 1 {
            p.push("probe_size must be 0 (disabled) or at least 2".into());
        }
        if p.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(p))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn base() -> ExperimentConfig {
        ExperimentConfig::synthetic(SyntheticConfig {
            num_classes: 10,
            n_max: 100,
            gamma: 10.0,
            feature_dim: 8,
            class_distance: 3.0,
            test_per_class: 10,
            seed: None,
        })
    }

    #[test]
    fn defaults_validate() {
        base().validate(Path::new(".")).unwrap();
    }

    #[test]
    fn bet_requires_grbs() {
        let mut c = base();
        c.bet.enabled = true;
        let Err(Error::Config(msgs)) = c.validate(Path::new(".")) else {
            panic!("expected config error");
        };
        assert!(msgs.iter().any(|m| m.contains("bet.enabled requires grbs")));
    }

    #[test]
    fn missing_tabular_paths_reported() {
        let mut c = base();
        c.dataset = DatasetSource::Tabular {
            train: "nope.csv".into(),
            test: "nope2.csv".into(),
        };
        let Err(Error::Config(msgs)) = c.validate(Path::new("/nonexistent")) else {
            panic!("expected config error");
        };
        assert_eq!(msgs.len(), 2);
    }

    #[test]
    fn minimal_json_uses_defaults() {
        let c = ExperimentConfig::from_json(
            r#"{"version":1,"dataset":{"synthetic":{"num_classes":3,"n_max":10,"gamma":1,"feature_dim":4}}}"#,
        )
        .unwrap();
        assert_eq!(c.train.momentum, 0.9);
        assert_eq!(c.train.weight_decay, 2e-4);
        assert_eq!(c.model.whitening.epsilon, 1e-5);
        assert!(ExperimentConfig::from_json(r#"{"version":1,"bogus":1}"#).is_err());
    }

    #[test]
    fn hash_changes_with_content() {
        let a = base();
        let mut b = base();
        b.seed = 1;
        assert_ne!(a.hash().unwrap(), b.hash().unwrap());
        assert_eq!(a.hash().unwrap(), base().hash().unwrap());
    }
}
