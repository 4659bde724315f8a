use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::ModelConfig;
use crate::data::{RegionGroupTable, SCHEMA_VERSION};
use crate::error::{Error, Result};
use crate::geometry::CompleterConfig;

/// Optimization settings of one training stage.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct StageConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    /// Keep the parameters of the epoch with the best validation C-index
    /// (survival stages only).
    pub keep_best: bool,
}

impl Default for StageConfig {
    fn default() -> Self {
        StageConfig { epochs: 100, batch_size: 16, lr: 1e-4, weight_decay: 0.01, keep_best: true }
    }
}

/// Plug-in keys resolved through the registry.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PluginConfig {
    pub backbone: String,
    /// Detector used while training and evaluating on annotated data.
    pub detector: String,
    /// Detector used by single-image inference.
    pub inference_detector: String,
    pub text_encoder: String,
    pub labeler: String,
}

impl Default for PluginConfig {
    fn default() -> Self {
        PluginConfig {
            backbone: "conv".into(),
            detector: "oracle".into(),
            inference_detector: "canonical".into(),
            text_encoder: "mean-embedding".into(),
            labeler: "keyword".into(),
        }
    }
}

/// Settings of the oracle detector.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DetectorConfig {
    pub dropout: f64,
    pub score_noise: f32,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        DetectorConfig { dropout: 0.1, score_noise: 0.05 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SplitConfig {
    pub train: f64,
    pub val: f64,
    pub test: f64,
}

impl Default for SplitConfig {
    fn default() -> Self {
        SplitConfig { train: 0.7, val: 0.1, test: 0.2 }
    }
}

impl SplitConfig {
    pub fn ratios(&self) -> (f64, f64, f64) {
        (self.train, self.val, self.test)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub schema_version: String,
    pub seed: u64,
    /// Region group table file; the bundled default table when absent.
    pub region_groups: Option<PathBuf>,
    /// Labeler lexicon file; the bundled default lexicon when absent.
    pub labeler_lexicon: Option<PathBuf>,
    pub model: ModelConfig,
    pub plugins: PluginConfig,
    pub detector: DetectorConfig,
    pub split: SplitConfig,
    pub completer: CompleterConfig,
    pub stage1: StageConfig,
    pub stage2: StageConfig,
    pub stage3: StageConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            schema_version: SCHEMA_VERSION.into(),
            seed: 0,
            region_groups: None,
            labeler_lexicon: None,
            model: ModelConfig::default(),
            plugins: PluginConfig::default(),
            detector: DetectorConfig::default(),
            split: SplitConfig::default(),
            completer: CompleterConfig::default(),
            stage1: StageConfig::default(),
            stage2: StageConfig { epochs: 40, lr: 1e-3, keep_best: false, ..Default::default() },
            stage3: StageConfig { epochs: 60, ..Default::default() },
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads a TOML file; relative table and lexicon paths are taken
    /// relative to the file's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let mut cfg = Self::from_toml(&text)?;
        let base = path.parent().unwrap_or(Path::new("."));
        for p in [&mut cfg.region_groups, &mut cfg.labeler_lexicon].into_iter().flatten() {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Hex SHA-256 of the canonical TOML form.
    pub fn hash(&self) -> String {
        let digest = Sha256::digest(self.to_toml().as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(Error::Config(format!("unknown schema version {:?}", self.schema_version)));
        }
        self.model.validate()?;
        super::plugins::check_keys(&self.plugins)?;
        for (name, s) in [("stage1", &self.stage1), ("stage2", &self.stage2), ("stage3", &self.stage3)] {
            if s.epochs == 0 || !(s.lr > 0.0) || s.weight_decay < 0.0 {
                return Err(Error::Config(format!("{name}: epochs and lr must be positive")));
            }
        }
        for (name, s) in [("stage1", &self.stage1), ("stage3", &self.stage3)] {
            if s.batch_size < 2 {
                return Err(Error::Config(format!("{name}: survival batches need at least 2 samples")));
            }
        }
        if self.stage2.batch_size == 0 {
            return Err(Error::Config("stage2: batch_size must be positive".into()));
        }
        let sum = self.split.train + self.split.val + self.split.test;
        if (sum - 1.0).abs() > 1e-9 || [self.split.train, self.split.val, self.split.test].iter().any(|r| *r < 0.0) {
            return Err(Error::Config("split ratios must be non-negative and sum to 1".into()));
        }
        if !(0.0..=1.0).contains(&self.detector.dropout) {
            return Err(Error::Config("detector dropout must lie in [0, 1]".into()));
        }
        Ok(())
    }

    pub fn region_table(&self) -> Result<RegionGroupTable> {
        match &self.region_groups {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| Error::Config(format!("{}: {e}", p.display())))?;
                RegionGroupTable::from_json(&text)
            }
            None => Ok(RegionGroupTable::default_table()),
        }
    }
}
