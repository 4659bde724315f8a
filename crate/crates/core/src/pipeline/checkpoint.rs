//! Directory bundles holding a trained model.
//!
//! ```text
//! bundle/
//!   manifest.json       schema version, config hash, stage flags, block files, metrics, scaler
//!   config.toml         experiment configuration
//!   vocab.json          token -> id
//!   region_groups.json  sentence region groups
//!   blocks/<block>.bin  parameters, one file per block
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use candle_core::DType;
use serde::{Deserialize, Serialize};

use crate::data::{ClinicalScaler, RegionGroupTable, SCHEMA_VERSION};
use crate::error::{Error, Result};
use crate::language::Vocabulary;
use crate::nn::blocks::{read_block, write_block};
use crate::nn::ParamStore;

use super::config::ExperimentConfig;
use super::model::{Model, StageFlags};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub schema_version: String,
    pub config_hash: String,
    pub stages: StageFlags,
    /// Block name to file path relative to the bundle.
    pub blocks: BTreeMap<String, String>,
    pub metrics: BTreeMap<String, f64>,
    pub scaler: Option<ClinicalScaler>,
}

fn ckpt_err(path: &Path, e: impl std::fmt::Display) -> Error {
    Error::Checkpoint(format!("{}: {e}", path.display()))
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| ckpt_err(path, e))
}

/// Writes `model` to the bundle directory `dir`, creating it if needed and
/// replacing any previous bundle files.
pub fn save_checkpoint(model: &Model, dir: &Path) -> Result<()> {
    let blocks_dir = dir.join("blocks");
    fs::create_dir_all(&blocks_dir)?;
    let mut files = BTreeMap::new();
    for (block, tensors) in model.store.blocks() {
        let rel = format!("blocks/{block}.bin");
        write_block(&dir.join(&rel), &tensors)?;
        files.insert(block, rel);
    }
    let manifest = Manifest {
        schema_version: SCHEMA_VERSION.to_string(),
        config_hash: model.config.hash(),
        stages: model.stages,
        blocks: files,
        metrics: model.metrics.clone(),
        scaler: model.scaler.clone(),
    };
    fs::write(dir.join("config.toml"), model.config.to_toml())?;
    fs::write(dir.join("vocab.json"), model.vocab.to_json())?;
    fs::write(dir.join("region_groups.json"), model.table.to_json())?;
    fs::write(dir.join("manifest.json"), serde_json::to_string_pretty(&manifest)?)?;
    Ok(())
}

pub fn read_manifest(dir: &Path) -> Result<Manifest> {
    let path = dir.join("manifest.json");
    let m: Manifest = serde_json::from_str(&read_text(&path)?).map_err(|e| ckpt_err(&path, e))?;
    if m.schema_version != SCHEMA_VERSION {
        return Err(ckpt_err(&path, format!("unsupported schema version {:?}", m.schema_version)));
    }
    let s = m.stages;
    if (s.stage2 && !s.stage1) || (s.stage3 && !s.stage2) {
        return Err(ckpt_err(&path, "stage flags are not monotone"));
    }
    Ok(m)
}

/// Loads a bundle. Every parameter the configured model needs must be
/// present with the right shape, and nothing else may be.
pub fn load_checkpoint(dir: &Path) -> Result<Model> {
    let manifest = read_manifest(dir)?;
    let config = ExperimentConfig::from_toml(&read_text(&dir.join("config.toml"))?)?;
    if config.hash() != manifest.config_hash {
        return Err(Error::Checkpoint("config.toml does not match the manifest's config hash".into()));
    }
    let vocab = Vocabulary::from_json(&read_text(&dir.join("vocab.json"))?)?;
    let table = RegionGroupTable::from_json(&read_text(&dir.join("region_groups.json"))?)?;
    let mut store = ParamStore::new(config.seed, DType::F32);
    let mut loaded = 0;
    for (block, rel) in &manifest.blocks {
        let path = dir.join(rel);
        let tensors = read_block(&path).map_err(|e| ckpt_err(&path, e))?;
        for (name, t) in &tensors {
            if name.split('.').next() != Some(block.as_str()) {
                return Err(ckpt_err(&path, format!("parameter {name} filed under block {block}")));
            }
            store.insert(name, t)?;
        }
        loaded += tensors.len();
    }
    let mut model = Model::with_store(config, table, vocab, store)?;
    if model.store.len() != loaded {
        let missing = model.store.len() - loaded;
        return Err(Error::Checkpoint(format!("bundle lacks {missing} parameters of the configured model")));
    }
    model.stages = manifest.stages;
    model.metrics = manifest.metrics;
    model.scaler = manifest.scaler;
    Ok(model)
}
