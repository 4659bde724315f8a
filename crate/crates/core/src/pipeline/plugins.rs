//! Name-keyed construction of the swappable components.

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::eval::{KeywordLabeler, Labeler};
use crate::geometry::{CanonicalDetector, Detector, OracleDetector};
use crate::language::{MeanEmbeddingEncoder, TextEncoder};
use crate::nn::ParamStore;
use crate::visual::{Backbone, ConvBackbone};

use super::config::{DetectorConfig, PluginConfig};

pub const BACKBONES: &[&str] = &["conv"];
pub const DETECTORS: &[&str] = &["oracle", "canonical"];
pub const TEXT_ENCODERS: &[&str] = &["mean-embedding"];
pub const LABELERS: &[&str] = &["keyword"];

fn unknown(kind: &str, key: &str, known: &[&str]) -> Error {
    Error::Config(format!("unknown {kind} {key:?}; known: {}", known.join(", ")))
}

fn check(kind: &str, key: &str, known: &[&str]) -> Result<()> {
    if known.contains(&key) {
        Ok(())
    } else {
        Err(unknown(kind, key, known))
    }
}

/// Fails on the first key that no plug-in is registered under.
pub fn check_keys(p: &PluginConfig) -> Result<()> {
    check("backbone", &p.backbone, BACKBONES)?;
    check("detector", &p.detector, DETECTORS)?;
    check("detector", &p.inference_detector, DETECTORS)?;
    check("text encoder", &p.text_encoder, TEXT_ENCODERS)?;
    check("labeler", &p.labeler, LABELERS)
}

pub fn backbone(key: &str, store: &mut ParamStore, cfg: &ModelConfig) -> Result<Box<dyn Backbone>> {
    match key {
        "conv" => Ok(Box::new(ConvBackbone::new(store, cfg)?)),
        _ => Err(unknown("backbone", key, BACKBONES)),
    }
}

pub fn detector(key: &str, cfg: &DetectorConfig) -> Result<Box<dyn Detector>> {
    match key {
        "oracle" => Ok(Box::new(OracleDetector { dropout: cfg.dropout, score_noise: cfg.score_noise })),
        "canonical" => Ok(Box::new(CanonicalDetector)),
        _ => Err(unknown("detector", key, DETECTORS)),
    }
}

pub fn text_encoder(key: &str, store: &mut ParamStore, vocab_size: usize, cfg: &ModelConfig) -> Result<Box<dyn TextEncoder>> {
    match key {
        "mean-embedding" => Ok(Box::new(MeanEmbeddingEncoder::new(store, vocab_size, cfg.text_encoder_width)?)),
        _ => Err(unknown("text encoder", key, TEXT_ENCODERS)),
    }
}

/// The keyword labeler reads `lexicon` when given, else its bundled lexicon.
pub fn labeler(key: &str, lexicon: Option<&str>) -> Result<Box<dyn Labeler>> {
    match key {
        "keyword" => Ok(Box::new(match lexicon {
            Some(text) => KeywordLabeler::from_json(text)?,
            None => KeywordLabeler::default_lexicon(),
        })),
        _ => Err(unknown("labeler", key, LABELERS)),
    }
}
