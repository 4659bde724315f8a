use serde::{Deserialize, Serialize};

use crate::data::{DEFAULT_CLINICAL_DIM, NUM_REGION_FEATURES};
use crate::error::{Error, Result};

/// Widths and sizes of every network in the pipeline.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    /// Square input side; must be divisible by 32.
    pub input_size: usize,
    /// Channel width of each of the five backbone levels.
    pub pyramid_channels: [usize; 5],
    /// ROI-align output side per level.
    pub roi_sizes: [usize; 5],
    /// Per-level projection width; a region feature is five of these.
    pub region_proj_width: usize,
    /// Heads of the survival-attention pooling.
    pub attention_heads: usize,
    /// Width of the per-sentence visual features.
    pub embed_width: usize,
    /// Width of the shared text space and of the decoder.
    pub text_width: usize,
    pub decoder_blocks: usize,
    pub decoder_heads: usize,
    pub decoder_ff_width: usize,
    /// Longest token sequence, end-of-sentence included.
    pub max_sentence_len: usize,
    /// Token-embedding width of the default text encoder.
    pub text_encoder_width: usize,
    /// Width of each modality's survival feature and of both fusion outputs.
    pub survival_width: usize,
    /// Width of both hidden layers of the survival encoders.
    pub survival_hidden: usize,
    pub clinical_dim: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            input_size: 224,
            pyramid_channels: [64, 256, 512, 1024, 2048],
            roi_sizes: [4, 2, 2, 1, 1],
            region_proj_width: 256,
            attention_heads: 8,
            embed_width: 512,
            text_width: 128,
            decoder_blocks: 2,
            decoder_heads: 8,
            decoder_ff_width: 512,
            max_sentence_len: 24,
            text_encoder_width: 128,
            survival_width: 2048,
            survival_hidden: 1024,
            clinical_dim: DEFAULT_CLINICAL_DIM,
        }
    }
}

impl ModelConfig {
    /// Same topology with every width shrunk, for fast experiments.
    pub fn compact() -> Self {
        ModelConfig {
            pyramid_channels: [8, 16, 32, 64, 128],
            region_proj_width: 32,
            attention_heads: 4,
            embed_width: 64,
            text_width: 64,
            decoder_heads: 4,
            decoder_ff_width: 128,
            text_encoder_width: 32,
            survival_width: 128,
            survival_hidden: 64,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(format!("model: {m}")));
        if self.input_size == 0 || !self.input_size.is_multiple_of(32) {
            return bad(format!("input_size {} must be a positive multiple of 32", self.input_size));
        }
        if self.pyramid_channels.iter().chain(&self.roi_sizes).any(|v| *v == 0) {
            return bad("pyramid channels and ROI sizes must be positive".into());
        }
        let d = self.global_width();
        if self.attention_heads == 0 || !d.is_multiple_of(self.attention_heads) {
            return bad(format!("attention width {d} not divisible by {} heads", self.attention_heads));
        }
        if self.decoder_heads == 0 || !self.text_width.is_multiple_of(self.decoder_heads) {
            return bad(format!("text width {} not divisible by {} heads", self.text_width, self.decoder_heads));
        }
        if self.max_sentence_len < 2 {
            return bad("max_sentence_len must be at least 2".into());
        }
        for (name, v) in [
            ("region_proj_width", self.region_proj_width),
            ("embed_width", self.embed_width),
            ("decoder_ff_width", self.decoder_ff_width),
            ("text_encoder_width", self.text_encoder_width),
            ("survival_width", self.survival_width),
            ("survival_hidden", self.survival_hidden),
            ("clinical_dim", self.clinical_dim),
        ] {
            if v == 0 {
                return bad(format!("{name} must be positive"));
            }
        }
        Ok(())
    }

    /// Width of one region feature (five concatenated projections).
    pub fn region_width(&self) -> usize {
        5 * self.region_proj_width
    }

    /// Channel width of the last backbone level, the survival-attention width.
    pub fn global_width(&self) -> usize {
        self.pyramid_channels[4]
    }

    /// Spatial side of backbone level `l` (0-based).
    pub fn level_side(&self, l: usize) -> usize {
        self.input_size >> (l + 1)
    }

    /// Number of spatial positions of the last level.
    pub fn positions(&self) -> usize {
        self.level_side(4).pow(2)
    }

    /// Flattened ROI patch width per level before projection.
    pub fn patch_widths(&self) -> [usize; 5] {
        std::array::from_fn(|l| self.pyramid_channels[l] * self.roi_sizes[l] * self.roi_sizes[l])
    }

    pub fn num_region_features(&self) -> usize {
        NUM_REGION_FEATURES
    }
}
