use std::collections::BTreeMap;

use candle_core::{DType, Tensor};
use serde::{Deserialize, Serialize};

use crate::attention::{SentenceEncoder, SurvivalAttention};
use crate::data::{ClinicalScaler, RegionGroupTable, StructuredReport, NUM_SENTENCES};
use crate::error::{Error, Result};
use crate::geometry::Completer;
use crate::language::{detokenize, Decoder, TextEncoder, TextSpace, Vocabulary};
use crate::nn::ParamStore;
use crate::survival::SurvivalHead;
use crate::visual::{aggregate_sentence_features, Backbone, RegionEncoder, RegionFeatureSet, RegionPatches};

use super::config::ExperimentConfig;
use super::plugins;

/// Which training stages have completed.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageFlags {
    pub stage1: bool,
    pub stage2: bool,
    pub stage3: bool,
}

/// Every network of the pipeline, all sharing one parameter store.
pub struct Model {
    pub config: ExperimentConfig,
    pub table: RegionGroupTable,
    pub vocab: Vocabulary,
    pub store: ParamStore,
    pub backbone: Box<dyn Backbone>,
    pub region_encoder: RegionEncoder,
    pub survival_attention: SurvivalAttention,
    pub sentence_encoder: SentenceEncoder,
    pub text_space: TextSpace,
    pub text_encoder: Box<dyn TextEncoder>,
    pub decoder: Decoder,
    pub survival: SurvivalHead,
    pub completer: Completer,
    pub stages: StageFlags,
    pub scaler: Option<ClinicalScaler>,
    /// Metrics recorded by the completed stages.
    pub metrics: BTreeMap<String, f64>,
}

/// Trainable parameter prefixes of each stage.
pub const STAGE1_PREFIXES: &[&str] = &["sa."];
pub const STAGE2_PREFIXES: &[&str] = &["mre.", "sse.", "text.i2t.", "text.t2t.", "decoder."];
pub const STAGE3_PREFIXES: &[&str] = &["survival."];

impl Model {
    /// Builds every network in `store`, creating missing parameters from the
    /// store's seed and reusing (shape-checked) existing ones.
    pub fn with_store(config: ExperimentConfig, table: RegionGroupTable, vocab: Vocabulary, mut store: ParamStore) -> Result<Self> {
        config.validate()?;
        let m = &config.model;
        let p = &config.plugins;
        let backbone = plugins::backbone(&p.backbone, &mut store, m)?;
        let region_encoder = RegionEncoder::new(&mut store, m)?;
        let survival_attention = SurvivalAttention::new(&mut store, m)?;
        let sentence_encoder = SentenceEncoder::new(&mut store, m, &table)?;
        let text_encoder = plugins::text_encoder(&p.text_encoder, &mut store, vocab.len(), m)?;
        let text_space = TextSpace::new(&mut store, m.embed_width, text_encoder.width(), m.text_width)?;
        let decoder = Decoder::new(
            &mut store,
            vocab.len(),
            m.text_width,
            m.decoder_blocks,
            m.decoder_heads,
            m.decoder_ff_width,
            m.max_sentence_len,
        )?;
        let survival = SurvivalHead::new(&mut store, m)?;
        let completer = Completer::new(&mut store, config.completer.hidden)?;
        Ok(Model {
            config,
            table,
            vocab,
            store,
            backbone,
            region_encoder,
            survival_attention,
            sentence_encoder,
            text_space,
            text_encoder,
            decoder,
            survival,
            completer,
            stages: StageFlags::default(),
            scaler: None,
            metrics: BTreeMap::new(),
        })
    }

    /// A freshly initialized model seeded from the experiment seed.
    pub fn new(config: ExperimentConfig, table: RegionGroupTable, vocab: Vocabulary) -> Result<Self> {
        let store = ParamStore::new(config.seed, DType::F32);
        Self::with_store(config, table, vocab, store)
    }

    pub fn dtype(&self) -> DType {
        self.store.dtype()
    }

    /// `f_sur` `(B, d)` from the last pyramid level `(B, d, h, w)`.
    pub fn survival_feature(&self, f5: &Tensor) -> Result<Tensor> {
        self.survival_attention.forward(f5)
    }

    pub fn region_features(&self, patches: &RegionPatches) -> Result<RegionFeatureSet> {
        self.region_encoder.forward(patches)
    }

    /// Sentence-level visual features `v_I` `(B, 5, d_e)` from region
    /// features `(B, 30, w)`.
    pub fn sentence_features(&self, region_features: &Tensor, f_sur: &Tensor) -> Result<Tensor> {
        let grouped = aggregate_sentence_features(region_features, &self.table)?;
        self.sentence_encoder.forward(&grouped, f_sur)
    }

    /// `v_T` `(B, 5, d_t)`: the sentence features mapped into the text space.
    pub fn text_features(&self, patches: &RegionPatches, f_sur: &Tensor) -> Result<Tensor> {
        let rfs = self.region_features(patches)?;
        let v_i = self.sentence_features(&rfs.features, f_sur)?;
        self.text_space.image_features(&v_i)
    }

    /// Greedy reports for `v_T` `(B, 5, d_t)`.
    pub fn generate(&self, v_t: &Tensor) -> Result<Vec<StructuredReport>> {
        let (b, s, d) = v_t.dims3()?;
        if s != NUM_SENTENCES {
            return Err(Error::shape(format!("expected {NUM_SENTENCES} sentence features, got {s}")));
        }
        let seqs = self.decoder.greedy(&v_t.reshape((b * s, d))?, self.config.model.max_sentence_len)?;
        Ok(seqs
            .chunks(NUM_SENTENCES)
            .map(|c| StructuredReport::new(std::array::from_fn(|i| detokenize(&c[i], &self.vocab))))
            .collect())
    }

    /// Scaled clinical vectors as a `(B, c)` tensor.
    pub fn clinical_tensor(&self, rows: &[&[f32]]) -> Result<Tensor> {
        let scaler = self
            .scaler
            .as_ref()
            .ok_or_else(|| Error::Ordering("the clinical scaler is fitted in stage 3".into()))?;
        let mut flat = Vec::with_capacity(rows.len() * scaler.dim());
        for r in rows {
            flat.extend(scaler.transform(r)?);
        }
        Ok(Tensor::from_vec(flat, (rows.len(), scaler.dim()), self.store.device())?.to_dtype(self.dtype())?)
    }

    /// Fused risk `(B,)`.
    pub fn fused_risk(&self, v_t: &Tensor, f_sur: &Tensor, clinical: &Tensor) -> Result<Tensor> {
        let b = v_t.dims()[0];
        let flat = v_t.reshape((b, ()))?;
        let feats = self.survival.encode_and_fuse(&flat, f_sur, clinical)?;
        self.survival.predict_risk(&feats.fused)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synth::template_corpus;

    pub(crate) fn tiny_model() -> Model {
        let mut cfg = ExperimentConfig::default();
        cfg.model = crate::config::ModelConfig::compact();
        cfg.completer.hidden = 16;
        Model::new(cfg, RegionGroupTable::default_table(), Vocabulary::from_corpus(&template_corpus())).unwrap()
    }

    #[test]
    fn stage_prefixes_partition_the_trainable_blocks() {
        let m = tiny_model();
        let names: Vec<&str> = m.store.names().collect();
        for name in &names {
            let hits = [STAGE1_PREFIXES, STAGE2_PREFIXES, STAGE3_PREFIXES]
                .iter()
                .filter(|ps| ps.iter().any(|p| name.starts_with(p)))
                .count();
            let frozen = name.starts_with("backbone.") || name.starts_with("completer.") || name.starts_with("text.encoder.");
            assert_eq!(hits, usize::from(!frozen), "{name}");
        }
    }

    #[test]
    fn rebuilding_from_the_store_reuses_parameters() {
        let m = tiny_model();
        let before = m.store.fingerprint("").unwrap();
        let rebuilt = Model::with_store(m.config.clone(), m.table.clone(), m.vocab.clone(), m.store.clone()).unwrap();
        assert_eq!(rebuilt.store.fingerprint("").unwrap(), before);
    }

    #[test]
    fn clinical_tensor_needs_a_scaler() {
        let m = tiny_model();
        let row = vec![0f32; m.config.model.clinical_dim];
        assert!(matches!(m.clinical_tensor(&[&row]), Err(Error::Ordering(_))));
    }
}
