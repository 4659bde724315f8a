//! The three-stage training protocol.

use std::collections::BTreeMap;

use candle_core::{Tensor, Var};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{split_dataset, ClinicalScaler, CohortSample, RegionGroupTable, Splits, CONTINUOUS_CLINICAL, NUM_SENTENCES};
use crate::error::{Error, Result};
use crate::eval::corpus_bleu;
use crate::geometry::train_completer_in;
use crate::language::{llm_alignment_loss, tokenize, TokenSequence, Vocabulary};
use crate::nn::{AdamW, AdamWConfig};
use crate::survival::{concordance_index, coxph_loss_tensor, RiskBatch};

use super::config::{ExperimentConfig, StageConfig};
use super::features::{sample_features, FeatureCache};
use super::model::{Model, STAGE1_PREFIXES, STAGE2_PREFIXES, STAGE3_PREFIXES};
use super::plugins;

/// Rows per forward pass when only predictions are needed.
const EVAL_BATCH: usize = 64;

/// Loss history and metrics of one stage.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageReport {
    pub stage: u8,
    /// Mean training loss of every epoch.
    pub losses: Vec<f64>,
    pub metrics: BTreeMap<String, f64>,
}

/// Cached features of the three splits.
pub struct SplitFeatures {
    pub train: FeatureCache,
    pub val: FeatureCache,
    pub test: FeatureCache,
}

/// The cohort split and the frozen front-end features of every split.
pub struct PreparedData {
    pub samples: Splits<CohortSample>,
    pub features: SplitFeatures,
}

impl PreparedData {
    /// Extracts features with the configured training detector. Requires a
    /// trained completer whenever the detector can miss regions.
    pub fn new(model: &Model, samples: Splits<CohortSample>) -> Result<Self> {
        for (name, split) in [("train", &samples.train), ("val", &samples.val), ("test", &samples.test)] {
            if split.is_empty() {
                return Err(Error::Data(format!("the {name} split is empty")));
            }
        }
        let detector = plugins::detector(&model.config.plugins.detector, &model.config.detector)?;
        let features = SplitFeatures {
            train: sample_features(model, detector.as_ref(), &samples.train)?,
            val: sample_features(model, detector.as_ref(), &samples.val)?,
            test: sample_features(model, detector.as_ref(), &samples.test)?,
        };
        Ok(PreparedData { samples, features })
    }
}

/// Splits the cohort with the experiment seed.
pub fn split_cohort(config: &ExperimentConfig, samples: &[CohortSample]) -> Result<Splits<CohortSample>> {
    split_dataset(samples, config.split.ratios(), config.seed)
}

/// A fresh model whose vocabulary covers the training reports.
pub fn init_model(config: ExperimentConfig, table: RegionGroupTable, train: &[CohortSample]) -> Result<Model> {
    let sentences: Vec<&str> = train.iter().flat_map(|s| s.report.sentences.iter().map(String::as_str)).collect();
    Model::new(config, table, Vocabulary::from_corpus(&sentences))
}

fn optimizer(model: &Model, prefixes: &[&str], cfg: &StageConfig) -> Result<AdamW> {
    let vars = model.store.vars_with_prefixes(prefixes);
    AdamW::new(vars, AdamWConfig { lr: cfg.lr, weight_decay: cfg.weight_decay, ..Default::default() })
}

fn snapshot(model: &Model, prefixes: &[&str]) -> Result<Vec<(Var, Tensor)>> {
    Ok(model
        .store
        .vars_with_prefixes(prefixes)
        .into_iter()
        .map(|v| {
            let t = v.as_tensor().copy()?;
            Ok((v, t))
        })
        .collect::<candle_core::Result<_>>()?)
}

fn restore(saved: &[(Var, Tensor)]) -> Result<()> {
    for (v, t) in saved {
        v.set(t)?;
    }
    Ok(())
}

fn frozen_fingerprint(model: &Model, trainable: &[&str]) -> Result<BTreeMap<String, Vec<u64>>> {
    let mut all = model.store.fingerprint("")?;
    all.retain(|k, _| !trainable.iter().any(|p| k.starts_with(p)));
    Ok(all)
}

fn check_frozen(before: &BTreeMap<String, Vec<u64>>, after: &BTreeMap<String, Vec<u64>>, stage: u8) -> Result<()> {
    match before.iter().find(|(k, v)| after.get(*k) != Some(v)) {
        Some((k, _)) => Err(Error::Contract(format!("stage {stage} modified frozen parameter {k}"))),
        None => Ok(()),
    }
}

/// Shuffled survival batches of at least two samples, each with at least
/// one event. A batch without events is replaced by a fresh random draw.
fn survival_batches(samples: &[CohortSample], batch_size: usize, rng: &mut ChaCha8Rng) -> Result<Vec<Vec<usize>>> {
    let n = samples.len();
    if !samples.iter().any(|s| s.survival.event) {
        return Err(Error::Data("every training sample is censored".into()));
    }
    if n < 2 {
        return Err(Error::Data("survival training needs at least 2 samples".into()));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    let size = batch_size.min(n);
    let mut batches = Vec::new();
    for chunk in order.chunks(size).filter(|c| c.len() >= 2) {
        let mut batch = chunk.to_vec();
        while !batch.iter().any(|&i| samples[i].survival.event) {
            batch = rand::seq::index::sample(rng, n, chunk.len()).into_vec();
        }
        batches.push(batch);
    }
    Ok(batches)
}

fn outcomes(samples: &[CohortSample], idx: &[usize]) -> (Vec<f64>, Vec<bool>) {
    idx.iter().map(|&i| (samples[i].survival.time_days, samples[i].survival.event)).unzip()
}

fn c_index_of(risks: &[f64], samples: &[CohortSample]) -> Result<f64> {
    let times = samples.iter().map(|s| s.survival.time_days).collect();
    let events = samples.iter().map(|s| s.survival.event).collect();
    concordance_index(&RiskBatch::new(risks.to_vec(), times, events)?)
}

fn in_chunks(n: usize, mut f: impl FnMut(&[usize]) -> Result<Tensor>) -> Result<Tensor> {
    let all: Vec<usize> = (0..n).collect();
    let parts = all.chunks(EVAL_BATCH).map(&mut f).collect::<Result<Vec<_>>>()?;
    Ok(Tensor::cat(&parts, 0)?)
}

fn to_f64(t: &Tensor) -> Result<Vec<f64>> {
    Ok(t.to_dtype(candle_core::DType::F64)?.flatten_all()?.to_vec1::<f64>()?)
}

/// `f_sur` of every cached sample, `(N, d)`, detached.
pub fn survival_features(model: &Model, cache: &FeatureCache) -> Result<Tensor> {
    in_chunks(cache.len(), |idx| {
        let i = Tensor::from_vec(idx.iter().map(|i| *i as u32).collect::<Vec<_>>(), idx.len(), cache.f5.device())?;
        Ok(model.survival_feature(&cache.f5.index_select(&i, 0)?)?.detach())
    })
}

/// Image-only risks of every cached sample.
pub fn image_risks(model: &Model, cache: &FeatureCache) -> Result<Vec<f64>> {
    let f_sur = survival_features(model, cache)?;
    to_f64(&model.survival_attention.image_risk(&f_sur)?)
}

/// `v_T` of every cached sample, `(N, 5, d_t)`, detached.
pub fn text_features(model: &Model, cache: &FeatureCache, f_sur: &Tensor) -> Result<Tensor> {
    in_chunks(cache.len(), |idx| {
        let patches = cache.patches.select(idx)?;
        let i = Tensor::from_vec(idx.iter().map(|i| *i as u32).collect::<Vec<_>>(), idx.len(), f_sur.device())?;
        Ok(model.text_features(&patches, &f_sur.index_select(&i, 0)?)?.detach())
    })
}

/// Fused multimodal risks of every cached sample.
pub fn fused_risks(model: &Model, cache: &FeatureCache, samples: &[CohortSample]) -> Result<Vec<f64>> {
    let f_sur = survival_features(model, cache)?;
    let v_t = text_features(model, cache, &f_sur)?;
    let rows: Vec<&[f32]> = samples.iter().map(|s| s.survival.clinical.as_slice()).collect();
    let clinical = model.clinical_tensor(&rows)?;
    to_f64(&model.fused_risk(&v_t, &f_sur, &clinical)?)
}

fn stage_rng(model: &Model, stage: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(model.config.seed);
    rng.set_stream(stage);
    rng
}

fn require(flag: bool, what: &str) -> Result<()> {
    if flag {
        Ok(())
    } else {
        Err(Error::Ordering(format!("{what} must complete first")))
    }
}

/// Trains the region completer on the annotated training layouts.
pub fn train_completer_stage(model: &mut Model, train: &[CohortSample]) -> Result<Vec<f64>> {
    let layouts: Vec<_> = train.iter().map(|s| s.regions.clone()).collect();
    let cfg = model.config.completer.clone();
    let (completer, history) = train_completer_in(&mut model.store, &layouts, &cfg)?;
    model.completer = completer;
    Ok(history)
}

/// Generic survival-stage loop: Cox loss on `risk(batch indices)`, with the
/// parameters of the best validation epoch kept when configured.
#[allow(clippy::too_many_arguments)]
fn survival_loop(
    label: &str,
    model: &Model,
    prefixes: &[&str],
    cfg: &StageConfig,
    train: &[CohortSample],
    rng: &mut ChaCha8Rng,
    risk: &dyn Fn(&[usize]) -> Result<Tensor>,
    validate: &dyn Fn() -> Result<f64>,
) -> Result<(Vec<f64>, f64)> {
    let mut opt = optimizer(model, prefixes, cfg)?;
    let mut losses = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(f64, Vec<(Var, Tensor)>)> = None;
    for _ in 0..cfg.epochs {
        let (mut total, mut steps) = (0.0, 0usize);
        for batch in survival_batches(train, cfg.batch_size, rng)? {
            let (times, events) = outcomes(train, &batch);
            let loss = coxph_loss_tensor(&risk(&batch)?, &times, &events)?;
            let value = to_f64(&loss)?[0];
            if !value.is_finite() {
                return Err(Error::Loss("survival loss diverged".into()));
            }
            opt.step(&loss)?;
            total += value;
            steps += 1;
        }
        losses.push(total / steps.max(1) as f64);
        if cfg.keep_best {
            let c = validate()?;
            log::info!("{label} epoch {}: loss {:.4}, val C-index {c:.4}", losses.len(), losses[losses.len() - 1]);
            if best.as_ref().is_none_or(|(b, _)| c > *b) {
                best = Some((c, snapshot(model, prefixes)?));
            }
        }
    }
    if let Some((_, saved)) = &best {
        restore(saved)?;
    }
    Ok((losses, validate()?))
}

/// Stage 1: survival attention and the image-risk head under the Cox loss,
/// with the backbone frozen.
pub fn stage1(model: &mut Model, data: &PreparedData) -> Result<StageReport> {
    let frozen = frozen_fingerprint(model, STAGE1_PREFIXES)?;
    let cfg = model.config.stage1.clone();
    let mut rng = stage_rng(model, 1);
    let train = &data.samples.train;
    let f5 = &data.features.train.f5;
    let m: &Model = model;
    let risk = |batch: &[usize]| -> Result<Tensor> {
        let i = Tensor::from_vec(batch.iter().map(|i| *i as u32).collect::<Vec<_>>(), batch.len(), f5.device())?;
        m.survival_attention.image_risk(&m.survival_feature(&f5.index_select(&i, 0)?)?)
    };
    let validate = || c_index_of(&image_risks(m, &data.features.val)?, &data.samples.val);
    let (losses, val_c) = survival_loop("stage 1", m, STAGE1_PREFIXES, &cfg, train, &mut rng, &risk, &validate)?;
    let test_c = c_index_of(&image_risks(m, &data.features.test)?, &data.samples.test)?;
    check_frozen(&frozen, &frozen_fingerprint(model, STAGE1_PREFIXES)?, 1)?;
    let metrics = BTreeMap::from([("stage1_val_c_index".to_string(), val_c), ("stage1_test_c_index".to_string(), test_c)]);
    model.metrics.extend(metrics.clone());
    model.stages.stage1 = true;
    Ok(StageReport { stage: 1, losses, metrics })
}

fn sentence_targets(model: &Model, samples: &[CohortSample]) -> Vec<TokenSequence> {
    samples
        .iter()
        .flat_map(|s| s.report.sentences.iter().map(|t| tokenize(t, &model.vocab, model.config.model.max_sentence_len)))
        .collect()
}

/// Greedy decoding of every cached sample: training BLEU-4 over sentences
/// and the fraction reproduced verbatim.
pub fn memorization(model: &Model, cache: &FeatureCache, samples: &[CohortSample]) -> Result<(f64, f64)> {
    let f_sur = survival_features(model, cache)?;
    let v_t = text_features(model, cache, &f_sur)?;
    let generated = model.generate(&v_t)?;
    let tok = |s: &str| crate::language::normalize(s);
    let mut cand = Vec::new();
    let mut refs = Vec::new();
    for (g, s) in generated.iter().zip(samples) {
        for i in 0..NUM_SENTENCES {
            cand.push(tok(&g.sentences[i]));
            refs.push(tok(&s.report.sentences[i]));
        }
    }
    let verbatim = cand.iter().zip(&refs).filter(|(c, r)| c == r).count() as f64 / cand.len() as f64;
    Ok((corpus_bleu(&cand, &refs, 4)?, verbatim))
}

/// Stage 2: region encoder, sentence encoder, both text-space embedders and
/// the decoder under the alignment loss, with survival attention frozen.
pub fn stage2(model: &mut Model, data: &PreparedData) -> Result<StageReport> {
    require(model.stages.stage1, "stage 1")?;
    let frozen = frozen_fingerprint(model, STAGE2_PREFIXES)?;
    let cfg = model.config.stage2.clone();
    let mut rng = stage_rng(model, 2);
    let train = &data.samples.train;
    let cache = &data.features.train;
    let f_sur = survival_features(model, cache)?;
    let targets = sentence_targets(model, train);
    let mut opt = optimizer(model, STAGE2_PREFIXES, &cfg)?;
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut losses = Vec::with_capacity(cfg.epochs);
    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let (mut total, mut steps) = (0.0, 0usize);
        for batch in order.chunks(cfg.batch_size) {
            let idx = Tensor::from_vec(batch.iter().map(|i| *i as u32).collect::<Vec<_>>(), batch.len(), f_sur.device())?;
            let v_t = model.text_features(&cache.patches.select(batch)?, &f_sur.index_select(&idx, 0)?)?;
            let (b, s, d) = v_t.dims3()?;
            let tgt: Vec<TokenSequence> = batch.iter().flat_map(|&i| targets[i * s..(i + 1) * s].iter().cloned()).collect();
            let from_image = model.decoder.teacher_forced(&v_t.reshape((b * s, d))?, &tgt)?;
            let u_t = model.text_space.text_encode(model.text_encoder.as_ref(), &tgt)?;
            let from_text = model.decoder.teacher_forced(&u_t, &tgt)?;
            let tokens: usize = tgt.iter().map(TokenSequence::len).sum();
            let loss = (llm_alignment_loss(&tgt, &from_image, &from_text)? / tokens as f64)?;
            let value = to_f64(&loss)?[0];
            if !value.is_finite() {
                return Err(Error::Loss("alignment loss diverged".into()));
            }
            opt.step(&loss)?;
            total += value;
            steps += 1;
        }
        losses.push(total / steps.max(1) as f64);
        log::info!("stage 2 epoch {}: loss {:.4}", losses.len(), losses[losses.len() - 1]);
    }
    check_frozen(&frozen, &frozen_fingerprint(model, STAGE2_PREFIXES)?, 2)?;
    let (bleu4, verbatim) = memorization(model, cache, train)?;
    let metrics = BTreeMap::from([("stage2_train_bleu_4".to_string(), bleu4), ("stage2_train_verbatim".to_string(), verbatim)]);
    model.metrics.extend(metrics.clone());
    model.stages.stage2 = true;
    Ok(StageReport { stage: 2, losses, metrics })
}

/// Stage 3: the three survival encoders, both fusion modules and the risk
/// predictor under the Cox loss; everything else frozen.
pub fn stage3(model: &mut Model, data: &PreparedData) -> Result<StageReport> {
    require(model.stages.stage2, "stage 2")?;
    let frozen = frozen_fingerprint(model, STAGE3_PREFIXES)?;
    let cfg = model.config.stage3.clone();
    let mut rng = stage_rng(model, 3);
    model.scaler = Some(ClinicalScaler::fit(&data.samples.train, model.config.model.clinical_dim, &CONTINUOUS_CLINICAL)?);
    let m: &Model = model;
    let train = &data.samples.train;
    let f_sur = survival_features(m, &data.features.train)?;
    let v_t = text_features(m, &data.features.train, &f_sur)?;
    let rows: Vec<&[f32]> = train.iter().map(|s| s.survival.clinical.as_slice()).collect();
    let clinical = m.clinical_tensor(&rows)?;
    let risk = |batch: &[usize]| -> Result<Tensor> {
        let i = Tensor::from_vec(batch.iter().map(|i| *i as u32).collect::<Vec<_>>(), batch.len(), f_sur.device())?;
        m.fused_risk(&v_t.index_select(&i, 0)?, &f_sur.index_select(&i, 0)?, &clinical.index_select(&i, 0)?)
    };
    let validate = || c_index_of(&fused_risks(m, &data.features.val, &data.samples.val)?, &data.samples.val);
    let (losses, val_c) = survival_loop("stage 3", m, STAGE3_PREFIXES, &cfg, train, &mut rng, &risk, &validate)?;
    let test_c = c_index_of(&fused_risks(m, &data.features.test, &data.samples.test)?, &data.samples.test)?;
    check_frozen(&frozen, &frozen_fingerprint(model, STAGE3_PREFIXES)?, 3)?;
    let metrics = BTreeMap::from([("stage3_val_c_index".to_string(), val_c), ("stage3_test_c_index".to_string(), test_c)]);
    model.metrics.extend(metrics.clone());
    model.stages.stage3 = true;
    Ok(StageReport { stage: 3, losses, metrics })
}

/// Completer training, feature extraction and stage 1 from scratch.
pub fn start(config: ExperimentConfig, samples: &[CohortSample]) -> Result<(Model, PreparedData, StageReport)> {
    let table = config.region_table()?;
    let splits = split_cohort(&config, samples)?;
    let mut model = init_model(config, table, &splits.train)?;
    let completer_losses = train_completer_stage(&mut model, &splits.train)?;
    if let Some(last) = completer_losses.last() {
        model.metrics.insert("completer_final_loss".into(), *last);
    }
    log::info!("completer trained; extracting features");
    let data = PreparedData::new(&model, splits)?;
    log::info!("features ready");
    let report = stage1(&mut model, &data)?;
    Ok((model, data, report))
}

/// All three stages.
pub fn train_all(config: ExperimentConfig, samples: &[CohortSample]) -> Result<(Model, Vec<StageReport>)> {
    let (mut model, data, r1) = start(config, samples)?;
    let r2 = stage2(&mut model, &data)?;
    let r3 = stage3(&mut model, &data)?;
    Ok((model, vec![r1, r2, r3]))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{SurvivalRecord, Radiograph, RegionSet, StructuredReport};
    use crate::data::synth::canonical_layout;

    fn sample(event: bool) -> CohortSample {
        CohortSample {
            id: "x".into(),
            image: Radiograph::zeros(4, 4),
            regions: RegionSet::fully_detected(canonical_layout()),
            report: StructuredReport::new(std::array::from_fn(|_| "a".to_string())),
            survival: SurvivalRecord { time_days: 1.0, event, clinical: vec![] },
            meta: None,
        }
    }

    #[test]
    fn batches_always_hold_an_event_and_two_samples() {
        let mut samples: Vec<CohortSample> = (0..23).map(|_| sample(false)).collect();
        samples[7] = sample(true);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            let batches = survival_batches(&samples, 4, &mut rng).unwrap();
            assert_eq!(batches.len(), 6);
            for b in batches {
                assert!(b.len() >= 2 && b.len() <= 4);
                assert!(b.iter().any(|&i| samples[i].survival.event));
            }
        }
    }

    #[test]
    fn all_censored_is_a_data_error() {
        let samples: Vec<CohortSample> = (0..5).map(|_| sample(false)).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(matches!(survival_batches(&samples, 2, &mut rng), Err(Error::Data(_))));
    }
}
