//! Inference, regional risk attention and evaluation.

use std::path::Path;

use candle_core::{DType, Tensor, Var, D};
use serde::{Deserialize, Serialize};

use crate::data::{CohortSample, Radiograph, RegionSet, StructuredReport, NUM_REGIONS};
use crate::error::{Error, Result};
use crate::eval::{bleu_n, meteor_variant, rouge_l, text_metrics, write_sample_csv, Labeler, MetricReport, RegionRiskScores, SampleRow};
use crate::language::normalize;
use crate::survival::{concordance_index, RiskBatch};
use crate::visual::RegionPatches;

use super::features::{extract_features, FeatureCache};
use super::model::Model;
use super::plugins;
use super::train::{survival_features, text_features};

/// Everything the pipeline produces for one image.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InferenceOutput {
    pub regions: RegionSet,
    pub report: StructuredReport,
    pub risk: f64,
    pub region_scores: RegionRiskScores,
}

fn require_trained(model: &Model) -> Result<()> {
    let s = model.stages;
    if s.stage1 && s.stage2 && s.stage3 {
        Ok(())
    } else {
        Err(Error::Ordering("inference needs a model trained through stage 3".into()))
    }
}

/// Grad-CAM style scores for a batch. The weight of region `j` is the
/// gradient of the fused risk with respect to its region feature at the
/// input of the local sentence embedders; the score is
/// `ReLU(sum_c g_jc f_jc) * sigmoid(risk)`. Regions outside every sentence
/// group receive no gradient and score 0.
pub fn regional_risk_attention(model: &Model, patches: &RegionPatches, f_sur: &Tensor, clinical: &Tensor) -> Result<Vec<RegionRiskScores>> {
    let features = Var::from_tensor(&model.region_features(patches)?.features.detach())?;
    let v_i = model.sentence_features(features.as_tensor(), f_sur)?;
    let v_t = model.text_space.image_features(&v_i)?;
    let risk = model.fused_risk(&v_t, &f_sur.detach(), clinical)?;
    let grads = risk.sum_all()?.backward()?;
    let g = match grads.get(features.as_tensor()) {
        Some(g) => g.clone(),
        None => features.as_tensor().zeros_like()?,
    };
    let contribution = (g * features.as_tensor())?.sum(D::Minus1)?.narrow(1, 0, NUM_REGIONS)?.relu()?;
    let weight = candle_nn::ops::sigmoid(&risk)?.unsqueeze(1)?;
    let scores = contribution.broadcast_mul(&weight)?.to_dtype(DType::F64)?.to_vec2::<f64>()?;
    let risks = risk.to_dtype(DType::F64)?.to_vec1::<f64>()?;
    scores
        .into_iter()
        .zip(risks)
        .map(|(scores, global_risk)| {
            let r = RegionRiskScores { scores, global_risk };
            r.validate()?;
            Ok(r)
        })
        .collect()
}

/// Risks, reports and region scores of cached samples.
pub struct Predictions {
    pub risks: Vec<f64>,
    pub reports: Vec<StructuredReport>,
    pub region_scores: Vec<RegionRiskScores>,
}

/// Runs the trained heads over cached features. `clinical` holds the raw
/// (unscaled) covariates of every row.
pub fn predict(model: &Model, cache: &FeatureCache, clinical: &[&[f32]]) -> Result<Predictions> {
    require_trained(model)?;
    let f_sur = survival_features(model, cache)?;
    let v_t = text_features(model, cache, &f_sur)?;
    let clinical = model.clinical_tensor(clinical)?;
    let risks = model.fused_risk(&v_t, &f_sur, &clinical)?.to_dtype(DType::F64)?.to_vec1::<f64>()?;
    if risks.iter().any(|r| !r.is_finite()) {
        return Err(Error::Evaluation("the model produced non-finite risks".into()));
    }
    let reports = model.generate(&v_t)?;
    let region_scores = regional_risk_attention(model, &cache.patches, &f_sur, &clinical)?;
    Ok(Predictions { risks, reports, region_scores })
}

/// The full pipeline on one image: detect, complete, encode, decode, fuse
/// and score regions. `detector` overrides the configured inference
/// detector.
pub fn run_inference(model: &Model, image: &Radiograph, clinical: &[f32], detector: Option<&str>) -> Result<InferenceOutput> {
    require_trained(model)?;
    let key = detector.unwrap_or(&model.config.plugins.inference_detector);
    let detector = plugins::detector(key, &model.config.detector)?;
    let cache = extract_features(model, detector.as_ref(), &["input".to_string()], &[image], &[None])?;
    let mut p = predict(model, &cache, &[clinical])?;
    Ok(InferenceOutput {
        regions: cache.regions[0].clone(),
        report: p.reports.remove(0),
        risk: p.risks[0],
        region_scores: p.region_scores.remove(0),
    })
}

fn as_str(v: &[String]) -> Vec<&str> {
    v.iter().map(String::as_str).collect()
}

/// Metrics and per-sample rows of an annotated split.
pub struct Evaluation {
    pub metrics: MetricReport,
    pub rows: Vec<SampleRow>,
}

/// Evaluates cached samples: whole-report text metrics, the fused C-index
/// and one row per sample.
pub fn evaluate(model: &Model, cache: &FeatureCache, samples: &[CohortSample], labeler: &dyn Labeler) -> Result<Evaluation> {
    let clinical: Vec<&[f32]> = samples.iter().map(|s| s.survival.clinical.as_slice()).collect();
    let p = predict(model, cache, &clinical)?;
    let references: Vec<StructuredReport> = samples.iter().map(|s| s.report.clone()).collect();
    let mut metrics = text_metrics(&p.reports, &references, labeler)?;
    let times = samples.iter().map(|s| s.survival.time_days).collect();
    let events = samples.iter().map(|s| s.survival.event).collect();
    metrics.c_index = concordance_index(&RiskBatch::new(p.risks.clone(), times, events)?).ok();
    metrics.validate()?;
    let mut rows = Vec::with_capacity(samples.len());
    for (i, s) in samples.iter().enumerate() {
        let cand: Vec<String> = p.reports[i].sentences.iter().flat_map(|t| normalize(t)).collect();
        let reference: Vec<String> = s.report.sentences.iter().flat_map(|t| normalize(t)).collect();
        rows.push(SampleRow {
            id: s.id.clone(),
            risk: p.risks[i],
            time_days: s.survival.time_days,
            event: s.survival.event,
            bleu_4: bleu_n(&cand, &reference, 4)?,
            rouge_l: rouge_l(&cand, &reference),
            meteor_variant: meteor_variant(&as_str(&cand), &as_str(&reference)),
            region_scores: p.region_scores[i].scores.clone(),
        });
    }
    Ok(Evaluation { metrics, rows })
}

/// Writes the metric report as JSON and the per-sample rows as CSV next to
/// it (`<report stem>.csv`).
pub fn write_evaluation(eval: &Evaluation, report: &Path) -> Result<()> {
    if let Some(dir) = report.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    std::fs::write(report, serde_json::to_string_pretty(&eval.metrics)?)?;
    write_sample_csv(&report.with_extension("csv"), &eval.rows)
}
