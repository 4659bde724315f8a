use std::path::Path;

use image::{GrayImage, Luma};
use serde::{Deserialize, Serialize};

use super::ce::{corpus_ce_metrics, Labeler};
use super::nlg::{cider_d, corpus_bleu, meteor_variant, rouge_l};
use crate::data::{StructuredReport, NUM_REGIONS};
use crate::error::{Error, Result};
use crate::language::normalize;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub bleu_1: f64,
    pub bleu_2: f64,
    pub bleu_3: f64,
    pub bleu_4: f64,
    pub meteor_variant: f64,
    pub rouge_l: f64,
    pub cider_d: f64,
    pub ce_precision: f64,
    pub ce_recall: f64,
    pub ce_f1: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub c_index: Option<f64>,
}

impl MetricReport {
    pub fn validate(&self) -> Result<()> {
        let unit = [
            self.bleu_1,
            self.bleu_2,
            self.bleu_3,
            self.bleu_4,
            self.meteor_variant,
            self.rouge_l,
            self.ce_precision,
            self.ce_recall,
            self.ce_f1,
        ];
        if unit.iter().chain(&self.c_index).any(|v| !(0.0..=1.0).contains(v)) || !(0.0..=10.0).contains(&self.cider_d) {
            return Err(Error::Metric(format!("metric outside its range: {self:?}")));
        }
        Ok(())
    }
}

/// Per-region non-negative risk-attention scores and the global risk used to
/// re-weight them.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegionRiskScores {
    pub scores: Vec<f64>,
    pub global_risk: f64,
}

impl RegionRiskScores {
    pub fn validate(&self) -> Result<()> {
        if self.scores.len() != NUM_REGIONS {
            return Err(Error::shape(format!("{} region scores, expected {NUM_REGIONS}", self.scores.len())));
        }
        if self.scores.iter().any(|s| !(*s >= 0.0)) || !self.global_risk.is_finite() {
            return Err(Error::Evaluation("risk-attention scores must be finite and non-negative".into()));
        }
        Ok(())
    }
}

fn as_str(v: &[String]) -> Vec<&str> {
    v.iter().map(String::as_str).collect()
}

fn report_tokens(r: &StructuredReport) -> Vec<String> {
    r.sentences.iter().flat_map(|s| normalize(s)).collect()
}

/// Text metrics over whole reports (all five sentences in order). BLEU and
/// CIDEr-D are corpus-level; METEOR and ROUGE-L are averaged over reports.
pub fn text_metrics(generated: &[StructuredReport], reference: &[StructuredReport], labeler: &dyn Labeler) -> Result<MetricReport> {
    if generated.len() != reference.len() || generated.is_empty() {
        return Err(Error::Metric(format!("{} generated reports for {} references", generated.len(), reference.len())));
    }
    let cand: Vec<Vec<String>> = generated.iter().map(report_tokens).collect();
    let refs: Vec<Vec<String>> = reference.iter().map(report_tokens).collect();
    let n = cand.len() as f64;
    let meteor = cand.iter().zip(&refs).map(|(c, r)| meteor_variant(&as_str(c), &as_str(r))).sum::<f64>() / n;
    let rouge = cand.iter().zip(&refs).map(|(c, r)| rouge_l(c, r)).sum::<f64>() / n;
    let ref_sets: Vec<Vec<Vec<String>>> = refs.iter().map(|r| vec![r.clone()]).collect();
    let ce = corpus_ce_metrics(generated, reference, labeler)?;
    Ok(MetricReport {
        bleu_1: corpus_bleu(&cand, &refs, 1)?,
        bleu_2: corpus_bleu(&cand, &refs, 2)?,
        bleu_3: corpus_bleu(&cand, &refs, 3)?,
        bleu_4: corpus_bleu(&cand, &refs, 4)?,
        meteor_variant: meteor,
        rouge_l: rouge,
        cider_d: cider_d(&cand, &ref_sets)?,
        ce_precision: ce.precision,
        ce_recall: ce.recall,
        ce_f1: ce.f1,
        c_index: None,
    })
}

/// One row per sample: id, risk, survival outcome, sentence-level scores
/// and the 29 region scores.
#[derive(Clone, Debug, PartialEq)]
pub struct SampleRow {
    pub id: String,
    pub risk: f64,
    pub time_days: f64,
    pub event: bool,
    pub bleu_4: f64,
    pub rouge_l: f64,
    pub meteor_variant: f64,
    pub region_scores: Vec<f64>,
}

pub fn write_sample_csv(path: &Path, rows: &[SampleRow]) -> Result<()> {
    let io = |e: csv::Error| Error::Io(e.into());
    let mut w = csv::Writer::from_path(path).map_err(io)?;
    let mut header: Vec<String> = ["sample_id", "risk", "time_days", "event", "bleu_4", "rouge_l", "meteor_variant"].map(String::from).to_vec();
    header.extend((1..=NUM_REGIONS).map(|j| format!("region_{j}")));
    w.write_record(&header).map_err(io)?;
    for r in rows {
        let mut rec = vec![
            r.id.clone(),
            r.risk.to_string(),
            r.time_days.to_string(),
            u8::from(r.event).to_string(),
            r.bleu_4.to_string(),
            r.rouge_l.to_string(),
            r.meteor_variant.to_string(),
        ];
        rec.extend(r.region_scores.iter().map(f64::to_string));
        w.write_record(&rec).map_err(io)?;
    }
    w.flush()?;
    Ok(())
}

/// Renders scores as a grayscale bar chart, one bar per region, scaled to
/// the largest score.
pub fn render_bar_chart(path: &Path, scores: &[f64]) -> Result<()> {
    const BAR: u32 = 12;
    const GAP: u32 = 4;
    const HEIGHT: u32 = 160;
    let width = GAP + scores.len() as u32 * (BAR + GAP);
    let mut img = GrayImage::from_pixel(width.max(1), HEIGHT, Luma([255]));
    let top = scores.iter().cloned().fold(0.0f64, f64::max);
    for (i, s) in scores.iter().enumerate() {
        let h = if top > 0.0 { ((s / top) * (HEIGHT - 10) as f64).round() as u32 } else { 0 };
        let x0 = GAP + i as u32 * (BAR + GAP);
        for x in x0..x0 + BAR {
            for y in HEIGHT - h..HEIGHT {
                img.put_pixel(x, y, Luma([40]));
            }
        }
    }
    img.save(path).map_err(|e| Error::Io(std::io::Error::other(e)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::eval::ce::KeywordLabeler;

    fn reports() -> Vec<StructuredReport> {
        vec![
            StructuredReport::new([
                "the lungs are clear .",
                "no pleural effusion or pneumothorax .",
                "the cardiomediastinal silhouette is within normal limits .",
                "no acute osseous abnormality .",
                "no acute cardiopulmonary process .",
            ]
            .map(String::from)),
            StructuredReport::new([
                "there is mild opacity in the left mid lung zone .",
                "no pleural effusion or pneumothorax .",
                "the cardiac silhouette is enlarged .",
                "no acute osseous abnormality .",
                "findings are consistent with mild multifocal pneumonia .",
            ]
            .map(String::from)),
        ]
    }

    #[test]
    fn identity_scores_are_maximal() {
        let r = reports();
        let m = text_metrics(&r, &r, &KeywordLabeler::default_lexicon()).unwrap();
        m.validate().unwrap();
        for v in [m.bleu_1, m.bleu_4, m.rouge_l, m.ce_f1] {
            assert!((v - 1.0).abs() < 1e-12);
        }
        assert!(m.cider_d > 0.0);
        let json = serde_json::to_string(&m).unwrap();
        assert!(!json.contains("c_index"));
    }

    #[test]
    fn csv_and_chart() {
        let dir = tempfile::tempdir().unwrap();
        let row = SampleRow {
            id: "s1".into(),
            risk: 0.5,
            time_days: 3.0,
            event: true,
            bleu_4: 1.0,
            rouge_l: 1.0,
            meteor_variant: 0.9,
            region_scores: vec![0.0; NUM_REGIONS],
        };
        write_sample_csv(&dir.path().join("s.csv"), &[row]).unwrap();
        let text = std::fs::read_to_string(dir.path().join("s.csv")).unwrap();
        assert_eq!(text.lines().count(), 2);
        assert!(text.lines().next().unwrap().ends_with("region_29"));
        let p = dir.path().join("bars.png");
        render_bar_chart(&p, &(0..29).map(|i| i as f64).collect::<Vec<_>>()).unwrap();
        assert!(image::open(&p).is_ok());
    }

    #[test]
    fn invalid_scores_rejected() {
        let bad = RegionRiskScores { scores: vec![-1.0; NUM_REGIONS], global_risk: 0.0 };
        assert!(bad.validate().is_err());
        let mut m = MetricReport::default();
        m.cider_d = 11.0;
        assert!(m.validate().is_err());
    }
}
