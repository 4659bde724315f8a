//! Clinical-efficacy metrics over observation labels.

use serde::Deserialize;

use crate::data::{StructuredReport, SCHEMA_VERSION};
use crate::error::{Error, Result};
use crate::language::normalize;

/// Maps a report to a fixed-length vector of binary observations.
pub trait Labeler: Send + Sync {
    fn name(&self) -> &str;
    fn slots(&self) -> &[String];
    fn label(&self, report: &StructuredReport) -> Vec<bool>;
}

#[derive(Deserialize)]
struct LexiconFile {
    schema_version: String,
    negations: Vec<String>,
    slots: Vec<SlotFile>,
}

#[derive(Deserialize)]
struct SlotFile {
    name: String,
    keywords: Vec<String>,
}

const DEFAULT_LEXICON: &str = include_str!("../../../../configs/labeler_lexicon.json");

/// Phrase-matching labeler. A slot is positive when one of its keyword
/// phrases occurs in a sentence with no negation cue before it; a slot with
/// no keywords is the "no finding" slot, positive when nothing else is.
#[derive(Clone, Debug)]
pub struct KeywordLabeler {
    names: Vec<String>,
    keywords: Vec<Vec<Vec<String>>>,
    negations: Vec<Vec<String>>,
}

fn find(haystack: &[String], needle: &[String]) -> Option<usize> {
    if needle.is_empty() || needle.len() > haystack.len() {
        return None;
    }
    haystack.windows(needle.len()).position(|w| w == needle)
}

impl KeywordLabeler {
    pub fn from_json(text: &str) -> Result<Self> {
        let f: LexiconFile = serde_json::from_str(text)?;
        if f.schema_version != SCHEMA_VERSION {
            return Err(Error::Config(format!("unknown lexicon schema version {:?}", f.schema_version)));
        }
        if f.slots.is_empty() {
            return Err(Error::Config("lexicon has no slots".into()));
        }
        Ok(KeywordLabeler {
            names: f.slots.iter().map(|s| s.name.clone()).collect(),
            keywords: f.slots.iter().map(|s| s.keywords.iter().map(|k| normalize(k)).collect()).collect(),
            negations: f.negations.iter().map(|n| normalize(n)).collect(),
        })
    }

    pub fn default_lexicon() -> Self {
        Self::from_json(DEFAULT_LEXICON).expect("bundled lexicon is valid")
    }

    fn sentence_mentions(&self, tokens: &[String], phrase: &[String]) -> bool {
        let Some(at) = find(tokens, phrase) else { return false };
        !self.negations.iter().any(|n| find(&tokens[..at], n).is_some())
    }
}

impl Labeler for KeywordLabeler {
    fn name(&self) -> &str {
        "keyword"
    }

    fn slots(&self) -> &[String] {
        &self.names
    }

    fn label(&self, report: &StructuredReport) -> Vec<bool> {
        let sentences: Vec<Vec<String>> = report.sentences.iter().map(|s| normalize(s)).collect();
        let mut out: Vec<bool> = self
            .keywords
            .iter()
            .map(|phrases| phrases.iter().any(|p| sentences.iter().any(|s| self.sentence_mentions(s, p))))
            .collect();
        let any = out.iter().zip(&self.keywords).any(|(v, k)| *v && !k.is_empty());
        for (v, k) in out.iter_mut().zip(&self.keywords) {
            if k.is_empty() {
                *v = !any;
            }
        }
        out
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct CeScores {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

/// Micro-averaged scores from confusion counts; both sides all negative
/// scores 1, otherwise empty denominators score 0.
pub fn ce_from_counts(tp: usize, fp: usize, fn_: usize) -> CeScores {
    if tp + fp + fn_ == 0 {
        return CeScores { precision: 1.0, recall: 1.0, f1: 1.0 };
    }
    let precision = if tp + fp == 0 { 0.0 } else { tp as f64 / (tp + fp) as f64 };
    let recall = if tp + fn_ == 0 { 0.0 } else { tp as f64 / (tp + fn_) as f64 };
    let f1 = if precision + recall == 0.0 { 0.0 } else { 2.0 * precision * recall / (precision + recall) };
    CeScores { precision, recall, f1 }
}

fn counts(generated: &[bool], reference: &[bool]) -> (usize, usize, usize) {
    let mut c = (0, 0, 0);
    for (g, r) in generated.iter().zip(reference) {
        match (g, r) {
            (true, true) => c.0 += 1,
            (true, false) => c.1 += 1,
            (false, true) => c.2 += 1,
            _ => {}
        }
    }
    c
}

/// Label-vector comparison of one generated report against its reference.
pub fn ce_metrics(generated: &StructuredReport, reference: &StructuredReport, labeler: &dyn Labeler) -> CeScores {
    let (tp, fp, fn_) = counts(&labeler.label(generated), &labeler.label(reference));
    ce_from_counts(tp, fp, fn_)
}

/// Micro-average over every slot of every report pair.
pub fn corpus_ce_metrics(generated: &[StructuredReport], reference: &[StructuredReport], labeler: &dyn Labeler) -> Result<CeScores> {
    if generated.len() != reference.len() {
        return Err(Error::Metric(format!("{} generated reports for {} references", generated.len(), reference.len())));
    }
    let (mut tp, mut fp, mut fn_) = (0, 0, 0);
    for (g, r) in generated.iter().zip(reference) {
        let c = counts(&labeler.label(g), &labeler.label(r));
        tp += c.0;
        fp += c.1;
        fn_ += c.2;
    }
    Ok(ce_from_counts(tp, fp, fn_))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn report(s: [&str; 5]) -> StructuredReport {
        StructuredReport::new(s.map(String::from))
    }

    fn normal() -> StructuredReport {
        report([
            "the lungs are clear .",
            "no pleural effusion or pneumothorax .",
            "the cardiomediastinal silhouette is within normal limits .",
            "no acute osseous abnormality .",
            "no acute cardiopulmonary process .",
        ])
    }

    fn sick() -> StructuredReport {
        report([
            "there is severe opacity in the right lower lung zone .",
            "there is a small right pleural effusion .",
            "the cardiac silhouette is enlarged .",
            "no acute osseous abnormality .",
            "findings are consistent with severe multifocal pneumonia .",
        ])
    }

    #[test]
    fn labels_follow_keywords_and_negation() {
        let l = KeywordLabeler::default_lexicon();
        assert_eq!(l.slots().len(), 14);
        let n = l.label(&normal());
        assert!(n[0]);
        assert_eq!(n.iter().filter(|v| **v).count(), 1);
        let s = l.label(&sick());
        let on: Vec<&str> = l.slots().iter().zip(&s).filter(|(_, v)| **v).map(|(n, _)| n.as_str()).collect();
        assert_eq!(on, vec!["cardiomegaly", "lung opacity", "pneumonia", "pleural effusion"]);
    }

    #[test]
    fn identical_and_subset() {
        let l = KeywordLabeler::default_lexicon();
        assert_eq!(ce_metrics(&sick(), &sick(), &l), CeScores { precision: 1.0, recall: 1.0, f1: 1.0 });
        let mut partial = sick();
        partial.sentences[2] = "the cardiomediastinal silhouette is within normal limits .".into();
        let s = ce_metrics(&partial, &sick(), &l);
        assert_eq!(s.precision, 1.0);
        assert!(s.recall < 1.0);
    }

    #[test]
    fn counts_match_confusion_matrix() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..100 {
            let g: Vec<bool> = (0..14).map(|_| rng.random_bool(0.4)).collect();
            let r: Vec<bool> = (0..14).map(|_| rng.random_bool(0.4)).collect();
            let (mut tp, mut fp, mut fn_) = (0.0, 0.0, 0.0);
            for i in 0..14 {
                tp += (g[i] && r[i]) as u8 as f64;
                fp += (g[i] && !r[i]) as u8 as f64;
                fn_ += (!g[i] && r[i]) as u8 as f64;
            }
            let (a, b, c) = counts(&g, &r);
            let s = ce_from_counts(a, b, c);
            if tp + fp > 0.0 {
                assert_eq!(s.precision, tp / (tp + fp));
            }
            if tp + fn_ > 0.0 {
                assert_eq!(s.recall, tp / (tp + fn_));
            }
        }
        assert_eq!(ce_from_counts(0, 0, 0).f1, 1.0);
        assert_eq!(ce_from_counts(0, 2, 0).f1, 0.0);
    }

    #[test]
    fn rejects_unknown_schema() {
        assert!(KeywordLabeler::from_json(r#"{"schema_version":"x","negations":[],"slots":[{"name":"a","keywords":[]}]}"#).is_err());
    }
}
