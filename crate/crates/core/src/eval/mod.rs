//! Report-generation metrics, clinical-efficacy labels and metric files.

pub mod ce;
pub mod nlg;
pub mod report;

pub use ce::{ce_metrics, corpus_ce_metrics, CeScores, KeywordLabeler, Labeler};
pub use nlg::{bleu_n, cider_d, corpus_bleu, meteor_variant, rouge_l};
pub use report::{render_bar_chart, text_metrics, write_sample_csv, MetricReport, RegionRiskScores, SampleRow};
