use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::synth::canonical_layout;
use crate::data::{BoundingBox, Radiograph, RegionSet, NUM_REGIONS};
use crate::error::{Error, Result};

/// 29 region classes followed by background.
pub const NUM_CLASSES: usize = NUM_REGIONS + 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Proposal {
    pub bbox: BoundingBox,
    /// Class scores; index `j` is region `j + 1`, the last is background.
    pub scores: Vec<f32>,
}

impl Proposal {
    /// Index of the top-scoring class (lowest index on ties).
    pub fn argmax(&self) -> usize {
        let mut best = 0;
        for (i, s) in self.scores.iter().enumerate() {
            if *s > self.scores[best] {
                best = i;
            }
        }
        best
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ProposalSet {
    pub proposals: Vec<Proposal>,
}

impl ProposalSet {
    pub fn validate(&self) -> Result<()> {
        for (i, p) in self.proposals.iter().enumerate() {
            if p.scores.len() != NUM_CLASSES {
                return Err(Error::shape(format!("proposal {i} has {} scores, expected {NUM_CLASSES}", p.scores.len())));
            }
            if p.scores.iter().any(|s| !(0.0..=1.0).contains(s)) {
                return Err(Error::Data(format!("proposal {i} has a score outside [0,1]")));
            }
        }
        Ok(())
    }
}

/// For every region class, the highest-scoring proposal whose top class is
/// that region supplies the box; classes no proposal ranks first stay
/// undetected with the mask placeholder.
pub fn resolve_detections(p: &ProposalSet) -> RegionSet {
    let mut out = RegionSet::undetected();
    let mut best = [f32::NEG_INFINITY; NUM_REGIONS];
    for prop in &p.proposals {
        let c = prop.argmax();
        if c >= NUM_REGIONS || !prop.bbox.is_valid() {
            continue;
        }
        if prop.scores[c] > best[c] {
            best[c] = prop.scores[c];
            out.boxes[c] = prop.bbox;
            out.detected[c] = true;
        }
    }
    out
}

/// What a detector sees: the image and, for oracle detectors, the known
/// boxes of that image.
#[derive(Clone, Copy, Debug)]
pub struct DetectorInput<'a> {
    pub image: &'a Radiograph,
    pub reference: Option<&'a RegionSet>,
}

/// Image to region proposals. `seed` makes any randomness reproducible per
/// call.
pub trait Detector: Send + Sync {
    fn name(&self) -> &str;
    fn detect(&self, input: &DetectorInput<'_>, seed: u64) -> Result<ProposalSet>;
}

fn one_hot_scores(class: usize, confidence: f32, rng: &mut ChaCha8Rng, noise: f32) -> Vec<f32> {
    let mut s: Vec<f32> = (0..NUM_CLASSES).map(|_| if noise > 0.0 { rng.random_range(0.0..noise) } else { 0.0 }).collect();
    s[class] = confidence;
    s
}

/// Emits the reference boxes, dropping each with probability `dropout` and
/// perturbing scores by up to `score_noise`.
#[derive(Clone, Debug, Default)]
pub struct OracleDetector {
    pub dropout: f64,
    pub score_noise: f32,
}

impl Detector for OracleDetector {
    fn name(&self) -> &str {
        "oracle"
    }

    fn detect(&self, input: &DetectorInput<'_>, seed: u64) -> Result<ProposalSet> {
        let reference = input
            .reference
            .ok_or_else(|| Error::Config("the oracle detector needs reference boxes".into()))?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let noise = self.score_noise.clamp(0.0, 0.5);
        let mut proposals = Vec::new();
        for j in 0..NUM_REGIONS {
            let drop = rng.random_bool(self.dropout.clamp(0.0, 1.0));
            if !reference.detected[j] || drop {
                continue;
            }
            let confidence = 1.0 - rng.random_range(0.0..=noise);
            proposals.push(Proposal { bbox: reference.boxes[j], scores: one_hot_scores(j, confidence, &mut rng, noise) });
        }
        Ok(ProposalSet { proposals })
    }
}

/// Emits the canonical anatomical layout for every image.
#[derive(Clone, Debug, Default)]
pub struct CanonicalDetector;

impl Detector for CanonicalDetector {
    fn name(&self) -> &str {
        "canonical"
    }

    fn detect(&self, _input: &DetectorInput<'_>, seed: u64) -> Result<ProposalSet> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let proposals = canonical_layout()
            .iter()
            .enumerate()
            .map(|(j, b)| Proposal { bbox: *b, scores: one_hot_scores(j, 1.0, &mut rng, 0.0) })
            .collect();
        Ok(ProposalSet { proposals })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn prop(class: usize, score: f32, b: BoundingBox) -> Proposal {
        let mut scores = vec![0.0; NUM_CLASSES];
        scores[class] = score;
        Proposal { bbox: b, scores }
    }

    #[test]
    fn empty_set_is_all_undetected() {
        assert_eq!(resolve_detections(&ProposalSet::default()), RegionSet::undetected());
    }

    #[test]
    fn single_proposal() {
        let b = BoundingBox::new(0.1, 0.1, 0.3, 0.4);
        let r = resolve_detections(&ProposalSet { proposals: vec![prop(2, 0.8, b)] });
        assert_eq!(r.num_detected(), 1);
        assert!(r.detected[2]);
        assert_eq!(r.boxes[2], b);
    }

    #[test]
    fn highest_score_wins() {
        let a = BoundingBox::new(0.1, 0.1, 0.3, 0.4);
        let b = BoundingBox::new(0.2, 0.2, 0.5, 0.5);
        let r = resolve_detections(&ProposalSet { proposals: vec![prop(2, 0.7, b), prop(2, 0.9, a)] });
        assert_eq!(r.boxes[2], a);
        assert_eq!(r.num_detected(), 1);
    }

    #[test]
    fn background_is_ignored() {
        let b = BoundingBox::new(0.1, 0.1, 0.3, 0.4);
        let r = resolve_detections(&ProposalSet { proposals: vec![prop(NUM_REGIONS, 0.9, b)] });
        assert_eq!(r.num_detected(), 0);
    }

    #[test]
    fn one_per_class_preserves_boxes() {
        let layout = canonical_layout();
        let ps = ProposalSet { proposals: layout.iter().enumerate().map(|(j, b)| prop(j, 0.5 + 0.01 * j as f32, *b)).collect() };
        ps.validate().unwrap();
        let r = resolve_detections(&ps);
        // direct per-class maximum
        for j in 0..NUM_REGIONS {
            let best = ps.proposals.iter().filter(|p| p.argmax() == j).max_by(|a, b| a.scores[j].total_cmp(&b.scores[j])).unwrap();
            assert_eq!(r.boxes[j], best.bbox);
        }
        assert!(r.is_complete());
    }

    #[test]
    fn oracle_dropout_is_seeded() {
        let img = Radiograph::zeros(8, 8);
        let reference = RegionSet::fully_detected(canonical_layout());
        let d = OracleDetector { dropout: 0.3, score_noise: 0.1 };
        let input = DetectorInput { image: &img, reference: Some(&reference) };
        let a = resolve_detections(&d.detect(&input, 5).unwrap());
        assert_eq!(a, resolve_detections(&d.detect(&input, 5).unwrap()));
        assert!(a.num_detected() < NUM_REGIONS);
        for j in 0..NUM_REGIONS {
            if a.detected[j] {
                assert_eq!(a.boxes[j], reference.boxes[j]);
            }
        }
        let none = DetectorInput { image: &img, reference: None };
        assert!(matches!(d.detect(&none, 0), Err(Error::Config(_))));
        assert!(resolve_detections(&CanonicalDetector.detect(&none, 0).unwrap()).is_complete());
    }
}
