use std::cmp::Ordering;

use super::RiskBatch;
use crate::error::{Error, Result};

/// Fenwick tree of counts over risk ranks.
struct Counts(Vec<u64>);

impl Counts {
    fn add(&mut self, rank: usize) {
        let mut i = rank + 1;
        while i < self.0.len() {
            self.0[i] += 1;
            i += i & i.wrapping_neg();
        }
    }

    /// Number of inserted ranks `< rank`.
    fn below(&self, rank: usize) -> u64 {
        let mut i = rank;
        let mut s = 0;
        while i > 0 {
            s += self.0[i];
            i -= i & i.wrapping_neg();
        }
        s
    }
}

/// Fraction of comparable pairs ordered correctly by risk.
///
/// A pair is comparable when the subject with the strictly earlier time had
/// an event; it is concordant when that subject has the higher risk, and
/// counts one half when the risks tie.
pub fn concordance_index(batch: &RiskBatch) -> Result<f64> {
    batch.validate()?;
    if batch.risks.iter().any(|r| r.is_nan()) {
        return Err(Error::Metric("risk scores contain NaN".into()));
    }
    let n = batch.len();
    let mut levels: Vec<f64> = batch.risks.clone();
    levels.sort_by(|a, b| a.partial_cmp(b).unwrap_or(Ordering::Equal));
    levels.dedup();
    let rank = |r: f64| levels.partition_point(|l| *l < r);

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| batch.times[b].partial_cmp(&batch.times[a]).unwrap_or(Ordering::Equal));

    // Walk from the latest time down; the tree holds subjects with strictly
    // later times than the current group.
    let mut tree = Counts(vec![0; levels.len() + 1]);
    let mut inserted = 0u64;
    let (mut half_units, mut comparable) = (0u64, 0u64);
    let mut g = 0;
    while g < n {
        let mut end = g;
        while end < n && batch.times[order[end]] == batch.times[order[g]] {
            end += 1;
        }
        for &i in &order[g..end] {
            if batch.events[i] {
                let r = rank(batch.risks[i]);
                let lower = tree.below(r);
                let tied = tree.below(r + 1) - lower;
                half_units += 2 * lower + tied;
                comparable += inserted;
            }
        }
        for &i in &order[g..end] {
            tree.add(rank(batch.risks[i]));
            inserted += 1;
        }
        g = end;
    }
    if comparable == 0 {
        return Err(Error::Metric("no comparable pairs".into()));
    }
    Ok((half_units as f64 / 2.0) / comparable as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn brute_force(b: &RiskBatch) -> f64 {
        let (mut score, mut pairs) = (0.0, 0.0);
        for i in 0..b.len() {
            for j in 0..b.len() {
                if b.events[i] && b.times[i] < b.times[j] {
                    pairs += 1.0;
                    if b.risks[i] > b.risks[j] {
                        score += 1.0;
                    } else if b.risks[i] == b.risks[j] {
                        score += 0.5;
                    }
                }
            }
        }
        score / pairs
    }

    #[test]
    fn perfect_ranking() {
        let b = RiskBatch::new(vec![3.0, 2.0, 1.0], vec![1.0, 2.0, 3.0], vec![true; 3]).unwrap();
        assert_eq!(concordance_index(&b).unwrap(), 1.0);
    }

    #[test]
    fn all_ties_is_half() {
        let b = RiskBatch::new(vec![0.3; 4], vec![1.0, 2.0, 3.0, 4.0], vec![true, false, true, true]).unwrap();
        assert_eq!(concordance_index(&b).unwrap(), 0.5);
    }

    #[test]
    fn no_comparable_pairs() {
        let b = RiskBatch::new(vec![1.0, 2.0], vec![1.0, 2.0], vec![false, true]).unwrap();
        assert!(matches!(concordance_index(&b), Err(Error::Metric(_))));
    }

    #[test]
    fn matches_pair_enumeration() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..50 {
            let n = rng.random_range(2..=20);
            let risks: Vec<f64> = (0..n).map(|_| rng.random_range(0..5) as f64 * 0.5).collect();
            let times: Vec<f64> = (0..n).map(|_| rng.random_range(0..6) as f64).collect();
            let events: Vec<bool> = (0..n).map(|_| rng.random_bool(0.6)).collect();
            let b = RiskBatch::new(risks, times, events).unwrap();
            match concordance_index(&b) {
                Ok(c) => assert_eq!(c, brute_force(&b)),
                Err(_) => assert!(brute_force(&b).is_nan()),
            }
        }
    }

    #[test]
    fn invariant_under_increasing_transform() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let n = 30;
        let risks: Vec<f64> = (0..n).map(|_| rng.random_range(-2.0..2.0)).collect();
        let times: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..10.0)).collect();
        let events: Vec<bool> = (0..n).map(|_| rng.random_bool(0.5)).collect();
        let a = concordance_index(&RiskBatch::new(risks.clone(), times.clone(), events.clone()).unwrap()).unwrap();
        let b = concordance_index(&RiskBatch::new(risks.iter().map(|r| r.exp() * 3.0 + 1.0).collect(), times, events).unwrap()).unwrap();
        assert_eq!(a, b);
    }
}
