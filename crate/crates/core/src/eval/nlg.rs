//! Sentence-level generation metrics over token slices.

use std::collections::{HashMap, HashSet};
use std::hash::Hash;

use rust_stemmers::{Algorithm, Stemmer};

use crate::error::{Error, Result};

fn ngram_counts<T: Eq + Hash>(tokens: &[T], n: usize) -> HashMap<&[T], usize> {
    let mut m = HashMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *m.entry(w).or_insert(0) += 1;
        }
    }
    m
}

/// Clipped matches and candidate n-gram count for one order.
fn clipped<T: Eq + Hash>(candidate: &[T], reference: &[T], n: usize) -> (usize, usize) {
    let c = ngram_counts(candidate, n);
    let r = ngram_counts(reference, n);
    let matched = c.iter().map(|(g, k)| (*k).min(r.get(g).copied().unwrap_or(0))).sum();
    (matched, candidate.len().saturating_sub(n - 1))
}

/// Geometric mean of the precisions times the brevity penalty. Orders above
/// one with no match use add-one counts, `1 / (total + 1)`.
fn combine(matched: &[usize], totals: &[usize], cand_len: usize, ref_len: usize) -> f64 {
    if cand_len == 0 || matched[0] == 0 {
        return 0.0;
    }
    let mut log_sum = 0.0;
    for (k, (&m, &t)) in matched.iter().zip(totals).enumerate() {
        let p = if k == 0 || m > 0 { m as f64 / t as f64 } else { 1.0 / (t as f64 + 1.0) };
        log_sum += p.ln();
    }
    let bp = if cand_len > ref_len { 1.0 } else { (1.0 - ref_len as f64 / cand_len as f64).exp() };
    bp * (log_sum / matched.len() as f64).exp()
}

fn check_order(n: usize) -> Result<()> {
    if (1..=4).contains(&n) {
        Ok(())
    } else {
        Err(Error::Argument(format!("BLEU order {n} outside 1..=4")))
    }
}

/// Sentence BLEU-n against a single reference.
pub fn bleu_n<T: Eq + Hash>(candidate: &[T], reference: &[T], n: usize) -> Result<f64> {
    check_order(n)?;
    let (matched, totals): (Vec<usize>, Vec<usize>) = (1..=n).map(|k| clipped(candidate, reference, k)).unzip();
    Ok(combine(&matched, &totals, candidate.len(), reference.len()))
}

/// Corpus BLEU-n: clipped counts and lengths are summed over all pairs
/// before combining.
pub fn corpus_bleu<T: Eq + Hash>(candidates: &[Vec<T>], references: &[Vec<T>], n: usize) -> Result<f64> {
    check_order(n)?;
    if candidates.len() != references.len() {
        return Err(Error::Metric(format!("{} candidates for {} references", candidates.len(), references.len())));
    }
    let mut matched = vec![0; n];
    let mut totals = vec![0; n];
    for (c, r) in candidates.iter().zip(references) {
        for k in 1..=n {
            let (m, t) = clipped(c, r, k);
            matched[k - 1] += m;
            totals[k - 1] += t;
        }
    }
    let cand_len = candidates.iter().map(Vec::len).sum();
    let ref_len = references.iter().map(Vec::len).sum();
    Ok(combine(&matched, &totals, cand_len, ref_len))
}

/// Weight of recall relative to precision in the ROUGE-L F-measure.
pub const ROUGE_BETA: f64 = 1.2;

fn lcs<T: Eq>(a: &[T], b: &[T]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    for x in a {
        let mut cur = vec![0usize; b.len() + 1];
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y { prev[j] + 1 } else { cur[j].max(prev[j + 1]) };
        }
        prev = cur;
    }
    prev[b.len()]
}

/// LCS-based F-measure with recall weighted by [`ROUGE_BETA`].
pub fn rouge_l<T: Eq>(candidate: &[T], reference: &[T]) -> f64 {
    let l = lcs(candidate, reference);
    if l == 0 {
        return 0.0;
    }
    let p = l as f64 / candidate.len() as f64;
    let r = l as f64 / reference.len() as f64;
    let b2 = ROUGE_BETA * ROUGE_BETA;
    (1.0 + b2) * p * r / (r + b2 * p)
}

/// Gaussian length-penalty width of CIDEr-D.
pub const CIDER_SIGMA: f64 = 6.0;

struct TfIdf<'a, T> {
    vecs: Vec<HashMap<&'a [T], f64>>,
    norms: Vec<f64>,
    len: usize,
}

fn tfidf<'a, T: Eq + Hash>(tokens: &'a [T], df: &HashMap<&[T], usize>, log_docs: f64, single: bool) -> TfIdf<'a, T> {
    let mut vecs = Vec::with_capacity(4);
    let mut norms = Vec::with_capacity(4);
    for n in 1..=4 {
        let v: HashMap<&[T], f64> = ngram_counts(tokens, n)
            .into_iter()
            .map(|(g, tf)| {
                let idf = if single { log_docs } else { log_docs - (df.get(g).copied().unwrap_or(0).max(1) as f64).ln() };
                (g, tf as f64 * idf)
            })
            .collect();
        norms.push(v.values().map(|x| x * x).sum::<f64>().sqrt());
        vecs.push(v);
    }
    TfIdf { vecs, norms, len: tokens.len() }
}

/// CIDEr-D: clipped tf-idf n-gram cosine over orders 1..4 with a Gaussian
/// length penalty, averaged over references and documents and scaled by 10.
/// Document frequencies come from the reference sets; a one-document corpus
/// uses the constant idf `ln 2`.
pub fn cider_d<T: Eq + Hash>(candidates: &[Vec<T>], references: &[Vec<Vec<T>>]) -> Result<f64> {
    if candidates.len() != references.len() || candidates.is_empty() {
        return Err(Error::Metric(format!("{} candidates for {} reference sets", candidates.len(), references.len())));
    }
    if references.iter().any(Vec::is_empty) {
        return Err(Error::Metric("every candidate needs at least one reference".into()));
    }
    let mut df: HashMap<&[T], usize> = HashMap::new();
    for refs in references {
        let mut seen: HashSet<&[T]> = HashSet::new();
        for r in refs {
            for n in 1..=4 {
                seen.extend(ngram_counts(r, n).into_keys());
            }
        }
        for g in seen {
            *df.entry(g).or_insert(0) += 1;
        }
    }
    let docs = candidates.len();
    let single = docs == 1;
    let log_docs = if single { 2f64.ln() } else { (docs as f64).ln() };
    let mut total = 0.0;
    for (c, refs) in candidates.iter().zip(references) {
        let hyp = tfidf(c, &df, log_docs, single);
        let mut score = 0.0;
        for r in refs {
            let rv = tfidf(r, &df, log_docs, single);
            let delta = hyp.len as f64 - rv.len as f64;
            let penalty = (-(delta * delta) / (2.0 * CIDER_SIGMA * CIDER_SIGMA)).exp();
            for n in 0..4 {
                let dot: f64 = hyp.vecs[n].iter().map(|(g, h)| rv.vecs[n].get(g).map_or(0.0, |x| h.min(*x) * x)).sum();
                if hyp.norms[n] > 0.0 && rv.norms[n] > 0.0 {
                    score += penalty * dot / (hyp.norms[n] * rv.norms[n]);
                }
            }
        }
        total += 10.0 * score / 4.0 / refs.len() as f64;
    }
    Ok(total / docs as f64)
}

/// Unigram alignment of exact matches, then stem matches, each pass taking
/// the leftmost unused reference word. Returns `(candidate, reference)`
/// position pairs in candidate order.
fn align(candidate: &[&str], reference: &[&str]) -> Vec<(usize, usize)> {
    let stemmer = Stemmer::create(Algorithm::English);
    let c_stem: Vec<String> = candidate.iter().map(|w| stemmer.stem(w).into_owned()).collect();
    let r_stem: Vec<String> = reference.iter().map(|w| stemmer.stem(w).into_owned()).collect();
    let mut c_used = vec![false; candidate.len()];
    let mut r_used = vec![false; reference.len()];
    let mut pairs = Vec::new();
    for exact in [true, false] {
        for i in 0..candidate.len() {
            if c_used[i] {
                continue;
            }
            let hit = (0..reference.len()).find(|&j| !r_used[j] && if exact { candidate[i] == reference[j] } else { c_stem[i] == r_stem[j] });
            if let Some(j) = hit {
                c_used[i] = true;
                r_used[j] = true;
                pairs.push((i, j));
            }
        }
    }
    pairs.sort_unstable();
    pairs
}

/// METEOR without synonym matching: `F_mean * (1 - 0.5 (chunks/m)^3)` with
/// `F_mean = 10PR / (R + 9P)` over the exact-then-stem unigram alignment.
pub fn meteor_variant(candidate: &[&str], reference: &[&str]) -> f64 {
    let pairs = align(candidate, reference);
    let m = pairs.len();
    if m == 0 {
        return 0.0;
    }
    let chunks = 1 + pairs.windows(2).filter(|w| !(w[1].0 == w[0].0 + 1 && w[1].1 == w[0].1 + 1)).count();
    let p = m as f64 / candidate.len() as f64;
    let r = m as f64 / reference.len() as f64;
    let f_mean = 10.0 * p * r / (r + 9.0 * p);
    let penalty = 0.5 * (chunks as f64 / m as f64).powi(3);
    f_mean * (1.0 - penalty)
}
