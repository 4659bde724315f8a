use candle_core::{Device, Tensor};

use super::vocab::TokenSequence;
use crate::error::{Error, Result};

/// `-sum_i sum_k log p(x_ik)` over the real (non-padding) target positions.
///
/// `log_probs` is `(N, T, V)`, aligned with `targets` as produced by
/// teacher forcing: step `k` of row `i` scores `targets[i].ids[k]`.
pub fn sentence_ce_loss(targets: &[TokenSequence], log_probs: &Tensor) -> Result<Tensor> {
    let (n, t, v) = log_probs.dims3().map_err(|_| Error::shape(format!("log-probabilities must be (N,T,V), got {:?}", log_probs.dims())))?;
    if n != targets.len() {
        return Err(Error::shape(format!("{n} rows of log-probabilities for {} targets", targets.len())));
    }
    let mut ids = vec![0u32; n * t];
    let mut mask = vec![0f64; n * t];
    for (i, s) in targets.iter().enumerate() {
        if s.len() > t {
            return Err(Error::shape(format!("target {i} has {} tokens but only {t} steps were scored", s.len())));
        }
        for (k, &id) in s.ids.iter().enumerate() {
            if id as usize >= v {
                return Err(Error::shape(format!("target id {id} outside a vocabulary of {v}")));
            }
            ids[i * t + k] = id;
            mask[i * t + k] = 1.0;
        }
    }
    let ids = Tensor::from_vec(ids, (n * t, 1), &Device::Cpu)?;
    let mask = Tensor::from_vec(mask, n * t, &Device::Cpu)?.to_dtype(log_probs.dtype())?;
    let picked = log_probs.reshape((n * t, v))?.gather(&ids, 1)?.squeeze(1)?;
    Ok(picked.mul(&mask)?.sum_all()?.neg()?)
}

/// Sum of the cross-entropy of the image-feature branch and the text-feature
/// branch, both teacher-forced through the same decoder.
pub fn llm_alignment_loss(targets: &[TokenSequence], from_image: &Tensor, from_text: &Tensor) -> Result<Tensor> {
    Ok((sentence_ce_loss(targets, from_image)? + sentence_ce_loss(targets, from_text)?)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::language::vocab::EOS;

    fn uniform(n: usize, t: usize, v: usize) -> Tensor {
        Tensor::full(-(v as f64).ln(), (n, t, v), &Device::Cpu).unwrap()
    }

    /// Log-probability 0 on the target ids, a very negative value elsewhere.
    fn perfect(targets: &[TokenSequence], t: usize, v: usize) -> Tensor {
        let mut data = vec![-1e4f64; targets.len() * t * v];
        for (i, s) in targets.iter().enumerate() {
            for (k, &id) in s.ids.iter().enumerate() {
                data[(i * t + k) * v + id as usize] = 0.0;
            }
        }
        Tensor::from_vec(data, (targets.len(), t, v), &Device::Cpu).unwrap()
    }

    fn scalar(t: Tensor) -> f64 {
        t.to_scalar::<f64>().unwrap()
    }

    #[test]
    fn perfect_prediction_costs_nothing() {
        let targets = [TokenSequence::new(vec![4, 5, EOS]), TokenSequence::new(vec![EOS])];
        assert_eq!(scalar(sentence_ce_loss(&targets, &perfect(&targets, 3, 10)).unwrap()), 0.0);
    }

    #[test]
    fn uniform_costs_length_times_log_vocab() {
        let targets = [TokenSequence::new(vec![4, 5, EOS])];
        let got = scalar(sentence_ce_loss(&targets, &uniform(1, 4, 10)).unwrap());
        assert!((got - 3.0 * 10f64.ln()).abs() < 1e-9);
        assert!((got - 6.9078).abs() < 1e-4);
    }

    #[test]
    fn alignment_loss_adds_branches() {
        let targets = [TokenSequence::new(vec![4, 5, EOS])];
        let both = llm_alignment_loss(&targets, &perfect(&targets, 3, 10), &perfect(&targets, 3, 10)).unwrap();
        assert_eq!(scalar(both), 0.0);
        let mixed = scalar(llm_alignment_loss(&targets, &perfect(&targets, 3, 10), &uniform(1, 3, 10)).unwrap());
        assert!((mixed - 3.0 * 10f64.ln()).abs() < 1e-9);
    }

    #[test]
    fn misaligned_lengths_are_shape_errors() {
        let targets = [TokenSequence::new(vec![4, 5, 6, EOS])];
        assert!(matches!(sentence_ce_loss(&targets, &uniform(1, 3, 10)), Err(Error::Shape(_))));
        assert!(matches!(sentence_ce_loss(&targets, &uniform(2, 4, 10)), Err(Error::Shape(_))));
    }
}
