use candle_core::{DType, Device, Tensor};

use super::RiskBatch;
use crate::error::{Error, Result};

/// Negative Cox partial log-likelihood averaged over events:
/// `-(1/N_e) sum_{i: e_i} (r_i - log sum_{j: t_j >= t_i} exp(r_j))`.
///
/// `risks` is a 1-D tensor; the risk set of `i` includes `i` and everyone
/// tied with it (Breslow). Each row's log-sum-exp is shifted by its own
/// maximum.
pub fn coxph_loss_tensor(risks: &Tensor, times: &[f64], events: &[bool]) -> Result<Tensor> {
    let n = risks.dims1().map_err(|_| Error::shape(format!("risks must be 1-D, got {:?}", risks.dims())))?;
    if times.len() != n || events.len() != n {
        return Err(Error::shape(format!("{n} risks for {} times and {} events", times.len(), events.len())));
    }
    let n_events = events.iter().filter(|e| **e).count();
    if n_events == 0 {
        return Err(Error::Loss("no events in batch; the partial likelihood is undefined".into()));
    }
    let mut exclude = vec![0f64; n * n];
    for i in 0..n {
        for j in 0..n {
            if times[j] < times[i] {
                exclude[i * n + j] = -1e30;
            }
        }
    }
    let exclude = Tensor::from_vec(exclude, (n, n), &Device::Cpu)?.to_dtype(risks.dtype())?;
    let lse = exclude.broadcast_add(&risks.unsqueeze(0)?)?.log_sum_exp(1)?;
    let weights: Vec<f64> = events.iter().map(|&e| if e { 1.0 / n_events as f64 } else { 0.0 }).collect();
    let weights = Tensor::from_vec(weights, n, &Device::Cpu)?.to_dtype(risks.dtype())?;
    Ok((risks - lse)?.mul(&weights)?.sum_all()?.neg()?)
}

/// Scalar loss of a [`RiskBatch`].
pub fn coxph_loss(batch: &RiskBatch) -> Result<f64> {
    batch.validate()?;
    let r = Tensor::from_slice(&batch.risks, batch.len(), &Device::Cpu)?.to_dtype(DType::F64)?;
    Ok(coxph_loss_tensor(&r, &batch.times, &batch.events)?.to_scalar::<f64>()?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::max_relative_error;
    use candle_core::Var;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Direct evaluation with explicit risk-set loops.
    fn oracle(b: &RiskBatch) -> f64 {
        let mut total = 0.0;
        let mut events = 0.0;
        for i in 0..b.len() {
            if !b.events[i] {
                continue;
            }
            let denom: f64 = (0..b.len()).filter(|&j| b.times[j] >= b.times[i]).map(|j| b.risks[j].exp()).sum();
            total += b.risks[i] - denom.ln();
            events += 1.0;
        }
        -total / events
    }

    #[test]
    fn three_subject_closed_form() {
        let b = RiskBatch::new(vec![0.0; 3], vec![1.0, 2.0, 3.0], vec![true; 3]).unwrap();
        assert!((coxph_loss(&b).unwrap() - 6f64.ln() / 3.0).abs() < 1e-6);
    }

    #[test]
    fn singleton_is_zero() {
        let b = RiskBatch::new(vec![1.7], vec![4.0], vec![true]).unwrap();
        assert!(coxph_loss(&b).unwrap().abs() < 1e-12);
    }

    #[test]
    fn shift_invariance_and_oracle_agreement() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            let n = rng.random_range(2..16);
            let risks: Vec<f64> = (0..n).map(|_| rng.random_range(-3.0..3.0)).collect();
            let times: Vec<f64> = (0..n).map(|_| rng.random_range(0..8) as f64).collect();
            let mut events: Vec<bool> = (0..n).map(|_| rng.random_bool(0.6)).collect();
            events[0] = true;
            let b = RiskBatch::new(risks.clone(), times.clone(), events.clone()).unwrap();
            let l = coxph_loss(&b).unwrap();
            assert!((l - oracle(&b)).abs() < 1e-9);
            let shifted = RiskBatch::new(risks.iter().map(|r| r + 5.5).collect(), times, events).unwrap();
            assert!((coxph_loss(&shifted).unwrap() - l).abs() < 1e-9);
        }
    }

    #[test]
    fn zero_events_is_a_loss_error() {
        let b = RiskBatch::new(vec![0.0, 1.0], vec![1.0, 2.0], vec![false, false]).unwrap();
        assert!(matches!(coxph_loss(&b), Err(Error::Loss(_))));
    }

    #[test]
    fn censored_subjects_only_enter_risk_sets() {
        // a censored late subject raises the earlier event's denominator
        let with = RiskBatch::new(vec![0.0, 0.0], vec![1.0, 5.0], vec![true, false]).unwrap();
        assert!((coxph_loss(&with).unwrap() - 2f64.ln()).abs() < 1e-12);
        // a censored early subject is in nobody's risk set
        let early = RiskBatch::new(vec![0.0, 0.0], vec![1.0, 5.0], vec![false, true]).unwrap();
        assert!(coxph_loss(&early).unwrap().abs() < 1e-12);
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..20 {
            let n = rng.random_range(2..=16);
            let risks: Vec<f64> = (0..n).map(|_| rng.random_range(-2.0..2.0)).collect();
            let times: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..50.0)).collect();
            let mut events: Vec<bool> = (0..n).map(|_| rng.random_bool(0.7)).collect();
            events[n - 1] = true;
            let v = Var::from_tensor(&Tensor::from_vec(risks, n, &Device::Cpu).unwrap()).unwrap();
            let err = max_relative_error(&v, n, 1e-5, || coxph_loss_tensor(v.as_tensor(), &times, &events).unwrap()).unwrap();
            assert!(err < 1e-4, "relative error {err}");
        }
    }
}
