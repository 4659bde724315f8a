use serde::{Deserialize, Serialize};

use super::CohortSample;
use crate::error::{Error, Result};

/// Z-scores the continuous clinical covariates with training-split moments
/// and passes binary flags through unchanged.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClinicalScaler {
    pub mean: Vec<f32>,
    pub std: Vec<f32>,
}

impl ClinicalScaler {
    pub fn identity(dim: usize) -> Self {
        ClinicalScaler { mean: vec![0.0; dim], std: vec![1.0; dim] }
    }

    pub fn fit(train: &[CohortSample], dim: usize, continuous: &[usize]) -> Result<Self> {
        if train.is_empty() {
            return Err(Error::Data("cannot fit clinical scaler on an empty split".into()));
        }
        let mut s = Self::identity(dim);
        let n = train.len() as f64;
        for &k in continuous.iter().filter(|k| **k < dim) {
            let vals = train.iter().map(|x| x.survival.clinical[k] as f64);
            let mean = vals.clone().sum::<f64>() / n;
            let var = vals.map(|v| (v - mean).powi(2)).sum::<f64>() / n;
            s.mean[k] = mean as f32;
            s.std[k] = if var > 1e-12 { var.sqrt() as f32 } else { 1.0 };
        }
        Ok(s)
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn transform(&self, x: &[f32]) -> Result<Vec<f32>> {
        if x.len() != self.dim() {
            return Err(Error::shape(format!("clinical vector of {} for scaler of {}", x.len(), self.dim())));
        }
        Ok(x.iter().zip(&self.mean).zip(&self.std).map(|((v, m), s)| (v - m) / s).collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synth::{generate_synthetic_cohort, SynthConfig};
    use crate::data::CONTINUOUS_CLINICAL;

    #[test]
    fn standardizes_continuous_and_keeps_flags() {
        let cfg = SynthConfig { image_size: 32, ..Default::default() };
        let s = generate_synthetic_cohort(100, 2, &cfg).unwrap();
        let scaler = ClinicalScaler::fit(&s, cfg.clinical_dim, &CONTINUOUS_CLINICAL).unwrap();
        let z: Vec<Vec<f32>> = s.iter().map(|x| scaler.transform(&x.survival.clinical).unwrap()).collect();
        let mean_age: f32 = z.iter().map(|v| v[0]).sum::<f32>() / 100.0;
        assert!(mean_age.abs() < 1e-4);
        for (zi, xi) in z.iter().zip(&s) {
            assert_eq!(zi[1], xi.survival.clinical[1]);
            assert_eq!(zi[10], xi.survival.clinical[10]);
        }
    }
}
